"""Class balancing by repetition/reduction and patient-grouped k-fold splitting."""
from __future__ import annotations

from typing import Iterator, List, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .phantom import Dataset
from .seeding import check_random_state


def oversample_indices(labels, num_classes: int, rng) -> np.ndarray:
    """Indices that repeat minority-class samples up to the largest class count.

    Every original index is kept once; extra indices are drawn uniformly
    with replacement from the same class.
    """
    rng = check_random_state(rng)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes)
    if counts.sum() == 0:
        raise ValueError("oversample: every class is empty")
    target = counts.max()
    chosen = [np.arange(len(labels))]
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if 0 < len(members) < target:
            chosen.append(rng.choice(members, size=target - len(members), replace=True))
    return np.concatenate(chosen)


def undersample_indices(labels, num_classes: int, rng) -> np.ndarray:
    """Indices keeping ``min`` samples per class, drawn without replacement.

    The rarest class is kept whole.
    """
    rng = check_random_state(rng)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes)
    if len(counts) == 0 or counts.min() < 1:
        raise ValueError(f"undersample: every class needs at least one sample, counts={counts.tolist()}")
    target = counts.min()
    chosen = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        chosen.append(members if len(members) == target else np.sort(rng.choice(members, size=target, replace=False)))
    return np.concatenate(chosen)


def oversample(dataset: Dataset, rng) -> Dataset:
    """Balance by repetition: every class grows to the largest class count."""
    return dataset.subset(oversample_indices(dataset.labels, dataset.num_classes, rng))


def undersample(dataset: Dataset, rng) -> Dataset:
    """Balance by reduction: every class shrinks to the smallest class count."""
    return dataset.subset(undersample_indices(dataset.labels, dataset.num_classes, rng))


def balance(dataset: Dataset, mode: str, rng) -> Dataset:
    mode = mode.upper() if mode.lower() != "none" else "none"
    if mode == "none":
        return dataset
    if mode == "OVS":
        return oversample(dataset, rng)
    if mode == "UNS":
        return undersample(dataset, rng)
    raise ValueError(f"unknown balancing mode {mode!r} (expected none, OVS or UNS)")


class RandomOverSampler(BaseEstimator):
    """``fit_resample`` front-end for :func:`oversample_indices`."""

    def __init__(self, num_classes=None, random_state=None):
        self.num_classes = num_classes
        self.random_state = random_state

    def fit_resample(self, X, y):
        y = np.asarray(y)
        k = self.num_classes or int(y.max()) + 1
        self.sample_indices_ = oversample_indices(y, k, self.random_state)
        return np.asarray(X)[self.sample_indices_], y[self.sample_indices_]


class RandomUnderSampler(BaseEstimator):
    """``fit_resample`` front-end for :func:`undersample_indices`."""

    def __init__(self, num_classes=None, random_state=None):
        self.num_classes = num_classes
        self.random_state = random_state

    def fit_resample(self, X, y):
        y = np.asarray(y)
        k = self.num_classes or int(y.max()) + 1
        self.sample_indices_ = undersample_indices(y, k, self.random_state)
        return np.asarray(X)[self.sample_indices_], y[self.sample_indices_]


class PatientKFold(BaseEstimator):
    """K-fold cross-validation where all samples of one patient share a fold.

    Patients are shuffled with ``random_state`` and dealt into ``n_splits``
    groups whose sizes differ by at most one.
    """

    def __init__(self, n_splits: int = 8, random_state=None):
        self.n_splits = n_splits
        self.random_state = random_state

    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return self.n_splits

    def patient_groups(self, groups) -> List[np.ndarray]:
        patients = np.unique(np.asarray(groups))
        if len(patients) < self.n_splits:
            raise ValueError(f"need at least {self.n_splits} patients, got {len(patients)}")
        rng = check_random_state(self.random_state)
        return [np.sort(g) for g in np.array_split(rng.permutation(patients), self.n_splits)]

    def split(self, X=None, y=None, groups=None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if groups is None:
            raise ValueError("PatientKFold.split requires groups (patient ids)")
        groups = np.asarray(groups)
        for held_out in self.patient_groups(groups):
            test = np.isin(groups, held_out)
            yield np.flatnonzero(~test), np.flatnonzero(test)


def kfold_patient_split(dataset: Dataset, k: int = 8, seed=None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(train_index, test_index) pairs for ``k`` patient-disjoint folds."""
    return list(PatientKFold(k, seed).split(groups=dataset.patient_ids))


def patient_holdout(dataset: Dataset, fraction: float, rng) -> Tuple[np.ndarray, np.ndarray]:
    """Split off roughly ``fraction`` of patients (at least one) as a validation set."""
    rng = check_random_state(rng)
    patients = rng.permutation(dataset.patients)
    n_val = max(1, int(round(fraction * len(patients)))) if len(patients) > 1 else 0
    val = np.isin(dataset.patient_ids, patients[:n_val])
    return np.flatnonzero(~val), np.flatnonzero(val)

"""Brute-force reference implementations shared by the metric and acceptance tests."""
import math

import numpy as np


def count_oracle(pred, truth, c):
    """TP/TN/FP/FN for class ``c`` by walking the samples one at a time."""
    tp = tn = fp = fn = 0
    for p, t in zip(pred, truth):
        if t == c and p == c:
            tp += 1
        elif t != c and p != c:
            tn += 1
        elif p == c:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def safe_div(a, b):
    return a / b if b else 0.0


def naive_mse(f, g):
    total = 0.0
    for a, b in zip(np.asarray(f, dtype=np.float64).ravel().tolist(), np.asarray(g, dtype=np.float64).ravel().tolist()):
        total += (a - b) ** 2
    return total / np.asarray(f).size


def naive_ssim(a, b, window=11, sigma=1.5, peak=255.0):
    """Per-window weighted statistics evaluated with explicit loops over every window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        coef = np.array([0.299, 0.587, 0.114])
        a, b = (a * coef).sum(-1), (b * coef).sum(-1)
    half = (window - 1) / 2
    w = np.array([[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2)) for j in range(window)] for i in range(window)])
    w /= w.sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    values = []
    for y in range(a.shape[0] - window + 1):
        for x in range(a.shape[1] - window + 1):
            pa = a[y : y + window, x : x + window]
            pb = b[y : y + window, x : x + window]
            mu_a, mu_b = (w * pa).sum(), (w * pb).sum()
            var_a = (w * (pa - mu_a) ** 2).sum()
            var_b = (w * (pb - mu_b) ** 2).sum()
            cov = (w * (pa - mu_a) * (pb - mu_b)).sum()
            values.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(values))


def gaussian_cloud(rng, mean, var, n):
    """Samples whose empirical mean and (unbiased) covariance equal ``mean`` and ``diag(var)`` exactly."""
    x = rng.normal(size=(n, len(mean)))
    x -= x.mean(axis=0)
    chol = np.linalg.cholesky(np.cov(x, rowvar=False))
    x = np.linalg.solve(chol, x.T).T
    return x * np.sqrt(var) + mean

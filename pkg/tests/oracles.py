"""Independent reference computations used to check the package."""
import contextlib
import itertools

import numpy as np

from spanhtr import autodiff as ad


def central_difference(f, arr, eps=1e-6, coords=None):
    """d f / d arr by central differences, in place on ``arr`` (restored after).

    ``coords`` limits the check to a list of flat indices; the result then
    holds values only at those positions.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def brute_force_ctc_prob(probs, label, blank):
    """Sum of path probabilities over every path that collapses to ``label``."""
    T, C = probs.shape
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        collapsed = []
        prev = None
        for k in path:
            if k != prev and k != blank:
                collapsed.append(k)
            prev = k
        if collapsed == list(label):
            total += float(np.prod([probs[t, k] for t, k in enumerate(path)]))
    return total


def edit_distance_table(a, b):
    """Full (len(a)+1) x (len(b)+1) Wagner-Fischer table, last cell returned."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
    return d[len(a)][len(b)]


@contextlib.contextmanager
def relu_sign_log(log):
    """Record the sign pattern of every ReLU input evaluated inside the block."""
    original = ad.relu

    def logged(x):
        log.append(np.packbits(x.data > 0).tobytes())
        return original(x)

    ad.relu = logged
    try:
        yield
    finally:
        ad.relu = original


def smooth_central_difference(f, arr, count, rng, eps=1e-6, max_draws=200):
    """Central differences at ``count`` random flat indices of ``arr``.

    A coordinate whose +-eps perturbation changes the on/off state of any
    ReLU is redrawn: the function is not differentiable on that interval,
    so a difference quotient there says nothing about the gradient.
    Returns (coords, numeric derivatives).
    """
    flat = arr.reshape(-1)

    def pattern():
        log = []
        with relu_sign_log(log):
            value = f()
        return value, b"".join(log)

    _, base = pattern()
    coords, values = [], []
    candidates = rng.permutation(flat.size)[:max_draws]
    for i in candidates:
        old = flat[i]
        flat[i] = old + eps
        fp, sp = pattern()
        flat[i] = old - eps
        fm, sm = pattern()
        flat[i] = old
        if sp != base or sm != base:
            continue
        coords.append(int(i))
        values.append((fp - fm) / (2 * eps))
        if len(coords) == count:
            break
    if len(coords) < min(count, flat.size):
        raise RuntimeError("could not find enough kink-free coordinates")
    return np.array(coords), np.array(values)

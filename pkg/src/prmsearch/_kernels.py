"""Numeric inner loops.

Each kernel exists twice: a numba ``@njit`` version and a plain numpy
version with identical semantics. Set ``PRMSEARCH_NUMBA=0`` to force the
numpy path; numba is used by default when it can be imported.

Both paths only use correctly rounded IEEE operations (+, *, /, sqrt) on
inputs prepared by the caller, so they agree bit-for-bit.
"""

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None


def _env_wants_numba():
    flag = os.environ.get("PRMSEARCH_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


# --- numpy reference path -------------------------------------------------

def _ucb_argmax_np(values, visits, log_parent, c):
    scores = values + c * np.sqrt(log_parent / (1.0 + visits))
    return int(np.argmax(scores))


def _quotas_np(counts, total):
    counts = np.asarray(counts, dtype=np.int64)
    s = int(counts.sum())
    num = counts * total
    base, rem = np.divmod(num, s)
    twice = 2 * rem
    up = (twice > s) | ((twice == s) & (base % 2 == 1))
    q = base + up
    # distance of the weight above its rounded quota, scaled by s
    d = num - q * s
    residual = total - int(q.sum())
    if residual > 0:
        order = np.argsort(-d, kind="stable")
        q[order[:residual]] += 1
    elif residual < 0:
        order = np.argsort(d, kind="stable")
        q[order[:-residual]] -= 1
    return q


def _row_sums_np(flat, offsets):
    """Left-to-right sum of every group, vectorized across groups.

    numpy's own ``sum`` is pairwise, which rounds differently from the
    sequential loops in the numba kernels. Summing column by column over a
    zero-padded matrix performs exactly the same additions (x + 0.0 == x).
    """
    lengths = np.diff(offsets)
    n = len(lengths)
    width = int(lengths.max()) if n else 0
    padded = np.zeros((n, width))
    rows = np.repeat(np.arange(n), lengths)
    cols = np.arange(len(flat)) - np.repeat(offsets[:-1], lengths)
    padded[rows, cols] = flat
    acc = np.zeros(n)
    for j in range(width):
        acc += padded[:, j]
    return acc


def _fold_np(x):
    # cumsum accumulates strictly in order, unlike sum
    return float(np.cumsum(x)[-1]) if len(x) else 0.0


def _group_stats_np(flat, offsets):
    n = len(offsets) - 1
    means = _row_sums_np(flat, offsets) / np.diff(offsets)
    mu = _fold_np(means) / n
    var = _fold_np((means - mu) ** 2) / n
    return mu, var


def _accumulated_argmax_np(flat, offsets, use_mean):
    sums = _row_sums_np(flat, offsets)
    if use_mean:
        sums = sums / np.maximum(np.diff(offsets), 1)
    return int(np.argmax(sums))


# --- numba path -----------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _ucb_argmax_nb(values, visits, log_parent, c):
        best = 0
        best_score = -np.inf
        for i in range(values.shape[0]):
            score = values[i] + c * math.sqrt(log_parent / (1.0 + visits[i]))
            if score > best_score:
                best_score = score
                best = i
        return best

    @numba.njit(cache=True)
    def _quotas_nb(counts, total):
        n = counts.shape[0]
        s = 0
        for i in range(n):
            s += counts[i]
        q = np.empty(n, dtype=np.int64)
        d = np.empty(n, dtype=np.int64)
        assigned = 0
        for i in range(n):
            num = counts[i] * total
            base = num // s
            rem = num - base * s
            if 2 * rem > s or (2 * rem == s and base % 2 == 1):
                base += 1
            q[i] = base
            d[i] = num - base * s
            assigned += base
        residual = total - assigned
        if residual > 0:
            order = np.argsort(-d, kind="mergesort")
            for k in range(residual):
                q[order[k]] += 1
        elif residual < 0:
            order = np.argsort(d, kind="mergesort")
            for k in range(-residual):
                q[order[k]] -= 1
        return q

    @numba.njit(cache=True)
    def _group_stats_nb(flat, offsets):
        n = offsets.shape[0] - 1
        means = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(offsets[i], offsets[i + 1]):
                acc += flat[j]
            means[i] = acc / (offsets[i + 1] - offsets[i])
        mu = 0.0
        for i in range(n):
            mu += means[i]
        mu /= n
        var = 0.0
        for i in range(n):
            var += (means[i] - mu) ** 2
        return mu, var / n

    @numba.njit(cache=True)
    def _accumulated_argmax_nb(flat, offsets, use_mean):
        best = 0
        best_val = -np.inf
        for i in range(offsets.shape[0] - 1):
            acc = 0.0
            for j in range(offsets[i], offsets[i + 1]):
                acc += flat[j]
            length = offsets[i + 1] - offsets[i]
            if use_mean and length > 0:
                acc /= length
            if acc > best_val:
                best_val = acc
                best = i
        return best

else:  # pragma: no cover
    _ucb_argmax_nb = _quotas_nb = _group_stats_nb = _accumulated_argmax_nb = None


USE_NUMBA = numba is not None and _env_wants_numba()

BACKENDS = {
    "numpy": {
        "ucb_argmax": _ucb_argmax_np,
        "quotas": _quotas_np,
        "group_stats": _group_stats_np,
        "accumulated_argmax": _accumulated_argmax_np,
    }
}
if numba is not None:
    BACKENDS["numba"] = {
        "ucb_argmax": _ucb_argmax_nb,
        "quotas": _quotas_nb,
        "group_stats": _group_stats_nb,
        "accumulated_argmax": _accumulated_argmax_nb,
    }

_active = BACKENDS["numba" if USE_NUMBA else "numpy"]


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def ragged(rows):
    """Flatten a list of float sequences into (values, offsets) arrays."""
    offsets = np.zeros(len(rows) + 1, dtype=np.int64)
    for i, row in enumerate(rows):
        offsets[i + 1] = offsets[i] + len(row)
    flat = np.fromiter((x for row in rows for x in row), dtype=np.float64, count=int(offsets[-1]))
    return flat, offsets


def ucb_argmax(values, visits, parent_visits, c):
    """Index of the child maximizing V + c*sqrt(log(max(N_parent, 1)) / (1 + N)).

    The first index wins ties.
    """
    log_parent = math.log(max(parent_visits, 1))
    return int(_active["ucb_argmax"](
        np.asarray(values, dtype=np.float64), np.asarray(visits, dtype=np.float64), float(log_parent), float(c)
    ))


def largest_remainder_quotas(counts, total):
    return _active["quotas"](np.asarray(counts, dtype=np.int64), int(total))


def group_mean_variance(rows):
    flat, offsets = ragged(rows)
    mu, var = _active["group_stats"](flat, offsets)
    return float(mu), float(var)


def accumulated_argmax(rows, use_mean=False):
    flat, offsets = ragged(rows)
    return int(_active["accumulated_argmax"](flat, offsets, bool(use_mean)))

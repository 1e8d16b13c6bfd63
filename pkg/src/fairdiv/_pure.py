"""Pure-Python/numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with identical
semantics; the two must produce bit-identical outputs for the assignment
kernels (same floating-point operations in the same order) and agree to
rounding for the solver iteration.  ``fairdiv._backend`` picks one at import.

All randomness is consumed from pre-drawn uniform arrays so that the kernels
are deterministic functions of their inputs.
"""

from __future__ import annotations

import numpy as np

BACKEND = "pure"


def pr_run(values: np.ndarray, budgets: np.ndarray, bids: np.ndarray, iters: int) -> None:
    """Run proportional-response bid updates in place.

    Each step: prices are the per-item bid sums, shares are bids over prices,
    and each agent re-bids its budget in proportion to the value shares of
    its current bundle.  Entries with zero value keep zero bids.
    """
    e = budgets[:, None]
    for _ in range(iters):
        p = bids.sum(axis=0)
        x = bids / p
        vx = values * x
        u = vx.sum(axis=1)
        np.multiply(e, vx / u[:, None], out=bids)


def assign_utilitarian(round_values: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Argmax assignment with uniform tie-breaking among exact-max agents.

    ``round_values`` is T-by-n; ``u[t]`` is the round's uniform draw, used
    only to pick among ties.
    """
    T, n = round_values.shape
    row_max = round_values.max(axis=1)
    ties = round_values == row_max[:, None]
    k = ties.sum(axis=1)
    r = np.minimum((u * k).astype(np.int64), k - 1)
    cs = ties.cumsum(axis=1)
    return np.argmax(cs >= (r + 1)[:, None], axis=1).astype(np.int64)


def assign_por(cdf: np.ndarray, dropped: np.ndarray, arrivals: np.ndarray,
               u: np.ndarray, n: int) -> np.ndarray:
    """Sample one agent per round from the arriving type's share column.

    ``cdf[j]`` is the cumulative share column for type ``j``.  Types flagged
    in ``dropped`` (valued zero by everyone) are assigned uniformly at
    random; they cannot affect envy or efficiency.
    """
    C = cdf[arrivals]
    idx = np.minimum((u[:, None] >= C).sum(axis=1), n - 1)
    drop_mask = dropped[arrivals].astype(bool)
    if drop_mask.any():
        idx = np.where(drop_mask, np.minimum((u * n).astype(np.int64), n - 1), idx)
    return idx.astype(np.int64)


def assign_pocr(clique_cdf: np.ndarray, members: np.ndarray, offsets: np.ndarray,
                leader_values: np.ndarray, dropped: np.ndarray,
                arrivals: np.ndarray, u: np.ndarray, n: int) -> np.ndarray:
    """Clique-then-least-served assignment.

    Per round, a clique is sampled from the arriving type's clique-share
    column; inside the clique the item goes to the member whose bundle is
    worth least so far under the lowest-indexed member's valuation, ties to
    the lowest agent index.  Singleton cliques shortcut to their member.
    """
    T = len(arrivals)
    s = clique_cdf.shape[1]
    out = np.empty(T, dtype=np.int64)
    C = clique_cdf[arrivals]
    cliques = np.minimum((u[:, None] >= C).sum(axis=1), s - 1).astype(np.int64)
    drop_mask = dropped[arrivals].astype(bool)
    if drop_mask.any():
        uniform_pick = np.minimum((u * n).astype(np.int64), n - 1)
    sizes = np.diff(offsets)
    # Singleton cliques and dropped rounds are position-independent.
    for c in np.nonzero(sizes == 1)[0]:
        out[cliques == c] = members[offsets[c]]
    if drop_mask.any():
        out[drop_mask] = uniform_pick[drop_mask]
    for c in np.nonzero(sizes > 1)[0]:
        rounds = np.nonzero((cliques == c) & ~drop_mask)[0]
        mem = members[offsets[c]:offsets[c + 1]]
        k = len(mem)
        running = [0.0] * k
        lv = leader_values[c]
        for t in rounds:
            best = 0
            best_v = running[0]
            for q in range(1, k):
                if running[q] < best_v:
                    best = q
                    best_v = running[q]
            out[t] = mem[best]
            running[best] = running[best] + lv[arrivals[t]]
    return out


def assign_uniform(u: np.ndarray, n: int) -> np.ndarray:
    return np.minimum((u * n).astype(np.int64), n - 1)


def assign_round_robin(T: int, n: int) -> np.ndarray:
    return (np.arange(T, dtype=np.int64) % n)

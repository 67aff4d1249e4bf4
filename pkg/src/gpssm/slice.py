"""Univariate slice sampling with linear stepping out and shrinkage."""

import logging
import math

import numpy as np

log = logging.getLogger(__name__)


def slice_sample_1d(logp, x0: float, rng, width: float = 1.0, max_expansions: int = 50,
                    logp0=None, max_shrinks: int = 500):
    """One slice-sampling update of a scalar.

    The step-out budget is split at random between the two ends, which keeps
    the update reversible even when the budget runs out (a warning is
    logged in that case).

    Returns:
        (new value, its log-density)
    """
    if logp0 is None:
        logp0 = logp(x0)
    if not np.isfinite(logp0):
        raise ValueError(f"slice sampler started at a point of zero density: {x0}")
    log_y = logp0 + math.log(rng.random())
    left = x0 - width * rng.random()
    right = left + width
    j = int(math.floor(max_expansions * rng.random()))
    k = max_expansions - 1 - j
    exhausted = False
    while logp(left) > log_y:
        if j == 0:
            exhausted = True
            break
        left -= width
        j -= 1
    while logp(right) > log_y:
        if k == 0:
            exhausted = True
            break
        right += width
        k -= 1
    # one side may get no expansions by design; only a spent total budget is notable
    if exhausted and j == 0 and k == 0 and max_expansions > 1:
        log.warning("slice step-out hit the expansion budget (%d)", max_expansions)
    for _ in range(max_shrinks):
        x1 = left + rng.random() * (right - left)
        lp = logp(x1)
        if lp > log_y:
            return x1, lp
        if x1 < x0:
            left = x1
        else:
            right = x1
    raise RuntimeError("slice shrinkage did not terminate")


def slice_scan(logp, x, coords, rng, width=1.0, max_expansions=50):
    """Update ``x[c]`` for each ``c`` in ``coords`` in turn.

    ``logp`` takes the full vector. Returns the new vector and its log-density.
    """
    x = np.array(x, dtype=float)
    lp = logp(x)
    for c in coords:
        def cond(v, c=c):
            x[c] = v
            return logp(x)

        x0 = x[c]
        x1, lp = slice_sample_1d(cond, x0, rng, width, max_expansions, logp0=lp)
        x[c] = x1
    return x, lp

"""Pure-numpy implementations of the hot evaluation kernels.

Function-for-function mirror of the compiled extension ``_ckernels``; the
active implementation is selected in ``cmdfit._core`` at import time.
Callers pass the flattened table layout produced by
``IsochroneTable.flat()``.
"""

import numpy as np

BACKEND = "python"

_LN10 = float(np.log(10.0))


def _bracket(grid, v):
    """(lo, hi, weight) such that v = (1-w)*grid[lo] + w*grid[hi]."""
    n = grid.shape[0]
    if n == 1:
        if v != grid[0]:
            raise ValueError(f"value {v} outside single-point grid [{grid[0]}]")
        return 0, 0, 0.0
    if v < grid[0] or v > grid[-1]:
        raise ValueError(f"value {v} outside grid [{grid[0]}, {grid[-1]}]")
    i = int(np.searchsorted(grid, v, side="left"))
    if i == 0:
        return 0, 1, 0.0
    lo = i - 1
    return lo, i, float((v - grid[lo]) / (grid[i] - grid[lo]))


def _interp_track(tm, tg, masses):
    # Linear in mass; index clipping extends the lowest segment below the
    # track minimum (the low-mass extrapolation rule).
    L = tm.shape[0]
    pos = np.clip(np.searchsorted(tm, masses), 1, L - 1)
    lo = pos - 1
    t = (masses - tm[lo]) / (tm[pos] - tm[lo])
    return tg[lo] + t[:, None] * (tg[pos] - tg[lo])


def predict_absolute(
    feh_grid, age_grid, cell_offset, cell_len, node_mass, node_mag, feh, age, m1, r
):
    """Combined-system absolute magnitudes for N stars at one (feh, age).

    The secondary mass is ``r * m1``; ``r <= 0`` means a single star.
    Returns ``(gabs, ok)`` where ``gabs`` has shape (N, n_filters) and
    ``ok`` is False for rows whose primary mass exceeds the maximum of a
    bracketing track (those rows are not meaningful).
    """
    m1 = np.asarray(m1, dtype=float)
    r = np.asarray(r, dtype=float)
    n = m1.shape[0]
    nf = node_mag.shape[1]
    f0, f1, wf = _bracket(feh_grid, feh)
    a0, a1, wa = _bracket(age_grid, age)
    n_age = age_grid.shape[0]

    ok = np.ones(n, dtype=bool)
    g1 = np.zeros((n, nf))
    m2 = r * m1
    has2 = r > 0.0
    any2 = bool(np.any(has2))
    g2 = np.zeros((n, nf)) if any2 else None

    for fi, wff in ((f0, 1.0 - wf), (f1, wf)):
        for aj, waa in ((a0, 1.0 - wa), (a1, wa)):
            w = wff * waa
            if w == 0.0:
                continue
            cell = fi * n_age + aj
            off = int(cell_offset[cell])
            length = int(cell_len[cell])
            tm = node_mass[off : off + length]
            tg = node_mag[off : off + length]
            ok &= m1 <= tm[-1]
            g1 += w * _interp_track(tm, tg, m1)
            if any2:
                g2 += w * _interp_track(tm, tg, m2)

    if not any2:
        return g1, ok
    mn = np.minimum(g1, g2)
    d = np.abs(g1 - g2)
    comb = mn - (2.5 / _LN10) * np.log1p(np.exp(-d * (_LN10 / 2.5)))
    return np.where(has2[:, None], comb, g1), ok


def gauss_rows(xfill, inv2var, const, gabs, dm, av, kappa):
    """Per-star Gaussian log densities of the observed magnitudes.

    ``xfill`` holds observed magnitudes with missing cells filled by 0 and
    ``inv2var`` holds 1/(2 sigma^2) with 0 at missing cells; ``const`` is
    the per-star sum of the -0.5*log(2 pi sigma^2) terms over non-missing
    filters. Apparent magnitudes are formed in place as
    ``gabs + dm + kappa * av``.
    """
    resid = xfill - (gabs + dm + kappa * av)
    return const - np.einsum("ij,ij->i", inv2var, resid * resid)

"""Agreement statistics over binary survival tables (items x raters).

Items are heads (optionally followed by MLPs) and raters are random seeds.
Undefined statistics are reported as ``NaN`` rather than an arbitrary number.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaincc

NOT_A_VALUE = float("nan")


def _binary_table(table) -> np.ndarray:
    t = np.asarray(table)
    if t.ndim != 2:
        raise ValueError("survival table must be items x raters")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("survival table entries must be 0 or 1")
    return t.astype(np.int64)


def survival_table(masks: list, include_mlps: bool = False) -> np.ndarray:
    """Stack per-seed :class:`SubnetworkMask` objects into an items x seeds table."""
    cols = []
    for m in masks:
        col = m.xi.reshape(-1)
        if include_mlps:
            col = np.concatenate([col, m.nu])
        cols.append(col)
    return np.stack(cols, axis=1).astype(np.int64)


def fleiss_kappa(table) -> float:
    """Fleiss' kappa for two categories (survived / pruned).

    Returns ``NaN`` when chance agreement is 1, i.e. every entry is identical.
    """
    t = _binary_table(table)
    items, raters = t.shape
    if items < 2 or raters < 2:
        raise ValueError("need at least 2 items and 2 raters")
    ones = t.sum(axis=1)
    counts = np.stack([raters - ones, ones], axis=1).astype(np.float64)
    p_item = ((counts**2).sum(axis=1) - raters) / (raters * (raters - 1))
    p_bar = p_item.mean()
    p_cat = counts.sum(axis=0) / (items * raters)
    p_e = float((p_cat**2).sum())
    if np.isclose(p_e, 1.0, rtol=0, atol=1e-15):
        return NOT_A_VALUE
    return float((p_bar - p_e) / (1.0 - p_e))


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def cochran_q(table) -> tuple:
    """Cochran's Q for k related binary samples; returns ``(Q, p_value)``.

    Rows that are all 0 or all 1 carry no information and are dropped.  If
    every row is constant the raters are indistinguishable and the result is
    ``(0.0, 1.0)``; an empty table yields ``(NaN, NaN)``.
    """
    t = _binary_table(table)
    k = t.shape[1]
    if k < 2:
        raise ValueError("need at least 2 raters")
    if t.shape[0] == 0:
        return NOT_A_VALUE, NOT_A_VALUE
    row = t.sum(axis=1)
    keep = (row > 0) & (row < k)
    if not keep.any():
        return 0.0, 1.0
    t = t[keep]
    row = row[keep]
    col = t.sum(axis=0)
    n = t.sum()
    q = (k - 1) * (k * float((col**2).sum()) - float(n) ** 2) / (k * float(n) - float((row**2).sum()))
    return float(q), chi2_sf(q, k - 1)

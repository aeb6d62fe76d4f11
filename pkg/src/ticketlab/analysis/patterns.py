"""Raw and weight-normed attention maps and a feature-based pattern classifier.

Five pattern types are distinguished:

* ``diagonal``: attention to the previous/next/current token;
* ``vertical``: attention to the boundary tokens (first and last position);
* ``vertical_diagonal``: both of the above;
* ``block``: near-uniform attention over a contiguous span;
* ``heterogeneous``: anything else.

The decision rule works on row-normalised maps and three features:

``band``
    mean mass with ``|i - j| <= 1``;
``vertical``
    mean mass in the special columns that lies *outside* the band (so the
    identity map never looks vertical);
``block``
    fraction of rows whose dominant support is a contiguous run of at least
    ``block_min_width`` columns holding most of the row's mass.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .. import autograd as ag
from .. import metrics
from ..encoder import ModelConfig, SubnetworkMask, _Ctx, encode

DIAGONAL = "diagonal"
VERTICAL = "vertical"
VERTICAL_DIAGONAL = "vertical_diagonal"
BLOCK = "block"
HETEROGENEOUS = "heterogeneous"
LABELS = (DIAGONAL, VERTICAL, VERTICAL_DIAGONAL, BLOCK, HETEROGENEOUS)


@dataclass(frozen=True)
class PatternThresholds:
    diagonal: float = 0.5  # band mass for a pure diagonal map
    vertical: float = 0.5  # off-band special-column mass for a pure vertical map
    mixed_band: float = 0.25  # both features above these -> vertical_diagonal
    mixed_vertical: float = 0.25
    block_rows: float = 0.6  # fraction of rows that must look like a block
    block_min_width: int = 4
    block_support: float = 0.5  # column is in a row's support if >= this * row max
    block_mass: float = 0.8  # support must hold this much of the row


THRESHOLDS = PatternThresholds()


# -- maps -----------------------------------------------------------------------

def normed_attention(alpha: np.ndarray, transformed: np.ndarray) -> np.ndarray:
    """``alpha[i, j] * ||f(x_j)||`` where ``f`` is the value-then-output transform.

    Works on ``(n, n)``/``(n, d)`` pairs or batched ``(b, n, n)``/``(b, n, d)``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    norms = np.linalg.norm(np.asarray(transformed, dtype=np.float64), axis=-1)
    return alpha * norms[..., None, :]


def attention_maps(params: dict, config: ModelConfig, tokens, subnet_mask: SubnetworkMask | None = None,
                   weight_mask: dict | None = None) -> tuple:
    """Raw and normed maps for every unmasked head: two dicts ``(l, h) -> (b, n, n)``.

    Only the encoder body is run, so checkpoints without a classifier work too.
    """
    mask = SubnetworkMask.full(config) if subnet_mask is None else subnet_mask
    ctx = _Ctx(params, config, weight_mask, None, None, None, None, True)
    with ag.no_grad():
        encode(np.asarray(tokens), ctx, mask)
    raw = dict(ctx.attention)
    normed = {k: normed_attention(raw[k], ctx.values[k]) for k in raw}
    return raw, normed


# -- features and decision rule --------------------------------------------------

def row_normalize(m: np.ndarray) -> np.ndarray:
    """Rows scaled to sum to one; all-zero rows become uniform."""
    m = np.asarray(m, dtype=np.float64)
    sums = m.sum(axis=1, keepdims=True)
    n = m.shape[1]
    return np.where(sums > 0, m / np.where(sums > 0, sums, 1.0), 1.0 / n)


def _check_map(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"attention map must be square, got shape {m.shape}")
    if not np.isfinite(m).all() or (m < 0).any():
        raise ValueError("attention map must be finite and non-negative")
    return m


def _block_row(row: np.ndarray, th: PatternThresholds) -> bool:
    support = np.flatnonzero(row >= th.block_support * row.max())
    contiguous = support[-1] - support[0] + 1 == support.size
    return bool(contiguous and support.size >= th.block_min_width and row[support].sum() >= th.block_mass)


def pattern_features(m, special_positions=None, thresholds: PatternThresholds = THRESHOLDS) -> dict:
    p = row_normalize(_check_map(m))
    n = p.shape[0]
    i, j = np.indices(p.shape)
    band = np.abs(i - j) <= 1
    special = np.zeros(n, dtype=bool)
    special[[0, n - 1] if special_positions is None else list(special_positions)] = True
    off_band_special = special[None, :] & ~band
    return {
        "band": float((p * band).sum(axis=1).mean()),
        "vertical": float((p * off_band_special).sum(axis=1).mean()),
        "block": float(np.mean([_block_row(r, thresholds) for r in p])),
    }


def classify_pattern(m, special_positions=None, thresholds: PatternThresholds = THRESHOLDS) -> str:
    f = pattern_features(m, special_positions, thresholds)
    th = thresholds
    if f["block"] >= th.block_rows:
        return BLOCK
    if f["band"] >= th.mixed_band and f["vertical"] >= th.mixed_vertical:
        return VERTICAL_DIAGONAL
    if f["band"] >= th.diagonal:
        return DIAGONAL
    if f["vertical"] >= th.vertical:
        return VERTICAL
    return HETEROGENEOUS


# -- procedural prototype gold set -------------------------------------------------

def _noisy(rng, proto: np.ndarray, max_noise: float) -> np.ndarray:
    eps = rng.uniform(0.0, max_noise)
    noise = rng.dirichlet(np.ones(proto.shape[1]), size=proto.shape[0])
    return (1.0 - eps) * proto + eps * noise


def _proto_diagonal(rng, n):
    m = np.zeros((n, n))
    w = rng.dirichlet([1.0, 1.0, 1.0])  # previous, self, next
    for i in range(n):
        for off, wk in zip((-1, 0, 1), w):
            m[i, min(max(i + off, 0), n - 1)] += wk
    return m


def _proto_vertical(rng, n):
    m = np.zeros((n, n))
    share = rng.uniform(0.0, 1.0)
    m[:, 0] = share
    m[:, n - 1] = 1.0 - share
    return m


def _proto_vertical_diagonal(rng, n):
    mix = rng.uniform(0.35, 0.65)
    return mix * _proto_diagonal(rng, n) + (1 - mix) * _proto_vertical(rng, n)


def _proto_block(rng, n):
    m = np.zeros((n, n))
    cuts = [0, n]
    if n >= 12 and rng.random() < 0.6:
        cuts = [0, int(rng.integers(6, n - 5)), n]
    for a, b in zip(cuts[:-1], cuts[1:]):
        m[a:b, a:b] = 1.0 / (b - a)
    return m


def _proto_heterogeneous(rng, n):
    m = np.zeros((n, n))
    inner = np.arange(1, n - 1)
    for i in range(n):
        far = inner[np.abs(inner - i) > 1]
        k = int(rng.integers(2, 4))
        cols = rng.choice(far, size=k, replace=False)
        # keep the peaks non-adjacent so they do not form a block
        while np.any(np.diff(np.sort(cols)) <= 1):
            cols = rng.choice(far, size=k, replace=False)
        m[i, cols] = rng.dirichlet(np.ones(k))
    return m


_PROTOTYPES = {
    DIAGONAL: _proto_diagonal,
    VERTICAL: _proto_vertical,
    VERTICAL_DIAGONAL: _proto_vertical_diagonal,
    BLOCK: _proto_block,
    HETEROGENEOUS: _proto_heterogeneous,
}


def prototype_gold_set(seed: int = 0, per_class: int = 200, n: int = 16, max_noise: float = 0.3):
    """Noisy versions of the five archetypes: ``(maps, labels)``."""
    rng = np.random.default_rng([seed, 5151])
    maps, labels = [], []
    for label in LABELS:
        for _ in range(per_class):
            maps.append(_noisy(rng, _PROTOTYPES[label](rng, n), max_noise))
            labels.append(label)
    return np.stack(maps), labels


# -- distributions and correlations ----------------------------------------------

def label_fractions(labels) -> dict:
    labels = list(labels)
    counts = Counter(labels)
    total = len(labels)
    if total == 0:
        return {k: 0.0 for k in LABELS}
    return {k: counts.get(k, 0) / total for k in LABELS}


def head_labels(maps: dict, special_positions=None) -> dict:
    """Majority label per head over its sample maps; ties go to the earlier label."""
    out = {}
    for key, stack in sorted(maps.items()):
        counts = Counter(classify_pattern(m, special_positions) for m in stack)
        out[key] = max(LABELS, key=lambda lab: (counts.get(lab, 0), -LABELS.index(lab)))
    return out


def pattern_distribution(maps: dict, heads=None, special_positions=None) -> dict:
    """Label fractions over every (head, sample) map of the selected heads."""
    keys = sorted(maps) if heads is None else [k for k in sorted(maps) if k in set(heads)]
    labels = [classify_pattern(m, special_positions) for k in keys for m in maps[k]]
    return label_fractions(labels)


def pattern_report(pretrained: dict, finetuned: dict, config: ModelConfig, tokens,
                   super_mask: SubnetworkMask | None = None) -> dict:
    """Fractions per (model, variant, head selection) cell.

    ``pretrained``/``finetuned`` are parameter dicts; the super-survivor cells
    use only heads that are 1 in ``super_mask``.
    """
    report = {}
    for model_name, params in (("pretrained", pretrained), ("finetuned", finetuned)):
        raw, normed = attention_maps(params, config, tokens)
        for variant, maps in (("raw", raw), ("normed", normed)):
            report[(model_name, variant, "all")] = pattern_distribution(maps)
            if super_mask is not None:
                heads = [tuple(int(v) for v in x) for x in np.argwhere(super_mask.xi == 1)]
                report[(model_name, variant, "super_survivor")] = pattern_distribution(maps, heads)
    return report


def survivor_pattern_correlation(survival, labels) -> float:
    """Pearson correlation of "survives" with "is heterogeneous" over heads.

    A constant indicator gives 0.0.
    """
    s = np.asarray(survival, dtype=np.float64).reshape(-1)
    h = np.array([lab == HETEROGENEOUS for lab in labels], dtype=np.float64)
    if s.shape != h.shape:
        raise ValueError("survival and labels must cover the same heads")
    return metrics.pearson_corr(s, h)

"""Stability, attention-pattern and overlap analyses of pruned subnetworks."""

from .overlap import binarize_mean, overlap_matrix, pairwise_overlap, survival_rates
from .patterns import (
    LABELS,
    PatternThresholds,
    attention_maps,
    classify_pattern,
    label_fractions,
    normed_attention,
    pattern_distribution,
    pattern_report,
    prototype_gold_set,
    survivor_pattern_correlation,
)
from .stats import NOT_A_VALUE, chi2_sf, cochran_q, fleiss_kappa, survival_table

__all__ = [
    "LABELS", "NOT_A_VALUE", "PatternThresholds", "attention_maps", "binarize_mean", "chi2_sf",
    "classify_pattern", "cochran_q", "fleiss_kappa", "label_fractions", "normed_attention",
    "overlap_matrix", "pairwise_overlap", "pattern_distribution", "pattern_report",
    "prototype_gold_set", "survival_rates", "survival_table", "survivor_pattern_correlation",
]

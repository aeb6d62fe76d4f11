"""Survival rates, cross-task overlap matrices and super-survivor algebra."""

from __future__ import annotations

import numpy as np

from ..encoder import SubnetworkMask


def survival_rates(masks: list) -> dict:
    """Per-element mean and std (over seeds) of head and MLP survival."""
    xi = np.stack([m.xi for m in masks]).astype(np.float64)
    nu = np.stack([m.nu for m in masks]).astype(np.float64)
    return {"heads_mean": xi.mean(0), "heads_std": xi.std(0),
            "mlps_mean": nu.mean(0), "mlps_std": nu.std(0)}


def binarize_mean(masks: list) -> SubnetworkMask:
    """Elements surviving in more than half of the seeds."""
    r = survival_rates(masks)
    return SubnetworkMask((r["heads_mean"] > 0.5).astype(np.int8), (r["mlps_mean"] > 0.5).astype(np.int8))


def pairwise_overlap(vectors: list) -> np.ndarray:
    """``M[a, b] = |v_a AND v_b|`` for binary vectors of equal length."""
    v = np.stack([np.asarray(x).reshape(-1) for x in vectors]).astype(np.int64)
    if not np.isin(v, (0, 1)).all():
        raise ValueError("overlap inputs must be binary")
    return v @ v.T


def _check_shapes(per_task_masks: dict):
    shapes = {(m.xi.shape, m.nu.shape) for ms in per_task_masks.values() for m in ms}
    if len(shapes) != 1:
        raise ValueError("all masks must share one shape")


def overlap_matrix(per_task_masks: dict) -> dict:
    """Task x task overlap of s-pruned good subnetworks, heads and MLPs separately.

    ``per_task_masks`` maps task -> list of per-seed masks (seed order must
    agree across tasks).  ``heads``/``mlps`` use the seed average binarised at
    > 0.5; ``*_mean``/``*_std`` are over seeds of the per-seed matrices.
    """
    if not per_task_masks:
        raise ValueError("no masks given")
    _check_shapes(per_task_masks)
    tasks = list(per_task_masks)
    binar = [binarize_mean(per_task_masks[t]) for t in tasks]
    out = {"tasks": tasks,
           "heads": pairwise_overlap([m.xi for m in binar]),
           "mlps": pairwise_overlap([m.nu for m in binar])}
    n_seeds = min(len(per_task_masks[t]) for t in tasks)
    per_seed_h = np.stack([pairwise_overlap([per_task_masks[t][s].xi for t in tasks]) for s in range(n_seeds)])
    per_seed_m = np.stack([pairwise_overlap([per_task_masks[t][s].nu for t in tasks]) for s in range(n_seeds)])
    out["heads_per_seed"] = per_seed_h
    out["mlps_per_seed"] = per_seed_m
    out["heads_mean"], out["heads_std"] = per_seed_h.mean(0), per_seed_h.std(0)
    out["mlps_mean"], out["mlps_std"] = per_seed_m.mean(0), per_seed_m.std(0)
    return out

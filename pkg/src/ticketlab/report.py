"""CSV tables and SVG figures built from stored experiment records."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from . import figures
from .analysis import cochran_q, fleiss_kappa, overlap_matrix, survival_rates, survival_table
from .encoder import ModelConfig
from .experiments import BAD, FULL, GOOD, KINDS, RANDOM, success_criterion
from .pruning import block_survival


def _cell(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def to_csv(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(x) for x in r])
    return buf.getvalue()


def _mean_std(values):
    v = [x for x in values if x is not None]
    if not v:
        return None, None
    return float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def full_metrics(records: list) -> dict:
    out: dict = {}
    for r in records:
        if r.kind == FULL:
            out.setdefault(r.task, {})[r.seed] = r.retrained_metric
    return out


def _ordered_tasks(records):
    seen = []
    for r in records:
        if r.task not in seen:
            seen.append(r.task)
    return seen


def summary_table(records: list) -> tuple:
    """One row per (task, method, kind): seed-mean/std of metrics and success count."""
    full = full_metrics(records)
    groups: dict = {}
    for r in records:
        groups.setdefault((r.task, r.method, r.kind), []).append(r)
    rows = []
    for task in _ordered_tasks(records):
        for method in ("none", "m", "s"):
            for kind in (FULL,) + KINDS:
                recs = groups.get((task, method, kind))
                if not recs:
                    continue
                recs = sorted(recs, key=lambda r: r.seed)
                pm, ps = _mean_std([r.pruned_metric for r in recs])
                rm, rs = _mean_std([r.retrained_metric for r in recs])
                sm, _ = _mean_std([r.size_fraction for r in recs])
                fm = list(full.get(task, {}).values())
                ok = sum(success_criterion(r.retrained_metric, fm) for r in recs
                         if r.retrained_metric is not None) if len(fm) >= 2 else None
                rows.append([task, method, kind, len(recs), sm, pm, ps, rm, rs, ok])
    header = ["task", "method", "kind", "seeds", "size_fraction", "pruned_mean", "pruned_std",
              "retrained_mean", "retrained_std", "successes"]
    return header, rows


def good_masks(records: list, method: str = "s") -> dict:
    """task -> per-seed good masks (seed order)."""
    out: dict = {}
    for r in sorted(records, key=lambda r: (r.task, r.seed)):
        if r.method == method and r.kind == GOOD:
            out.setdefault(r.task, []).append(r.subnet_mask if method == "s" else r.weight_mask)
    return {t: out[t] for t in _ordered_tasks(records) if t in out}


def stability_table(records: list) -> tuple:
    """Fleiss' kappa (heads only, and heads + MLPs) and Cochran's Q per task."""
    rows = []
    for task, masks in good_masks(records, "s").items():
        if len(masks) < 2:
            continue
        heads = survival_table(masks)
        both = survival_table(masks, include_mlps=True)
        q, p = cochran_q(heads)
        rows.append([task, len(masks), fleiss_kappa(heads), fleiss_kappa(both), q, p])
    return ["task", "seeds", "kappa_heads", "kappa_heads_mlps", "cochran_q", "cochran_p"], rows


def overlap_tables(records: list) -> dict:
    masks = good_masks(records, "s")
    if not masks:
        return {}
    ov = overlap_matrix(masks)
    tasks = ov["tasks"]
    out = {}
    for part in ("heads", "mlps"):
        rows = []
        for i, a in enumerate(tasks):
            for j, b in enumerate(tasks):
                rows.append([a, b, int(ov[part][i, j]), float(ov[f"{part}_mean"][i, j]),
                             float(ov[f"{part}_std"][i, j])])
        out[part] = (["task_a", "task_b", "binarized", "mean", "std"], rows, ov)
    return out


def write_analysis(records: list, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    header, rows = stability_table(records)
    (out / "stability.csv").write_text(to_csv(header, rows))
    written.append(out / "stability.csv")
    for part, (header, rows, _) in overlap_tables(records).items():
        path = out / f"overlap_{part}.csv"
        path.write_text(to_csv(header, rows))
        written.append(path)
    return written


def _structure_grid(masks) -> tuple:
    """Layers x (heads + MLP) survival mean/std from s-masks."""
    r = survival_rates(masks)
    mean = np.column_stack([r["heads_mean"], r["mlps_mean"]])
    std = np.column_stack([r["heads_std"], r["mlps_std"]])
    return mean, std


def _weight_grid(weight_masks, config: ModelConfig) -> tuple:
    grids = []
    for wm in weight_masks:
        b = block_survival(wm, config)
        grids.append(np.column_stack([b["head_fraction"], b["mlp_fraction"]]))
    g = np.stack(grids)
    return g.mean(0), g.std(0)


def write_report(records: list, out_dir, config: ModelConfig) -> list:
    """summary.csv, survival heatmaps per task and method, LTH bar charts and
    the cross-task overlap heatmap."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    header, rows = summary_table(records)
    (out / "summary.csv").write_text(to_csv(header, rows))
    written.append(out / "summary.csv")
    cols = [f"h{h}" for h in range(config.num_heads)] + ["mlp"]
    rows_l = [f"layer {l}" for l in range(config.num_layers)]
    for task, masks in good_masks(records, "s").items():
        mean, std = _structure_grid(masks)
        path = out / f"survival_s_{task}.svg"
        figures.emit_heatmap(mean, path, std, row_labels=rows_l, col_labels=cols,
                             title=f"{task}: s-pruning survival", vmin=0.0, vmax=1.0)
        written.append(path)
    for task, wms in good_masks(records, "m").items():
        if any(w is None for w in wms):
            continue
        mean, std = _weight_grid(wms, config)
        path = out / f"survival_m_{task}.svg"
        figures.emit_heatmap(mean, path, std, row_labels=rows_l, col_labels=cols,
                             title=f"{task}: m-pruning surviving weight fraction", vmin=0.0, vmax=1.0)
        written.append(path)
    summary = {(r[0], r[1], r[2]): (r[7], r[8]) for r in rows}
    for method in ("m", "s"):
        groups = {}
        for task in _ordered_tasks(records):
            g = {}
            if (task, "none", FULL) in summary:
                g["full"] = summary[(task, "none", FULL)]
            for kind in (GOOD, RANDOM, BAD):
                if (task, method, kind) in summary:
                    g[kind] = summary[(task, method, kind)]
            if len(g) > 1:
                groups[task] = g
        if groups:
            path = out / f"lth_{method}.svg"
            figures.emit_bar_chart(groups, path, title=f"{method}-pruning: retrained subnetworks")
            written.append(path)
    ov = overlap_tables(records)
    if ov:
        _, _, mat = ov["heads"]
        path = out / "overlap_heads.svg"
        figures.emit_heatmap(mat["heads_mean"], path, mat["heads_std"], row_labels=mat["tasks"],
                             col_labels=[t[:6] for t in mat["tasks"]], title="shared surviving heads")
        written.append(path)
    return written


def pattern_tables(checkpoint, suite: list, records: list, train_config, samples: int = 32) -> tuple:
    """Pattern fractions per task for pretrained/fine-tuned x raw/normed x
    all/super-survivor heads, plus survivor-heterogeneity correlations.

    The fine-tuned model is re-derived from ``checkpoint`` with the first seed.
    """
    from .analysis import patterns as pt
    from .experiments import super_survivors
    from .training import fine_tune

    masks = good_masks(records, "s")
    frac_rows, corr_rows = [], []
    for task in suite:
        seeds = sorted({r.seed for r in records if r.task == task.name}) or [0]
        model, _ = fine_tune(checkpoint, task, train_config.with_seed(seeds[0]))
        tokens = task.dev.tokens[:samples]
        sup = super_survivors(masks[task.name]) if len(masks.get(task.name, [])) >= 2 else None
        rep = pt.pattern_report(checkpoint.params, model.params, checkpoint.config, tokens, sup)
        for (model_name, variant, heads), fr in sorted(rep.items()):
            frac_rows.append([task.name, model_name, variant, heads] + [fr[k] for k in pt.LABELS])
        if sup is not None:
            raw, normed = pt.attention_maps(model.params, checkpoint.config, tokens)
            for variant, maps in (("raw", raw), ("normed", normed)):
                labels = pt.head_labels(maps)
                keys = sorted(labels)
                surv = [sup.xi[k] for k in keys]
                corr_rows.append([task.name, variant,
                                  pt.survivor_pattern_correlation(surv, [labels[k] for k in keys])])
    return (["task", "model", "variant", "heads"] + list(pt.LABELS), frac_rows), \
           (["task", "variant", "pearson_survivor_heterogeneous"], corr_rows)

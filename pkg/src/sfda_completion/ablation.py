"""Ablation variants and config sweeps for the adaptation recipe.

Every variant is the same training loop with ingredients toggled through a
``LossPlan``; nothing is reimplemented per variant. Results come out as flat
rows (one per category per run plus an overall row) that serve both the text
tables and the JSONL artifacts.
"""

import json
import statistics
from dataclasses import replace
from pathlib import Path

from . import training
from .training import DISTANCE_CONVENTION, LossPlan

_VARIANTS = {
    "A": (
        LossPlan(
            fine=True,
            coarse=False,
            feature=False,
            consistency=False,
            partial=True,
            use_masks=False,
            use_ema=False,
        ),
        "fine distillation + partial anchoring, frozen teacher, no masked views",
    ),
    "B": (
        LossPlan(
            fine=True,
            coarse=True,
            feature=False,
            consistency=False,
            partial=True,
            use_masks=False,
            use_ema=False,
        ),
        "A plus coarse distillation",
    ),
    "C": (
        LossPlan(
            fine=False,
            coarse=False,
            feature=False,
            consistency=True,
            partial=True,
            use_masks=True,
            use_ema=True,
        ),
        "masked-view consistency + partial only, EMA teacher, no distillation",
    ),
    "D": (
        LossPlan(
            fine=True,
            coarse=False,
            feature=True,
            consistency=True,
            partial=True,
            use_masks=True,
            use_ema=True,
        ),
        "fine + feature-similarity distillation with masked views and EMA",
    ),
    "E": (
        LossPlan(
            fine=True,
            coarse=True,
            feature=False,
            consistency=False,
            partial=True,
            use_masks=False,
            use_ema=True,
        ),
        "B plus EMA teacher, still no masked views",
    ),
    "ours": (training.FULL_PLAN, "full recipe: both distillations + masked-view consistency + EMA"),
}


def variant_names():
    return tuple(_VARIANTS)


def plan_for(variant):
    """LossPlan for a named variant; ValueError lists the known names."""
    try:
        return _VARIANTS[variant][0]
    except KeyError:
        raise ValueError(
            f"unknown variant {variant!r}; expected one of {list(_VARIANTS)}"
        ) from None


def describe_variant(variant):
    plan_for(variant)
    return _VARIANTS[variant][1]


def run_variant(variant, cfg):
    """Adapt with the variant's plan; returns (params, report with 'variant')."""
    params, report = training.adapt(cfg, plan=plan_for(variant))
    report["variant"] = variant
    report["variant_description"] = describe_variant(variant)
    return params, report


def _label_slug(label):
    return "".join(c if c.isalnum() else "-" for c in label)


def _derived_checkpoint(cfg, label):
    p = Path(cfg.out_checkpoint)
    return str(p.with_name(f"{p.stem}_{_label_slug(label)}{p.suffix}"))


def _score_rows(label, cfg, params):
    report = training.evaluate(params, cfg.manifest, cfg.backbone)
    rows = []
    for cat, val in report.per_category.items():
        rows.append(
            {
                "run": label,
                "seed": cfg.seed,
                "category": cat,
                "cd_x1e4": val,
                "n": report.n_samples[cat],
                "distance_convention": DISTANCE_CONVENTION,
            }
        )
    rows.append(
        {
            "run": label,
            "seed": cfg.seed,
            "category": "overall",
            "cd_x1e4": report.overall,
            "n": sum(report.n_samples.values()),
            "distance_convention": DISTANCE_CONVENTION,
        }
    )
    return rows


def run_ablation(variants, cfg):
    """Adapt and score each variant with a shared base config.

    Each run writes its checkpoint next to cfg.out_checkpoint with the
    variant name appended, so runs never clobber each other.

    Returns (rows, reports): flat score rows and the per-variant adapt
    reports keyed by variant name.
    """
    rows = []
    reports = {}
    for name in variants:
        run_cfg = replace(cfg, out_checkpoint=_derived_checkpoint(cfg, name))
        params, report = run_variant(name, run_cfg)
        reports[name] = report
        rows.extend(_score_rows(name, run_cfg, params))
    return rows, reports


_SWEEPABLE = ("k_masks", "fps_n", "mask_strategy", "ema_eta")


def run_sweep(cfg, field, values, plan=training.FULL_PLAN):
    """Adapt and score the full plan while varying one config field.

    Args:
        cfg: base AdaptConfig.
        field: one of k_masks, fps_n, mask_strategy, ema_eta.
        values: settings to try; each becomes a run labelled "field=value".
    """
    if field not in _SWEEPABLE:
        raise ValueError(f"field {field!r} is not sweepable; pick from {_SWEEPABLE}")
    rows = []
    reports = {}
    for v in values:
        label = f"{field}={v}"
        run_cfg = replace(
            cfg, **{field: v, "out_checkpoint": _derived_checkpoint(cfg, label)}
        )
        params, report = training.adapt(run_cfg, plan=plan)
        report["run"] = label
        reports[label] = report
        rows.extend(_score_rows(label, run_cfg, params))
    return rows, reports


def median_by_run(rows):
    """Median overall score per run label across seeds."""
    overall = {}
    for row in rows:
        if row["category"] == "overall":
            overall.setdefault(row["run"], []).append(row["cd_x1e4"])
    return {run: statistics.median(vals) for run, vals in overall.items()}


_COLUMNS = ("run", "seed", "category", "cd_x1e4", "n")


def format_table(rows):
    """Aligned text table of score rows, convention stated up front."""
    header = [f"# {DISTANCE_CONVENTION}"]
    cells = [list(_COLUMNS)]
    for row in rows:
        cells.append(
            [
                str(row["run"]),
                str(row["seed"]),
                str(row["category"]),
                f"{row['cd_x1e4']:.4f}",
                str(row["n"]),
            ]
        )
    widths = [max(len(r[i]) for r in cells) for i in range(len(_COLUMNS))]
    lines = []
    for r in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(header + lines) + "\n"


def write_rows(path, rows):
    """JSONL dump, one row object per line."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_rows(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]

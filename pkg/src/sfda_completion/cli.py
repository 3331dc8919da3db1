"""Command line front end for the whole experiment lifecycle.

Subcommands: gen-data, pretrain, adapt, eval, ablate, import-cloud. Configs
are JSON documents mirroring the config dataclasses; every field has a flag
override, and --seed works on every subcommand. Score output is a text
table on stdout plus a JSONL file with one record per category per run.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import ablation, masking, synthetic, training
from . import backbone as net
from .dataio import load_text_cloud, save_cloud


def _int_tuple(text):
    return tuple(int(x) for x in text.split(",") if x)


def _str_tuple(text):
    return tuple(x for x in text.split(",") if x)


_TRAIN_COMMON = (
    ("--manifest", str, "dataset manifest path"),
    ("--out-checkpoint", str, "where to write the selected checkpoint"),
    ("--steps", int, "optimizer steps"),
    ("--batch-size", int, "samples per step"),
    ("--lr", float, "Adam learning rate"),
    ("--val-every", int, "validation cadence in steps"),
)
_ADAPT_ONLY = (
    ("--source-checkpoint", str, "pretrained checkpoint to adapt"),
    ("--k-masks", int, "masked views per sample"),
    ("--mask-strategy", str, f"one of {masking.strategy_names()}"),
    ("--fps-n", int, "teacher fine downsample size for distillation"),
    ("--ema-eta", float, "teacher EMA retention in [0, 1]"),
    ("--val-samples", int, "target samples in the selection proxy"),
)
_BACKBONE = (
    ("--backbone-encoder-widths", _int_tuple, "comma list, e.g. 64,128,256"),
    ("--backbone-global-dim", int, "global feature width"),
    ("--backbone-coarse-points", int, "coarse output points"),
    ("--backbone-expansion", int, "fine points per coarse point"),
    ("--backbone-decoder-hidden", int, "decoder hidden width"),
    ("--backbone-refine-hidden", int, "refinement hidden width"),
    ("--backbone-offset-scale", float, "max refinement offset"),
    ("--backbone-grid-extent", float, "grid code half extent"),
    ("--backbone-seed", int, "parameter init seed"),
)
_WEIGHTS = (
    ("--weight-fine", float, "fine distillation weight"),
    ("--weight-coarse", float, "coarse distillation weight"),
    ("--weight-consistency", float, "masked-view consistency weight"),
    ("--weight-partial", float, "partial anchoring weight"),
)
_GEN = (
    ("--root", str, "output dataset directory"),
    ("--categories", _str_tuple, f"comma list from {synthetic.CATEGORIES}"),
    ("--n-train", int, "train samples per category"),
    ("--n-test", int, "test samples per category"),
    ("--n-val", int, "val samples per category"),
    ("--points", int, "points per cloud"),
    ("--gap-factor", float, "required gap / noise-floor ratio"),
)


def _domain_flags(side):
    occ = ", ".join(synthetic.OCCLUSIONS)
    return (
        (f"--{side}-noise-sigma", float, f"{side} jitter sigma"),
        (f"--{side}-density-bias", float, f"{side} sampling density bias"),
        (f"--{side}-occlusion", str, f"{side} scan occlusion: {occ}"),
        (f"--{side}-scale-anisotropy", float, f"{side} axis scale skew"),
        (f"--{side}-seed", int, f"{side} domain seed"),
    )


def _add_flags(parser, table):
    for flag, ty, help_text in table:
        parser.add_argument(flag, type=ty, default=None, help=help_text)


def _load_doc(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SystemExit(f"{path}: not valid JSON ({e})")


def _overlay(doc, args, flat_names, nested):
    """Copy non-None flag values into the config doc.

    nested maps an argparse dest prefix (e.g. "backbone_") to the doc key
    holding that sub-config's dict.
    """
    for dest, val in vars(args).items():
        if val is None:
            continue
        if dest in flat_names:
            doc[dest] = list(val) if isinstance(val, tuple) else val
            continue
        for prefix, key in nested.items():
            if dest.startswith(prefix):
                sub = doc.setdefault(key, {})
                sub[dest[len(prefix):]] = val
                break
    return doc


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _train_config(args, loader, cls):
    doc = _load_doc(args.config)
    nested = {"backbone_": "backbone"}
    if cls is training.AdaptConfig:
        nested["weight_"] = "weights"
    _overlay(doc, args, _field_names(cls), nested)
    return loader(doc)


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args):
    doc = _load_doc(args.request)
    defaults = dataclasses.asdict(synthetic.DatasetRequest(root=""))
    for side in ("source_domain", "target_domain"):
        merged = defaults[side]
        merged.update(doc.get(side, {}))
        doc[side] = merged
    flat = _field_names(synthetic.DatasetRequest) - {"source_domain", "target_domain"}
    _overlay(doc, args, flat, {"source_": "source_domain", "target_": "target_domain"})
    if not doc.get("root"):
        raise SystemExit("dataset root required (in the request file or via --root)")
    request = synthetic.request_from_dict(doc)
    gap_factor = args.gap_factor if args.gap_factor is not None else 10.0
    gap, floor = synthetic.measure_domain_gap(request)
    manifest = synthetic.generate_dataset(request, gap_factor=gap_factor)
    print(f"domain gap {gap:.3e} vs noise floor {floor:.3e} (x{gap / floor:.1f})")
    for split in sorted(manifest.splits):
        print(f"  {split}: {len(manifest.records(split))} samples")
    print(f"wrote {Path(request.root) / 'manifest.json'}")
    return 0


def _cmd_pretrain(args):
    cfg = _train_config(args, training.pretrain_config_from_dict, training.PretrainConfig)
    report = training.pretrain_source(cfg)
    print(
        f"pretrained {cfg.steps} steps in {report['wall_clock_s']:.1f}s; "
        f"best val {report['best_val']:.6f} at step {report['best_step']}"
    )
    print(f"wrote {cfg.out_checkpoint}")
    _write_json(f"{cfg.out_checkpoint}.report.json", report)
    return 0


def _cmd_adapt(args):
    cfg = _train_config(args, training.adapt_config_from_dict, training.AdaptConfig)
    _, report = training.adapt(cfg)
    audit = report["audit"]
    print(
        f"adapted {cfg.steps} steps in {report['wall_clock_s']:.1f}s; "
        f"selection proxy {report['val_proxy']:.6f} at step {report['best_step']}"
    )
    print(
        f"read audit: {audit['reads']} reads, {audit['distinct_files']} files, "
        f"target_train only: {audit['all_target_train']}"
    )
    print(f"wrote {cfg.out_checkpoint}")
    _write_json(f"{cfg.out_checkpoint}.report.json", report)
    return 0


def _backbone_config(args):
    merged = {}
    if args.config:
        merged = dict(_load_doc(args.config).get("backbone", {}))
    for dest, val in vars(args).items():
        if val is not None and dest.startswith("backbone_"):
            merged[dest[len("backbone_"):]] = val
    if "encoder_widths" in merged:
        merged["encoder_widths"] = tuple(merged["encoder_widths"])
    return net.BackboneConfig(**merged)


def _manifest_path(dataset):
    p = Path(dataset)
    return p / "manifest.json" if p.is_dir() else p


def _cmd_eval(args):
    bb = _backbone_config(args)
    manifest = _manifest_path(args.dataset)
    report = training.evaluate(args.checkpoint, manifest, bb, split=args.split)
    label = Path(args.checkpoint).stem
    rows = [
        {
            "run": label,
            "seed": "-",
            "category": cat,
            "cd_x1e4": val,
            "n": report.n_samples[cat],
            "distance_convention": report.distance_convention,
        }
        for cat, val in report.per_category.items()
    ]
    rows.append(
        {
            "run": label,
            "seed": "-",
            "category": "overall",
            "cd_x1e4": report.overall,
            "n": sum(report.n_samples.values()),
            "distance_convention": report.distance_convention,
        }
    )
    print(ablation.format_table(rows), end="")
    prefix = args.out or f"{args.checkpoint}.eval"
    ablation.write_rows(f"{prefix}.rows.jsonl", rows)
    print(f"wrote {prefix}.rows.jsonl")
    _write_json(f"{prefix}.json", report.as_dict())
    return 0


def _cmd_ablate(args):
    variants = [v for v in args.variant.split(",") if v]
    for v in variants:
        ablation.plan_for(v)
    cfg = _train_config(args, training.adapt_config_from_dict, training.AdaptConfig)
    rows, reports = ablation.run_ablation(variants, cfg)
    print(ablation.format_table(rows), end="")
    for run, med in sorted(ablation.median_by_run(rows).items()):
        print(f"median overall {run}: {med:.4f}")
    prefix = args.out or f"{cfg.out_checkpoint}.ablate"
    ablation.write_rows(f"{prefix}.rows.jsonl", rows)
    print(f"wrote {prefix}.rows.jsonl")
    _write_json(f"{prefix}.reports.json", reports)
    return 0


def _cmd_import_cloud(args):
    cloud = load_text_cloud(args.text)
    digest = save_cloud(args.out, cloud)
    print(f"wrote {args.out}: {cloud.shape[0]} points, sha256 {digest[:16]}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sfda-completion",
        description=(
            "Source-free domain adaptation for point cloud completion: "
            "synthetic benchmark, pretraining, adaptation, evaluation."
        ),
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="build a synthetic benchmark dataset")
    p.add_argument("request", help="JSON dataset request")
    p.add_argument("--seed", type=int, default=None, help="dataset seed")
    _add_flags(p, _GEN)
    _add_flags(p, _domain_flags("source"))
    _add_flags(p, _domain_flags("target"))
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="supervised pretraining on the source split")
    p.add_argument("config", help="JSON PretrainConfig")
    p.add_argument("--seed", type=int, default=None, help="run seed")
    _add_flags(p, _TRAIN_COMMON)
    _add_flags(p, _BACKBONE)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("adapt", help="source-free adaptation to target data")
    p.add_argument("config", help="JSON AdaptConfig")
    p.add_argument("--seed", type=int, default=None, help="run seed")
    _add_flags(p, _TRAIN_COMMON)
    _add_flags(p, _ADAPT_ONLY)
    _add_flags(p, _BACKBONE)
    _add_flags(p, _WEIGHTS)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("eval", help="mean Chamfer (x 1e4) per category")
    p.add_argument("checkpoint", help="checkpoint to evaluate")
    p.add_argument("dataset", help="dataset directory or manifest path")
    p.add_argument("--split", default="target_test", help="split with complete shapes")
    p.add_argument("--config", default=None, help="JSON config supplying the backbone")
    p.add_argument("--out", default=None, help="output prefix for rows/report")
    p.add_argument("--seed", type=int, default=None, help="unused; accepted for symmetry")
    _add_flags(p, _BACKBONE)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run ablation variants and score them")
    p.add_argument(
        "variant",
        help=f"comma list from {', '.join(ablation.variant_names())}",
    )
    p.add_argument("config", help="JSON AdaptConfig shared by all variants")
    p.add_argument("--seed", type=int, default=None, help="run seed")
    p.add_argument("--out", default=None, help="output prefix for rows/reports")
    _add_flags(p, _TRAIN_COMMON)
    _add_flags(p, _ADAPT_ONLY)
    _add_flags(p, _BACKBONE)
    _add_flags(p, _WEIGHTS)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("import-cloud", help="convert an ASCII x y z file to .pc")
    p.add_argument("text", help="input text file, one 'x y z' per line")
    p.add_argument("out", help="output .pc path")
    p.set_defaults(func=_cmd_import_cloud)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

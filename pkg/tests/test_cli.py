"""End-to-end CLI coverage: every subcommand plus flag overrides."""

import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sfda_completion import cli, dataio
from sfda_completion.errors import CongruenceError

MICRO_BB_DOC = {
    "encoder_widths": [12, 16],
    "global_dim": 16,
    "coarse_points": 8,
    "expansion": 8,
    "decoder_hidden": 16,
    "refine_hidden": 16,
    "seed": 0,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus pretrained checkpoint, both built through the CLI."""
    ws = tmp_path_factory.mktemp("cliws")
    request = {
        "root": str(ws / "data"),
        "categories": ["box-table", "tube-lamp"],
        "n_train": 5,
        "n_test": 3,
        "n_val": 2,
        "points": 160,
        "seed": 31,
    }
    req_path = ws / "request.json"
    req_path.write_text(json.dumps(request))
    assert cli.main(["gen-data", str(req_path)]) == 0

    pre_cfg = {
        "manifest": str(ws / "data" / "manifest.json"),
        "out_checkpoint": str(ws / "source.ckpt"),
        "steps": 12,
        "batch_size": 3,
        "val_every": 6,
        "backbone": MICRO_BB_DOC,
        "seed": 1,
    }
    pre_path = ws / "pretrain.json"
    pre_path.write_text(json.dumps(pre_cfg))
    assert cli.main(["pretrain", str(pre_path)]) == 0
    return ws


def adapt_doc(ws, **overrides):
    doc = {
        "manifest": str(ws / "data" / "manifest.json"),
        "source_checkpoint": str(ws / "source.ckpt"),
        "out_checkpoint": str(ws / "adapted.ckpt"),
        "steps": 3,
        "batch_size": 2,
        "k_masks": 1,
        "fps_n": 40,
        "val_every": 3,
        "val_samples": 2,
        "backbone": MICRO_BB_DOC,
        "seed": 7,
    }
    doc.update(overrides)
    return doc


def write_cfg(path, doc):
    Path(path).write_text(json.dumps(doc))
    return str(path)


def test_gen_data_outputs_and_flag_override(tmp_path, capsys):
    req = write_cfg(
        tmp_path / "req.json",
        {
            "root": str(tmp_path / "d"),
            "categories": ["box-table"],
            "n_train": 3,
            "n_test": 2,
            "n_val": 2,
            "points": 128,
            "seed": 5,
        },
    )
    assert cli.main(["gen-data", req, "--n-train", "2"]) == 0
    out = capsys.readouterr().out
    assert "domain gap" in out
    assert "target_train: 2 samples" in out
    manifest = dataio.load_manifest(tmp_path / "d" / "manifest.json")
    assert len(manifest.records("source_train")) == 2
    assert len(manifest.records("target_test")) == 2


def test_gen_data_domain_flag_reaches_manifest(tmp_path):
    req = write_cfg(
        tmp_path / "req.json",
        {
            "root": str(tmp_path / "d"),
            "categories": ["box-table"],
            "n_train": 1,
            "n_test": 1,
            "n_val": 1,
            "points": 128,
            "seed": 5,
        },
    )
    assert cli.main(["gen-data", req, "--target-noise-sigma", "0.02"]) == 0
    manifest = dataio.load_manifest(tmp_path / "d" / "manifest.json")
    assert manifest.domains["target"]["noise_sigma"] == 0.02
    # untouched target settings keep the benchmark defaults
    assert manifest.domains["target"]["occlusion"] == "spherical-dropout"


def test_gen_data_requires_root(tmp_path):
    req = write_cfg(tmp_path / "req.json", {"n_train": 2})
    with pytest.raises(SystemExit):
        cli.main(["gen-data", req])


def test_pretrain_writes_report(workspace):
    assert (workspace / "source.ckpt").exists()
    report = json.loads((workspace / "source.ckpt.report.json").read_text())
    assert report["kind"] == "pretrain"
    assert "squared Euclidean" in report["distance_convention"]


def test_adapt_cli(workspace, capsys):
    cfg = write_cfg(workspace / "adapt.json", adapt_doc(workspace))
    assert cli.main(["adapt", cfg]) == 0
    out = capsys.readouterr().out
    assert "target_train only: True" in out
    report = json.loads((workspace / "adapted.ckpt.report.json").read_text())
    assert report["kind"] == "adapt"
    assert report["audit"]["all_target_train"] is True


def test_adapt_flag_overrides_beat_config(workspace):
    cfg = write_cfg(workspace / "adapt2.json", adapt_doc(workspace))
    out_ckpt = str(workspace / "adapted2.ckpt")
    assert (
        cli.main(
            [
                "adapt",
                cfg,
                "--steps",
                "0",
                "--out-checkpoint",
                out_ckpt,
                "--weight-partial",
                "55.0",
                "--ema-eta",
                "0.9",
            ]
        )
        == 0
    )
    report = json.loads(Path(out_ckpt + ".report.json").read_text())
    assert report["steps"] == 0
    # zero steps: the adapted checkpoint is bitwise the source checkpoint
    src = dataio.load_checkpoint(workspace / "source.ckpt")
    adapted = dataio.load_checkpoint(out_ckpt)
    assert all(np.array_equal(src[k], adapted[k]) for k in src)


def test_seed_flag_changes_config_hash(workspace):
    cfg = write_cfg(workspace / "adapt3.json", adapt_doc(workspace))
    hashes = []
    for seed in ("3", "4"):
        out_ckpt = str(workspace / f"adapted_s{seed}.ckpt")
        cli.main(["adapt", cfg, "--steps", "0", "--seed", seed, "--out-checkpoint", out_ckpt])
        hashes.append(json.loads(Path(out_ckpt + ".report.json").read_text())["config_hash"])
    assert hashes[0] != hashes[1]


def test_eval_cli(workspace, capsys):
    cfg = write_cfg(workspace / "adapt4.json", adapt_doc(workspace))
    prefix = str(workspace / "srceval")
    code = cli.main(
        [
            "eval",
            str(workspace / "source.ckpt"),
            str(workspace / "data"),
            "--config",
            cfg,
            "--out",
            prefix,
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "# squared Euclidean" in out
    assert "overall" in out
    rows = [json.loads(l) for l in Path(prefix + ".rows.jsonl").read_text().splitlines()]
    cats = {r["category"] for r in rows}
    assert cats == {"box-table", "tube-lamp", "overall"}
    report = json.loads(Path(prefix + ".json").read_text())
    assert report["split"] == "target_test"


def test_eval_backbone_mismatch_raises(workspace):
    with pytest.raises(CongruenceError):
        cli.main(
            [
                "eval",
                str(workspace / "source.ckpt"),
                str(workspace / "data"),
                "--backbone-encoder-widths",
                "8,8",
            ]
        )


def test_eval_rejects_bad_json(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(SystemExit, match="not valid JSON"):
        cli.main(
            ["eval", str(workspace / "source.ckpt"), str(workspace / "data"), "--config", str(bad)]
        )


def test_adapt_unknown_config_key(workspace, tmp_path):
    cfg = write_cfg(tmp_path / "bad.json", {**adapt_doc(workspace), "stepz": 2})
    with pytest.raises(ValueError, match="unknown config keys"):
        cli.main(["adapt", cfg])


def test_ablate_cli(workspace, capsys):
    cfg = write_cfg(
        workspace / "ablate.json",
        adapt_doc(workspace, out_checkpoint=str(workspace / "abl.ckpt")),
    )
    assert cli.main(["ablate", "B,ours", cfg, "--steps", "2"]) == 0
    out = capsys.readouterr().out
    assert "median overall B:" in out
    assert "median overall ours:" in out
    rows_path = workspace / "abl.ckpt.ablate.rows.jsonl"
    rows = [json.loads(l) for l in rows_path.read_text().splitlines()]
    assert {r["run"] for r in rows} == {"B", "ours"}
    reports = json.loads((workspace / "abl.ckpt.ablate.reports.json").read_text())
    assert reports["B"]["variant"] == "B"


def test_ablate_unknown_variant(workspace):
    cfg = write_cfg(workspace / "ablate2.json", adapt_doc(workspace))
    with pytest.raises(ValueError, match="unknown variant"):
        cli.main(["ablate", "Q", cfg])


def test_import_cloud(tmp_path, capsys):
    text = tmp_path / "cloud.txt"
    text.write_text("# comment\n0.1 0.2 0.3\n-1 0 2.5\n")
    out = tmp_path / "cloud.pc"
    assert cli.main(["import-cloud", str(text), str(out)]) == 0
    assert "2 points" in capsys.readouterr().out
    cloud = dataio.load_cloud(out)
    expect = np.array([[0.1, 0.2, 0.3], [-1.0, 0.0, 2.5]]).astype("<f4").astype(np.float64)
    assert np.array_equal(cloud, expect)


def test_console_script_installed():
    assert shutil.which("sfda-completion") is not None
    proc = subprocess.run(
        [sys.executable, "-m", "sfda_completion.cli", "--help"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    for sub in ("gen-data", "pretrain", "adapt", "eval", "ablate"):
        assert sub in proc.stdout

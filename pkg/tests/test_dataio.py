"""File format tests: round trips, corruption detection, read audit."""

import numpy as np
import pytest

from sfda_completion import autodiff as ad
from sfda_completion import dataio
from sfda_completion.errors import CorruptFileError


def f32_cloud(rng, n=50):
    """Random cloud already on the f32 grid (the disk precision)."""
    return rng.uniform(-0.5, 0.5, (n, 3)).astype("<f4").astype(np.float64)


def test_cloud_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    cloud = f32_cloud(rng)
    p = tmp_path / "c.pc"
    sha = dataio.save_cloud(p, cloud)
    back = dataio.load_cloud(p, expect_sha=sha)
    assert np.array_equal(back, cloud)
    # saving the loaded cloud reproduces the same bytes
    p2 = tmp_path / "c2.pc"
    assert dataio.save_cloud(p2, back) == sha
    assert p2.read_bytes() == p.read_bytes()


def test_cloud_bad_magic_names_file(tmp_path):
    p = tmp_path / "bad.pc"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 20)
    with pytest.raises(CorruptFileError, match="bad.pc"):
        dataio.load_cloud(p)


def test_cloud_truncation_and_trailing(tmp_path):
    rng = np.random.default_rng(1)
    p = tmp_path / "c.pc"
    dataio.save_cloud(p, f32_cloud(rng))
    blob = p.read_bytes()
    p.write_bytes(blob[:-5])
    with pytest.raises(CorruptFileError, match="c.pc"):
        dataio.load_cloud(p)
    p.write_bytes(blob + b"xx")
    with pytest.raises(CorruptFileError):
        dataio.load_cloud(p)


def test_cloud_checksum_mismatch(tmp_path):
    rng = np.random.default_rng(2)
    p = tmp_path / "c.pc"
    sha = dataio.save_cloud(p, f32_cloud(rng))
    blob = bytearray(p.read_bytes())
    blob[-1] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(CorruptFileError, match="checksum"):
        dataio.load_cloud(p, expect_sha=sha)


def test_text_cloud_import(tmp_path):
    p = tmp_path / "c.xyz"
    p.write_text("# header\n0.1 0.2 0.3\n\n1 2 3\n")
    cloud = dataio.load_text_cloud(p)
    assert cloud.shape == (2, 3)
    assert cloud[1, 2] == 3.0
    p.write_text("0.1 0.2\n")
    with pytest.raises(CorruptFileError, match="expected 3"):
        dataio.load_text_cloud(p)
    p.write_text("a b c\n")
    with pytest.raises(CorruptFileError):
        dataio.load_text_cloud(p)


def test_checkpoint_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    params = ad.ParameterSet.from_arrays(
        {
            "enc0_w": rng.standard_normal((3, 8)),
            "enc0_b": rng.standard_normal(8),
            "scalarish": rng.standard_normal(1),
            "cube": rng.standard_normal((2, 3, 4)),
        }
    )
    p = tmp_path / "m.ckpt"
    dataio.save_checkpoint(p, params)
    back = dataio.load_checkpoint(p)
    assert list(back.keys()) == params.names()  # order preserved
    for name, t in params.items():
        assert np.array_equal(back[name], t.value)
        assert back[name].dtype == np.float64


def test_checkpoint_corruption_detection(tmp_path):
    rng = np.random.default_rng(4)
    p = tmp_path / "m.ckpt"
    dataio.save_checkpoint(p, {"w": rng.standard_normal((4, 4))})
    blob = p.read_bytes()

    p.write_bytes(b"WRONGMAG" + blob[8:])
    with pytest.raises(CorruptFileError, match="m.ckpt"):
        dataio.load_checkpoint(p)

    bad_version = bytearray(blob)
    bad_version[8] = 99
    p.write_bytes(bytes(bad_version))
    with pytest.raises(CorruptFileError, match="version"):
        dataio.load_checkpoint(p)

    p.write_bytes(blob[:-9])
    with pytest.raises(CorruptFileError, match="truncated"):
        dataio.load_checkpoint(p)

    p.write_bytes(blob + b"\x00")
    with pytest.raises(CorruptFileError, match="trailing"):
        dataio.load_checkpoint(p)


def test_manifest_round_trip(tmp_path):
    m = dataio.DatasetManifest(
        seed=5,
        categories=["box-table"],
        points=64,
        domains={"source": {"noise_sigma": 0.0}, "target": {"noise_sigma": 0.01}},
        splits={
            "target_train": [
                dataio.SampleRecord("box-table", 0, 123, "clouds/a.pc", None)
            ],
            "target_test": [
                dataio.SampleRecord("box-table", 0, 456, "clouds/b.pc", "clouds/b_gt.pc")
            ],
        },
        checksums={"clouds/a.pc": "00" * 32},
    )
    p = tmp_path / "manifest.json"
    dataio.save_manifest(p, m)
    back = dataio.load_manifest(p)
    assert back.seed == 5
    assert back.points == 64
    assert back.records("target_train")[0].seed == 123
    assert back.records("target_test")[0].complete == "clouds/b_gt.pc"
    assert back.checksums == m.checksums
    with pytest.raises(ValueError, match="unknown split"):
        back.records("nope")


def test_manifest_rejects_complete_in_target_train(tmp_path):
    m = dataio.DatasetManifest(
        seed=0,
        categories=["box-table"],
        points=8,
        domains={},
        splits={
            "target_train": [
                dataio.SampleRecord("box-table", 0, 1, "a.pc", "leak.pc")
            ]
        },
    )
    p = tmp_path / "manifest.json"
    dataio.save_manifest(p, m)
    with pytest.raises(CorruptFileError, match="complete"):
        dataio.load_manifest(p)


def test_manifest_bad_json(tmp_path):
    p = tmp_path / "manifest.json"
    p.write_text("{not json")
    with pytest.raises(CorruptFileError, match="manifest.json"):
        dataio.load_manifest(p)


def test_read_audit_records_cloud_reads(tmp_path):
    rng = np.random.default_rng(6)
    pa = tmp_path / "a.pc"
    pb = tmp_path / "b.pc"
    dataio.save_cloud(pa, f32_cloud(rng))
    dataio.save_cloud(pb, f32_cloud(rng))
    dataio.load_cloud(pa)  # outside any audit
    with dataio.read_audit() as reads:
        dataio.load_cloud(pb)
        dataio.load_cloud(pb)
    assert reads == [str(pb), str(pb)]
    with dataio.read_audit() as outer:
        with dataio.read_audit() as inner:
            dataio.load_cloud(pa)
        dataio.load_cloud(pb)
    assert outer == [str(pa), str(pb)]
    assert inner == [str(pa)]

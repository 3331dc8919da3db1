"""Binary formats, manifests, and the dataset read audit.

Formats:

* Cloud file: 7-byte magic ``PSFDPC1``, little-endian u32 point count, then
  count * 3 little-endian f32 coordinates. Disk precision is f32; memory is
  always f64. Dataset generation rounds its outputs through f32 before use,
  so save/load round-trips are bit-identical.
* Checkpoint: 8-byte magic ``PSFDCKPT``, u32 version, u32 entry count; each
  entry is u16 name length, utf-8 name, u8 rank, rank u32 dims, then the
  row-major f64 payload. Round-trips are bit-identical.
* Manifest: JSON describing categories, domain parameters, splits with
  per-sample seeds and file paths, and sha256 checksums for every data file.

Any structural problem (bad magic, truncation, checksum mismatch, version
skew) raises CorruptFileError naming the offending file.

The read audit records every cloud file loaded while a ``read_audit`` context
is active; the adaptation loop runs under one to prove it never touches
source-domain data.
"""

import hashlib
import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError
from .geometry import as_cloud

CLOUD_MAGIC = b"PSFDPC1"
CKPT_MAGIC = b"PSFDCKPT"
CKPT_VERSION = 1
MANIFEST_VERSION = 1

# ---------------------------------------------------------------------------
# read audit

_AUDITS = []


@contextmanager
def read_audit():
    """Collect the path of every cloud file read inside the context."""
    record = []
    _AUDITS.append(record)
    try:
        yield record
    finally:
        # remove by identity: two audits can hold equal path lists
        for i in range(len(_AUDITS) - 1, -1, -1):
            if _AUDITS[i] is record:
                del _AUDITS[i]
                break


def _note_read(path):
    for rec in _AUDITS:
        rec.append(str(path))


# ---------------------------------------------------------------------------
# point cloud files


def save_cloud(path, cloud):
    """Write a cloud as f32 binary. Returns the sha256 hex of the bytes."""
    cloud = as_cloud(cloud)
    payload = cloud.astype("<f4").tobytes()
    blob = CLOUD_MAGIC + struct.pack("<I", cloud.shape[0]) + payload
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_cloud(path, expect_sha=None):
    """Read a binary cloud file back as an (N, 3) float64 array.

    Args:
        path: file to read.
        expect_sha: optional sha256 hex; mismatch raises CorruptFileError.

    Raises:
        CorruptFileError: bad magic, truncated payload, trailing bytes,
            non-finite values, or checksum mismatch.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CorruptFileError(path, f"cannot read: {e}") from e
    if expect_sha is not None:
        got = hashlib.sha256(blob).hexdigest()
        if got != expect_sha:
            raise CorruptFileError(path, "checksum mismatch")
    if len(blob) < len(CLOUD_MAGIC) + 4:
        raise CorruptFileError(path, "file too short for header")
    if blob[: len(CLOUD_MAGIC)] != CLOUD_MAGIC:
        raise CorruptFileError(path, "bad magic, not a cloud file")
    (n,) = struct.unpack_from("<I", blob, len(CLOUD_MAGIC))
    expect_len = len(CLOUD_MAGIC) + 4 + n * 12
    if len(blob) != expect_len:
        raise CorruptFileError(
            path, f"payload length {len(blob)} != expected {expect_len}"
        )
    arr = np.frombuffer(blob, dtype="<f4", offset=len(CLOUD_MAGIC) + 4)
    cloud = arr.reshape(n, 3).astype(np.float64)
    if n == 0:
        raise CorruptFileError(path, "empty cloud")
    if not np.isfinite(cloud).all():
        raise CorruptFileError(path, "non-finite coordinates")
    _note_read(path)
    return cloud


def load_text_cloud(path):
    """Import an ASCII cloud: one ``x y z`` triple per line.

    Blank lines and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    rows = []
    try:
        text = path.read_text()
    except OSError as e:
        raise CorruptFileError(path, f"cannot read: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise CorruptFileError(path, f"line {lineno}: expected 3 values")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as e:
            raise CorruptFileError(path, f"line {lineno}: {e}") from e
    if not rows:
        raise CorruptFileError(path, "no points found")
    _note_read(path)
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params):
    """Write named parameter arrays as raw f64, preserving order."""
    arrays = params.to_arrays() if hasattr(params, "to_arrays") else dict(params)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Read a checkpoint back into name -> float64 array, stored order.

    Raises:
        CorruptFileError: on any structural problem, naming the file.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CorruptFileError(path, f"cannot read: {e}") from e
    off = 0
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptFileError(path, "bad magic, not a checkpoint")
    off += len(CKPT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", blob, off)
    except struct.error as e:
        raise CorruptFileError(path, "truncated header") from e
    off += 8
    if version != CKPT_VERSION:
        raise CorruptFileError(path, f"unsupported version {version}")
    arrays = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
        except (struct.error, UnicodeDecodeError) as e:
            raise CorruptFileError(path, "truncated or garbled entry") from e
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = size * 8
        if off + nbytes > len(blob):
            raise CorruptFileError(path, f"entry {name!r} payload truncated")
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
        arrays[name] = arr.reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise CorruptFileError(path, f"{len(blob) - off} trailing bytes")
    return arrays


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class SampleRecord:
    """One dataset sample: seeded partial input, optional complete shape."""

    category: str
    index: int
    seed: int
    partial: str
    complete: str | None = None


@dataclass
class DatasetManifest:
    """Dataset description: splits, per-sample seeds, file checksums."""

    seed: int
    categories: list
    points: int
    domains: dict
    splits: dict = field(default_factory=dict)  # split name -> [SampleRecord]
    checksums: dict = field(default_factory=dict)  # relpath -> sha256 hex
    format_version: int = MANIFEST_VERSION

    def records(self, split):
        if split not in self.splits:
            raise ValueError(
                f"unknown split {split!r}; have {sorted(self.splits)}"
            )
        return self.splits[split]

    def files_of_split(self, split):
        out = []
        for r in self.records(split):
            out.append(r.partial)
            if r.complete is not None:
                out.append(r.complete)
        return out


def save_manifest(path, manifest):
    doc = {
        "format_version": manifest.format_version,
        "seed": manifest.seed,
        "categories": list(manifest.categories),
        "points": manifest.points,
        "domains": manifest.domains,
        "splits": {
            name: [
                {
                    "category": r.category,
                    "index": r.index,
                    "seed": r.seed,
                    "partial": r.partial,
                    "complete": r.complete,
                }
                for r in recs
            ]
            for name, recs in manifest.splits.items()
        },
        "checksums": manifest.checksums,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path):
    """Parse and validate a manifest JSON file.

    Validation includes the target-train privacy rule: records in the
    ``target_train`` split must not reference complete shapes.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise CorruptFileError(path, f"cannot read: {e}") from e
    except json.JSONDecodeError as e:
        raise CorruptFileError(path, f"invalid JSON: {e}") from e
    try:
        version = doc["format_version"]
        if version != MANIFEST_VERSION:
            raise CorruptFileError(path, f"unsupported format_version {version}")
        splits = {}
        for name, recs in doc["splits"].items():
            splits[name] = [
                SampleRecord(
                    category=r["category"],
                    index=int(r["index"]),
                    seed=int(r["seed"]),
                    partial=r["partial"],
                    complete=r["complete"],
                )
                for r in recs
            ]
        manifest = DatasetManifest(
            seed=int(doc["seed"]),
            categories=list(doc["categories"]),
            points=int(doc["points"]),
            domains=doc["domains"],
            splits=splits,
            checksums=dict(doc["checksums"]),
            format_version=version,
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CorruptFileError):
            raise
        raise CorruptFileError(path, f"malformed manifest: {e}") from e
    for rec in manifest.splits.get("target_train", []):
        if rec.complete is not None:
            raise CorruptFileError(
                path, f"target_train record {rec.category}/{rec.index} references a complete shape"
            )
    return manifest


def load_record_cloud(manifest, root, record, kind):
    """Load one sample cloud named by a manifest record, with checksum check.

    Args:
        manifest: DatasetManifest holding the checksums.
        root: dataset directory (manifest paths are relative to it).
        record: SampleRecord.
        kind: "partial" or "complete".
    """
    rel = getattr(record, kind)
    if rel is None:
        raise ValueError(
            f"record {record.category}/{record.index} has no {kind} cloud"
        )
    return load_cloud(Path(root) / rel, expect_sha=manifest.checksums.get(rel))

"""Synthetic shapes, virtual scans, and domain corruption.

Three toy categories (box-table, panel-chair, tube-lamp) are sampled from
parametric primitive surfaces with per-seed randomized proportions, then
normalized into the unit cube. A virtual scan keeps one side of the shape
(halfspace cut or a spherical dropout on the far side) and resamples to a
fixed point count. A domain spec then corrupts the cloud: anisotropic
scaling, density-biased resampling, Gaussian jitter.

Dataset generation writes source and target splits with per-sample seeds and
checksums into a manifest. Target training records carry only partial
clouds; complete shapes appear only in evaluation records. A candidate
target domain is rejected unless the shift it induces is at least ten times
the pure-resampling noise floor.

All generated clouds are rounded through f32 (the disk precision) before
use, so saved and loaded data are bit-identical.
"""

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .errors import GenerationError
from .geometry import as_cloud, cd, downsample_random, normalize_to_unit_cube

CATEGORIES = ("box-table", "panel-chair", "tube-lamp")
POINTS_COMPLETE = 2048
OCCLUSIONS = ("halfspace", "spherical-dropout")

_MAX_RETRIES = 8


@dataclass(frozen=True)
class ShapeSpec:
    """A shape category plus the number of complete-surface samples."""

    category: str
    n_points: int = POINTS_COMPLETE

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(
                f"unknown category {self.category!r}; expected one of {CATEGORIES}"
            )
        if self.n_points < 4:
            raise ValueError("n_points must be at least 4")


@dataclass(frozen=True)
class DomainSpec:
    """Corruption parameters defining one acquisition domain."""

    noise_sigma: float = 0.0
    density_bias: float = 0.0
    occlusion: str = "halfspace"
    scale_anisotropy: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.density_bias <= 1.0:
            raise ValueError("density_bias must be in [0, 1]")
        if self.occlusion not in OCCLUSIONS:
            raise ValueError(
                f"unknown occlusion {self.occlusion!r}; expected one of {OCCLUSIONS}"
            )
        if self.scale_anisotropy < 0:
            raise ValueError("scale_anisotropy must be >= 0")

    @property
    def is_identity(self):
        return (
            self.noise_sigma == 0.0
            and self.density_bias == 0.0
            and self.scale_anisotropy == 0.0
        )


def scale_vector(domain):
    """Deterministic per-axis scale factors for a domain's anisotropy."""
    a = domain.scale_anisotropy
    return np.array([1.0 + a, 1.0, 1.0 / (1.0 + a)])


# ---------------------------------------------------------------------------
# primitive surface samplers (approximately area-uniform, good enough for a
# toy benchmark)


def _unit_vector(rng):
    for _ in range(_MAX_RETRIES):
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-9:
            return v / n
    raise GenerationError("could not draw a unit vector")


def _sample_box(rng, center, size, n):
    if n == 0:
        return np.empty((0, 3))
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    faces = rng.multinomial(n, areas / areas.sum())
    pts = []
    for face, count in enumerate(faces):
        if count == 0:
            continue
        uv = rng.uniform(-0.5, 0.5, size=(count, 2))
        p = np.empty((count, 3))
        axis = face // 2
        sign = 1.0 if face % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        p[:, axis] = sign * 0.5 * size[axis]
        p[:, others[0]] = uv[:, 0] * size[others[0]]
        p[:, others[1]] = uv[:, 1] * size[others[1]]
        pts.append(p)
    return np.concatenate(pts) + np.asarray(center)


def _box_area(size):
    sx, sy, sz = size
    return 2.0 * (sx * sy + sy * sz + sx * sz)


def _sample_tube(rng, center_bottom, height, r_bottom, r_top, n, caps=(False, False)):
    """Side surface of a (truncated) cone, optional disk caps."""
    if n == 0:
        return np.empty((0, 3))
    slant = math.sqrt((r_bottom - r_top) ** 2 + height**2)
    side_area = math.pi * (r_bottom + r_top) * slant
    areas = [side_area]
    if caps[0]:
        areas.append(math.pi * r_bottom**2)
    if caps[1]:
        areas.append(math.pi * r_top**2)
    counts = rng.multinomial(n, np.array(areas) / np.sum(areas))
    pts = []
    c_side = counts[0]
    if c_side:
        t = rng.uniform(0.0, 1.0, c_side)
        theta = rng.uniform(0.0, 2.0 * math.pi, c_side)
        r = r_bottom + (r_top - r_bottom) * t
        pts.append(
            np.stack([r * np.cos(theta), r * np.sin(theta), height * t], axis=1)
        )
    ci = 1
    for which, z, rad in ((0, 0.0, r_bottom), (1, height, r_top)):
        if not caps[which]:
            continue
        c = counts[ci]
        ci += 1
        if c == 0:
            continue
        rr = rad * np.sqrt(rng.uniform(0.0, 1.0, c))
        th = rng.uniform(0.0, 2.0 * math.pi, c)
        pts.append(np.stack([rr * np.cos(th), rr * np.sin(th), np.full(c, z)], axis=1))
    return np.concatenate(pts) + np.asarray(center_bottom)


def _tube_area(height, r_bottom, r_top, caps=(False, False)):
    slant = math.sqrt((r_bottom - r_top) ** 2 + height**2)
    a = math.pi * (r_bottom + r_top) * slant
    if caps[0]:
        a += math.pi * r_bottom**2
    if caps[1]:
        a += math.pi * r_top**2
    return a


def _legs(rng, half_w, half_d, leg_t, leg_h):
    boxes = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            cx = sx * (half_w - leg_t)
            cy = sy * (half_d - leg_t)
            boxes.append(((cx, cy, leg_h / 2.0), (leg_t, leg_t, leg_h)))
    return boxes


def _build_box_table(rng, n):
    w = rng.uniform(0.7, 1.0)
    d = rng.uniform(0.55, 0.85)
    top_t = rng.uniform(0.05, 0.1)
    leg_h = rng.uniform(0.45, 0.7)
    leg_t = rng.uniform(0.05, 0.09)
    boxes = [((0.0, 0.0, leg_h + top_t / 2.0), (w, d, top_t))]
    boxes += _legs(rng, w / 2.0, d / 2.0, leg_t, leg_h)
    areas = np.array([_box_area(s) for _, s in boxes])
    counts = rng.multinomial(n, areas / areas.sum())
    return np.concatenate(
        [_sample_box(rng, c, s, k) for (c, s), k in zip(boxes, counts)]
    )


def _build_panel_chair(rng, n):
    w = rng.uniform(0.45, 0.65)
    d = rng.uniform(0.45, 0.6)
    seat_t = rng.uniform(0.04, 0.08)
    seat_h = rng.uniform(0.4, 0.55)
    back_h = rng.uniform(0.45, 0.7)
    back_t = rng.uniform(0.04, 0.07)
    leg_t = rng.uniform(0.04, 0.07)
    boxes = [((0.0, 0.0, seat_h + seat_t / 2.0), (w, d, seat_t))]
    boxes.append(
        (
            (0.0, -d / 2.0 + back_t / 2.0, seat_h + seat_t + back_h / 2.0),
            (w, back_t, back_h),
        )
    )
    boxes += _legs(rng, w / 2.0, d / 2.0, leg_t, seat_h)
    areas = np.array([_box_area(s) for _, s in boxes])
    counts = rng.multinomial(n, areas / areas.sum())
    return np.concatenate(
        [_sample_box(rng, c, s, k) for (c, s), k in zip(boxes, counts)]
    )


def _build_tube_lamp(rng, n):
    rb = rng.uniform(0.18, 0.28)
    hb = rng.uniform(0.03, 0.06)
    rp = rng.uniform(0.02, 0.04)
    hp = rng.uniform(0.6, 0.9)
    rs_bot = rng.uniform(0.16, 0.24)
    rs_top = rs_bot * rng.uniform(0.45, 0.75)
    hs = rng.uniform(0.18, 0.3)
    parts = [
        ((0.0, 0.0, 0.0), hb, rb, rb, (True, True)),  # base puck
        ((0.0, 0.0, hb), hp, rp, rp, (False, False)),  # pole
        ((0.0, 0.0, hb + hp - 0.05), hs, rs_bot, rs_top, (False, False)),  # shade
    ]
    areas = np.array([_tube_area(h, r1, r2, caps) for _, h, r1, r2, caps in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    return np.concatenate(
        [
            _sample_tube(rng, c, h, r1, r2, k, caps)
            for (c, h, r1, r2, caps), k in zip(parts, counts)
        ]
    )


_BUILDERS = {
    "box-table": _build_box_table,
    "panel-chair": _build_panel_chair,
    "tube-lamp": _build_tube_lamp,
}


def make_complete_shape(spec, seed):
    """Sample a complete, normalized shape.

    Args:
        spec: ShapeSpec or a category name (default point count).
        seed: non-negative integer; same seed, same shape, bit for bit.

    Returns:
        (n_points, 3) float64 cloud inside [-0.5, 0.5]^3, rounded through
        f32 so it matches its on-disk representation exactly.

    Raises:
        GenerationError: if repeated draws stay degenerate.
    """
    if isinstance(spec, str):
        spec = ShapeSpec(category=spec)
    builder = _BUILDERS[spec.category]
    for attempt in range(_MAX_RETRIES):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        cloud = builder(rng, spec.n_points)
        try:
            cloud, _, _ = normalize_to_unit_cube(cloud)
        except ValueError:
            continue  # degenerate extent, redraw
        return cloud.astype("<f4").astype(np.float64)
    raise GenerationError(
        f"could not generate a non-degenerate {spec.category} after {_MAX_RETRIES} tries"
    )


# ---------------------------------------------------------------------------
# virtual scanning and domain corruption


def virtual_scan(cloud, seed, occlusion="halfspace"):
    """Keep the viewpoint-facing part of a cloud.

    halfspace: keep points whose projection on a seeded view direction
    (relative to the centroid) clears a seeded offset. spherical-dropout:
    remove a ball around the point farthest from the viewpoint. Empty
    survivor sets retry with a weaker cut.

    Returns the surviving subset (original point count is NOT restored here;
    see finalize_scan).
    """
    cloud = as_cloud(cloud)
    if occlusion not in OCCLUSIONS:
        raise ValueError(f"unknown occlusion {occlusion!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    v = _unit_vector(rng)
    centroid = cloud.mean(axis=0)
    proj = (cloud - centroid) @ v
    if occlusion == "halfspace":
        offset = rng.uniform(-0.15, 0.05)
        for _ in range(_MAX_RETRIES):
            keep = proj >= offset
            if keep.any():
                return cloud[keep]
            offset -= 0.1  # weaker cut, keeps more
        raise GenerationError("halfspace scan kept no points")
    # spherical-dropout: ball around the far-side extreme point
    anchor = cloud[int(np.argmin(proj))]
    radius = rng.uniform(0.15, 0.3)
    d = ((cloud - anchor) ** 2).sum(axis=1)
    for _ in range(_MAX_RETRIES):
        keep = d > radius * radius
        if keep.any():
            return cloud[keep]
        radius /= 2.0
    raise GenerationError("spherical dropout removed all points")


def finalize_scan(survivors, n_points, seed, jitter_eps=1.5e-3):
    """Resample scan survivors to exactly n_points.

    Downsamples without replacement when there are too many; upsamples by
    re-drawing survivors with replacement plus a small uniform jitter when
    there are too few.
    """
    survivors = as_cloud(survivors, "survivors")
    n = survivors.shape[0]
    if n >= n_points:
        return downsample_random(survivors, n_points, seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    extra = n_points - n
    idx = rng.integers(0, n, size=extra)
    jitter = rng.uniform(-jitter_eps, jitter_eps, size=(extra, 3))
    return np.concatenate([survivors, survivors[idx] + jitter])


def apply_domain(cloud, domain, sample_seed):
    """Corrupt a cloud according to a domain spec.

    Order: anisotropic scaling, density-biased resampling (with
    replacement, weighted along a seeded direction), Gaussian jitter. An
    identity spec returns the cloud exactly unchanged.
    """
    cloud = as_cloud(cloud)
    if domain.is_identity:
        return cloud.copy()
    rng = np.random.default_rng(
        np.random.SeedSequence([int(domain.seed), int(sample_seed), 31])
    )
    out = cloud * scale_vector(domain)
    if domain.density_bias > 0.0:
        u = _unit_vector(rng)
        logits = 3.0 * domain.density_bias * (out @ u)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        idx = rng.choice(out.shape[0], size=out.shape[0], replace=True, p=w)
        out = out[idx]
    if domain.noise_sigma > 0.0:
        out = out + rng.normal(0.0, domain.noise_sigma, size=out.shape)
    return out


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class DatasetRequest:
    """Everything needed to build one benchmark dataset."""

    root: str
    categories: tuple = CATEGORIES
    n_train: int = 200
    n_test: int = 50
    n_val: int = 24
    points: int = POINTS_COMPLETE
    seed: int = 0
    source_domain: DomainSpec = DomainSpec(occlusion="halfspace", seed=1)
    target_domain: DomainSpec = DomainSpec(
        noise_sigma=0.01,
        density_bias=0.4,
        occlusion="spherical-dropout",
        scale_anisotropy=0.3,
        seed=2,
    )

    def __post_init__(self):
        if not self.categories:
            raise ValueError("need at least one category")
        for c in self.categories:
            if c not in CATEGORIES:
                raise ValueError(f"unknown category {c!r}")
        if min(self.n_train, self.n_test, self.n_val) < 1:
            raise ValueError("split sizes must be positive")


def request_from_dict(doc):
    """DatasetRequest from a plain dict (e.g. parsed JSON)."""
    known = {f.name for f in dataclasses.fields(DatasetRequest)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown request keys: {sorted(unknown)}")
    kwargs = dict(doc)
    if "categories" in kwargs:
        kwargs["categories"] = tuple(kwargs["categories"])
    for side in ("source_domain", "target_domain"):
        if side in kwargs and not isinstance(kwargs[side], DomainSpec):
            kwargs[side] = DomainSpec(**kwargs[side])
    return DatasetRequest(**kwargs)


def _derive_seed(*parts):
    ss = np.random.SeedSequence(list(parts))
    return int(ss.generate_state(1, np.uint64)[0])


def measure_domain_gap(request, probes_per_category=2):
    """Mean shift a target domain causes, against the resampling noise floor.

    For each probe shape the same scan survivors are finalized three times
    with independent seeds: S and B under the identity domain, T pushed
    through the target domain. The gap is mean cd(S, T); the floor is mean
    cd(S, B), which isolates pure resampling randomness. Probes always use
    the full complete-shape resolution so the verdict reflects the domain,
    not the requested sample size.

    Returns:
        (gap, floor) tuple of floats.
    """
    gaps = []
    floors = []
    dom = request.target_domain
    n_probe = POINTS_COMPLETE
    for ci, cat in enumerate(request.categories):
        for p in range(probes_per_category):
            seed = _derive_seed(request.seed, 91, ci, p)
            complete = make_complete_shape(cat, seed)
            surv = virtual_scan(complete, _derive_seed(seed, 1), dom.occlusion)
            s = finalize_scan(surv, n_probe, _derive_seed(seed, 2))
            b = finalize_scan(surv, n_probe, _derive_seed(seed, 3))
            t = apply_domain(
                finalize_scan(surv, n_probe, _derive_seed(seed, 4)),
                dom,
                seed,
            )
            gaps.append(cd(s, t))
            floors.append(cd(s, b))
    return float(np.mean(gaps)), float(np.mean(floors))


def generate_dataset(request, gap_factor=10.0):
    """Build and write a full benchmark dataset; returns the manifest.

    Splits: source_train and source_val carry partial plus complete pairs
    from the source domain; target_train carries partial clouds only;
    target_test carries target partial plus the clean (scaled) complete
    shape for evaluation.

    Raises:
        ValueError: if the target domain's measured gap is below
            gap_factor times the resampling noise floor.
    """
    gap, floor = measure_domain_gap(request)
    if gap < gap_factor * floor:
        raise ValueError(
            f"target domain rejected: gap {gap:.3e} < {gap_factor} * floor {floor:.3e}"
        )
    root = Path(request.root)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    manifest = dataio.DatasetManifest(
        seed=request.seed,
        categories=list(request.categories),
        points=request.points,
        domains={
            "source": vars(request.source_domain).copy(),
            "target": vars(request.target_domain).copy(),
        },
    )
    plan = (
        ("source_train", request.n_train, request.source_domain, "source"),
        ("source_val", request.n_val, request.source_domain, "source"),
        ("target_train", request.n_train, request.target_domain, None),
        ("target_test", request.n_test, request.target_domain, "target"),
    )
    seen_seeds = set()
    for si, (split, count, domain, complete_kind) in enumerate(plan):
        records = []
        for ci, cat in enumerate(request.categories):
            for i in range(count):
                seed = _derive_seed(request.seed, si, ci, i)
                if seed in seen_seeds:  # astronomically unlikely
                    seed = _derive_seed(request.seed, si, ci, i, 1)
                seen_seeds.add(seed)
                complete = make_complete_shape(
                    ShapeSpec(cat, request.points), seed
                )
                surv = virtual_scan(
                    complete, _derive_seed(seed, 1), domain.occlusion
                )
                partial = finalize_scan(
                    surv, request.points, _derive_seed(seed, 2)
                )
                partial = apply_domain(partial, domain, seed)
                partial = partial.astype("<f4").astype(np.float64)
                stem = f"clouds/{split}_{cat}_{i:04d}"
                rec = dataio.SampleRecord(
                    category=cat, index=i, seed=seed, partial=f"{stem}_partial.pc"
                )
                manifest.checksums[rec.partial] = dataio.save_cloud(
                    root / rec.partial, partial
                )
                if complete_kind is not None:
                    gt = complete
                    if complete_kind == "target":
                        gt = complete * scale_vector(domain)
                    gt = gt.astype("<f4").astype(np.float64)
                    rec.complete = f"{stem}_complete.pc"
                    manifest.checksums[rec.complete] = dataio.save_cloud(
                        root / rec.complete, gt
                    )
                records.append(rec)
        manifest.splits[split] = records
    dataio.save_manifest(root / "manifest.json", manifest)
    return manifest

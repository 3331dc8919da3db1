"""Coarse-to-fine completion backbone on the autodiff tape.

Architecture: a shared per-point MLP encoder max-pooled into a global
feature, a dense decoder that predicts a coarse cloud of M points, and a
folding-style refinement head that expands every coarse point into E fine
points by feeding (global feature, coarse point, 2-d grid code) through a
second MLP. Refinement offsets are tanh-bounded and scaled, so the fine
cloud stays near the coarse scaffold.

The encoder is permutation invariant: all per-point layers are row
independent and the pooling is an elementwise max over points.
"""

from dataclasses import dataclass
from math import ceil, sqrt

import numpy as np

from . import autodiff as ad
from .geometry import as_cloud


@dataclass(frozen=True)
class BackboneConfig:
    """Sizes and initialization seed for one backbone instance."""

    encoder_widths: tuple = (64, 128, 256)
    global_dim: int = 256
    coarse_points: int = 128
    expansion: int = 16
    decoder_hidden: int = 256
    refine_hidden: int = 128
    offset_scale: float = 0.1
    grid_extent: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.encoder_widths:
            raise ValueError("encoder_widths must be non-empty")
        dims = (
            *self.encoder_widths,
            self.global_dim,
            self.coarse_points,
            self.expansion,
            self.decoder_hidden,
            self.refine_hidden,
        )
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all backbone dimensions must be positive: {self}")
        if self.offset_scale <= 0:
            raise ValueError("offset_scale must be positive")

    @property
    def fine_points(self):
        return self.coarse_points * self.expansion


def grid_codes(expansion, extent):
    """Fixed 2-d folding codes: the first E nodes of a square grid."""
    side = ceil(sqrt(expansion))
    lin = np.linspace(-extent, extent, side)
    gx, gy = np.meshgrid(lin, lin, indexing="ij")
    codes = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    return codes[:expansion]


def _layer_sizes(cfg):
    """Ordered (name, shape, fan_in) for every parameter."""
    sizes = []
    prev = 3
    for i, w in enumerate(cfg.encoder_widths):
        sizes.append((f"enc{i}_w", (prev, w), prev))
        sizes.append((f"enc{i}_b", (w,), prev))
        prev = w
    if cfg.global_dim != prev:
        sizes.append(("glob_w", (prev, cfg.global_dim), prev))
        sizes.append(("glob_b", (cfg.global_dim,), prev))
    g = cfg.global_dim
    sizes.append(("dec0_w", (g, cfg.decoder_hidden), g))
    sizes.append(("dec0_b", (cfg.decoder_hidden,), g))
    sizes.append(("dec1_w", (cfg.decoder_hidden, cfg.coarse_points * 3), cfg.decoder_hidden))
    sizes.append(("dec1_b", (cfg.coarse_points * 3,), cfg.decoder_hidden))
    rin = g + 3 + 2
    sizes.append(("ref0_w", (rin, cfg.refine_hidden), rin))
    sizes.append(("ref0_b", (cfg.refine_hidden,), rin))
    sizes.append(("ref1_w", (cfg.refine_hidden, 3), cfg.refine_hidden))
    sizes.append(("ref1_b", (3,), cfg.refine_hidden))
    return sizes


def init_params(cfg):
    """Seeded fan-in-scaled uniform weights, zero biases.

    Two calls with the same config give bit-identical parameters; any two
    configs with equal sizes give congruent parameter sets regardless of
    seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed)]))
    arrays = {}
    for name, shape, fan_in in _layer_sizes(cfg):
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            lim = 1.0 / sqrt(fan_in)
            arrays[name] = rng.uniform(-lim, lim, size=shape)
    return ad.ParameterSet.from_arrays(arrays)


@dataclass
class BackboneOutput:
    """Forward pass results, all graph tensors."""

    coarse: ad.Tensor  # (M, 3)
    fine: ad.Tensor  # (M * E, 3)
    feature: ad.Tensor  # (global_dim,)


def forward(params, cloud, cfg):
    """Run the backbone on one cloud, building the autodiff graph.

    Args:
        params: ParameterSet from init_params (or a congruent one).
        cloud: (N, 3) input points.
        cfg: BackboneConfig matching the parameters.

    Returns:
        BackboneOutput with coarse, fine and global feature tensors.
    """
    cloud = as_cloud(cloud)
    h = ad.constant(cloud)
    n_enc = len(cfg.encoder_widths)
    for i in range(n_enc):
        h = ad.add(ad.matmul(h, params[f"enc{i}_w"]), params[f"enc{i}_b"])
        if i < n_enc - 1:  # final pre-pool layer stays linear
            h = ad.relu(h)
    pooled = ad.max_over_points(h)
    feat_row = ad.reshape(pooled, (1, cfg.encoder_widths[-1]))
    if "glob_w" in params:
        feat_row = ad.add(ad.matmul(feat_row, params["glob_w"]), params["glob_b"])

    dec = ad.relu(ad.add(ad.matmul(feat_row, params["dec0_w"]), params["dec0_b"]))
    coarse = ad.reshape(
        ad.add(ad.matmul(dec, params["dec1_w"]), params["dec1_b"]),
        (cfg.coarse_points, 3),
    )

    m, e = cfg.coarse_points, cfg.expansion
    rows = m * e
    feat_tile = ad.gather_rows(feat_row, np.zeros(rows, dtype=np.int64))
    coarse_rep = ad.gather_rows(coarse, np.repeat(np.arange(m, dtype=np.int64), e))
    codes = ad.constant(np.tile(grid_codes(e, cfg.grid_extent), (m, 1)))
    rh = ad.concat_cols([feat_tile, coarse_rep, codes])
    rh = ad.relu(ad.add(ad.matmul(rh, params["ref0_w"]), params["ref0_b"]))
    offsets = ad.scale(
        ad.tanh(ad.add(ad.matmul(rh, params["ref1_w"]), params["ref1_b"])),
        cfg.offset_scale,
    )
    fine = ad.add(coarse_rep, offsets)
    return BackboneOutput(
        coarse=coarse,
        fine=fine,
        feature=ad.reshape(feat_row, (cfg.global_dim,)),
    )

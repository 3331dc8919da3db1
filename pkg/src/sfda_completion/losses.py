"""Adaptation losses: distillation, consistency, partial reconstruction.

All losses are per-sample graph builders: they take backbone outputs for the
original input (index 0) plus K masked views (indices 1..K), and plain
ndarrays for anything coming from the teacher, which keeps the teacher
detached by construction (its parameters never enter the graph, so their
gradients are exactly zero).

Squared Euclidean distances throughout, matching the geometry kernels.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights for the total adaptation objective."""

    fine: float = 1.0
    coarse: float = 1.0
    consistency: float = 100.0
    partial: float = 100.0

    def __post_init__(self):
        for name in ("fine", "coarse", "consistency", "partial"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


# canonical term order shared by the float and the graph-side accumulators,
# so the recorded breakdown total is bit-equal to the differentiated node.
# the feature term replaces the coarse term (variant wiring) and therefore
# reuses its weight slot.
_TERM_ORDER = ("fine", "coarse", "feature", "consistency", "partial")


def _weight_for(weights, term):
    return weights.coarse if term == "feature" else getattr(weights, term)


@dataclass
class LossBreakdown:
    """Per-component values plus their weighted total for one step."""

    fine: float = 0.0
    coarse: float = 0.0
    consistency: float = 0.0
    partial: float = 0.0
    feature: float | None = None
    total: float = 0.0

    def weighted_sum(self, weights):
        acc = None
        for term in _TERM_ORDER:
            v = getattr(self, term)
            if v is None:
                continue
            contrib = v * _weight_for(weights, term)
            acc = contrib if acc is None else acc + contrib
        return 0.0 if acc is None else acc

    def check(self, weights, tol=1e-10):
        """Verify the stored total against the weighted component sum."""
        expect = self.weighted_sum(weights)
        if abs(self.total - expect) > tol * max(1.0, abs(expect)):
            raise ValueError(
                f"breakdown total {self.total} != weighted sum {expect}"
            )

    def as_dict(self):
        d = {
            "fine": self.fine,
            "coarse": self.coarse,
            "consistency": self.consistency,
            "partial": self.partial,
            "total": self.total,
        }
        if self.feature is not None:
            d["feature"] = self.feature
        return d


def total_loss(fine, coarse, consistency, partial, weights, feature=None):
    """Combine already-computed component values into a checked breakdown.

    Pure float arithmetic; the association order matches the graph-side
    accumulator in ``weighted_total_tensor``.
    """
    br = LossBreakdown(
        fine=float(fine),
        coarse=float(coarse),
        consistency=float(consistency),
        partial=float(partial),
        feature=None if feature is None else float(feature),
    )
    br.total = br.weighted_sum(weights)
    br.check(weights)
    return br


def weighted_total_tensor(terms, weights):
    """Graph-side weighted sum over a dict of optional scalar tensors.

    ``terms`` maps component name to a 0-d Tensor or None; accumulation
    follows the same fixed order as the float path so both agree bitwise.
    """
    acc = None
    for term in _TERM_ORDER:
        t = terms.get(term)
        if t is None:
            continue
        contrib = ad.scale(t, _weight_for(weights, term))
        acc = contrib if acc is None else ad.add(acc, contrib)
    if acc is None:
        raise ValueError("no loss terms enabled")
    return acc


def cd_tensor(a, b):
    """Symmetric Chamfer between two tensor clouds (gradient to both)."""
    return ad.add(
        ad.mean_all(ad.min_sq_dists(a, b)),
        ad.mean_all(ad.min_sq_dists(b, a)),
    )


def ucd_tensor(x_const, y):
    """One-directional Chamfer: constant query cloud into a tensor cloud."""
    return ad.mean_all(ad.min_sq_dists(x_const, y))


def l_fine(student_outs, teacher_fine, fps_n=256, fps_start=0):
    """Fine distillation: teacher's downsampled fine cloud covered by students.

    The teacher fine cloud (ndarray) is reduced by farthest point sampling
    and used as the query side of a one-directional Chamfer term against
    every student prediction.
    """
    teacher_fine = geometry.as_cloud(teacher_fine, "teacher_fine")
    n = min(int(fps_n), teacher_fine.shape[0])
    sel = geometry.fps(teacher_fine, n, start=fps_start)
    target = ad.constant(teacher_fine[sel])
    acc = None
    for out in student_outs:
        term = ucd_tensor(target, out.fine)
        acc = term if acc is None else ad.add(acc, term)
    return acc


def l_coarse(student_outs, teacher_coarse):
    """Coarse distillation: symmetric Chamfer to the teacher's coarse cloud."""
    target = ad.constant(geometry.as_cloud(teacher_coarse, "teacher_coarse"))
    acc = None
    for out in student_outs:
        term = cd_tensor(target, out.coarse)
        acc = term if acc is None else ad.add(acc, term)
    return acc


def l_consistency(student_outs, stop_reference=False):
    """Prediction consistency across masked views.

    Symmetric Chamfer between the unmasked prediction (index 0) and each
    masked-view prediction. By default gradient flows through both sides;
    ``stop_reference`` detaches the unmasked side (ablation toggle).

    Returns None when there are no masked views.
    """
    if len(student_outs) <= 1:
        return None
    ref = student_outs[0].fine
    if stop_reference:
        ref = ad.constant(ref.value)
    acc = None
    for out in student_outs[1:]:
        term = cd_tensor(ref, out.fine)
        acc = term if acc is None else ad.add(acc, term)
    return acc


def l_partial(input_cloud, student_outs):
    """Partial reconstruction: the original input covered by every prediction.

    One-directional: each input point should have a nearby predicted point;
    the prediction is free to fill in the missing regions.
    """
    query = ad.constant(geometry.as_cloud(input_cloud, "input_cloud"))
    acc = None
    for out in student_outs:
        term = ucd_tensor(query, out.fine)
        acc = term if acc is None else ad.add(acc, term)
    return acc


def l_feature(student_outs, teacher_feature):
    """Feature distillation: one minus cosine similarity per student view.

    Used by the ablation variant that replaces coarse distillation with a
    global-feature term.

    Raises:
        ValueError: if any feature vector has zero norm.
    """
    tf = np.asarray(teacher_feature, dtype=np.float64)
    if tf.ndim != 1:
        raise ValueError(f"teacher_feature must be 1-d, got {tf.shape}")
    if float(tf @ tf) == 0.0:
        raise ValueError("teacher feature has zero norm")
    t = ad.constant(tf)
    t_norm = ad.sqrt_scalar(ad.dot(t, t))
    acc = None
    for out in student_outs:
        f = out.feature
        sq = ad.dot(f, f)
        if float(sq.value) == 0.0:
            raise ValueError("student feature has zero norm")
        cos = ad.div(ad.dot(f, t), ad.mul(ad.sqrt_scalar(sq), t_norm))
        term = ad.sub(ad.constant(1.0), cos)
        acc = term if acc is None else ad.add(acc, term)
    return acc

"""Training harness: source pretraining, source-free adaptation, evaluation.

The adaptation loop owns the method's moving parts: masked-view
construction, teacher forward passes (detached), the weighted loss, Adam
updates of the student, and the EMA correction of the teacher. A ``LossPlan``
toggles individual ingredients so ablation variants reuse the same loop.

Every run is bit-reproducible for a fixed config: batches, mask seeds and
validation subsets are all derived from the config seed by value, and the
whole adaptation runs under a dataset read audit that must contain
target-domain files only.

All Chamfer values use squared Euclidean distances; evaluation reports
mean Chamfer x 1e4, and every report header repeats that convention.
"""

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from hashlib import sha256
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio, geometry, losses, masking
from . import backbone as net
from .ema import ema_step

DISTANCE_CONVENTION = "squared Euclidean Chamfer, reported x 1e4"


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias-corrected moments, mirroring the standard recurrences."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """One update; returns a fresh ParameterSet, inputs untouched."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, tensor in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            else:
                v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            mhat = m / (1.0 - b1**self.t)
            vhat = v / (1.0 - b2**self.t)
            out[name] = tensor.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return ad.ParameterSet.from_arrays(out)


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class PretrainConfig:
    """Source-domain supervised pretraining settings."""

    manifest: str = "manifest.json"
    out_checkpoint: str = "source.ckpt"
    steps: int = 600
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    val_every: int = 50
    backbone: net.BackboneConfig = net.BackboneConfig()

    def __post_init__(self):
        _check_common(self)


@dataclass(frozen=True)
class AdaptConfig:
    """Source-free adaptation settings."""

    manifest: str = "manifest.json"
    source_checkpoint: str = "source.ckpt"
    out_checkpoint: str = "adapted.ckpt"
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    k_masks: int = 1
    mask_strategy: str = "partition"
    fps_n: int = 256
    ema_eta: float = 0.999
    weights: losses.LossWeights = losses.LossWeights()
    seed: int = 0
    val_every: int = 50
    val_samples: int = 8
    backbone: net.BackboneConfig = net.BackboneConfig()

    def __post_init__(self):
        _check_common(self)
        if self.k_masks < 0:
            raise ValueError("k_masks must be >= 0")
        if not 0.0 <= self.ema_eta <= 1.0:
            raise ValueError("ema_eta must be in [0, 1]")
        if self.fps_n < 1:
            raise ValueError("fps_n must be >= 1")
        if self.mask_strategy not in masking.strategy_names():
            raise ValueError(
                f"unknown mask_strategy {self.mask_strategy!r}; "
                f"expected one of {masking.strategy_names()}"
            )


def _check_common(cfg):
    if cfg.steps < 0:
        raise ValueError("steps must be >= 0")
    if cfg.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if cfg.lr <= 0:
        raise ValueError("lr must be positive")
    if cfg.val_every < 1:
        raise ValueError("val_every must be >= 1")


@dataclass(frozen=True)
class LossPlan:
    """Which method ingredients an adaptation run uses."""

    fine: bool = True
    coarse: bool = True
    feature: bool = False
    consistency: bool = True
    partial: bool = True
    use_masks: bool = True
    use_ema: bool = True

    def needs_teacher_forward(self):
        return self.fine or self.coarse or self.feature


FULL_PLAN = LossPlan()


def config_hash(cfg):
    """Stable hash of a config dataclass (nested dataclasses included)."""
    doc = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return sha256(doc.encode()).hexdigest()[:16]


def _dict_to_dataclass(cls, doc):
    kwargs = {}
    for f in fields(cls):
        if f.name not in doc:
            continue
        v = doc[f.name]
        if f.name == "backbone":
            v = dict(v)
            if "encoder_widths" in v:
                v["encoder_widths"] = tuple(v["encoder_widths"])
            v = net.BackboneConfig(**v)
        elif f.name == "weights":
            v = losses.LossWeights(**v)
        kwargs[f.name] = v
    unknown = set(doc) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cls(**kwargs)


def pretrain_config_from_dict(doc):
    return _dict_to_dataclass(PretrainConfig, doc)


def adapt_config_from_dict(doc):
    return _dict_to_dataclass(AdaptConfig, doc)


# ---------------------------------------------------------------------------
# shared pieces


def _derive_int(*parts):
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def _accumulate(acc, grads):
    if acc is None:
        return {n: g.copy() for n, g in grads.items()}
    for n, g in grads.items():
        acc[n] += g
    return acc


def _mean_grads(acc, count):
    return ad.GradientRecord({n: g / count for n, g in acc.items()})


def _check_finite(value, what, step):
    if not np.isfinite(value):
        raise RuntimeError(f"{what} became non-finite at step {step}; aborting")


def _checked_forward(params, cloud, cfg):
    # catches divergence at the source instead of a confusing geometry error
    out = net.forward(params, cloud, cfg)
    if not (
        np.isfinite(out.coarse.value).all() and np.isfinite(out.fine.value).all()
    ):
        raise RuntimeError("model prediction became non-finite; aborting")
    return out


def _manifest_and_root(path):
    p = Path(path)
    return dataio.load_manifest(p), p.parent


# ---------------------------------------------------------------------------
# source pretraining


def pretrain_source(cfg):
    """Supervised pretraining on the source split.

    Objective per sample: symmetric Chamfer of the fine prediction to the
    complete shape, plus symmetric Chamfer of the coarse prediction to a
    farthest-point downsample of the complete shape (one anchor point per
    coarse slot). Keeps the checkpoint that is best on source_val.

    Returns a report dict; writes the best checkpoint to cfg.out_checkpoint.
    """
    t0 = time.perf_counter()
    manifest, root = _manifest_and_root(cfg.manifest)
    train = manifest.records("source_train")
    val = manifest.records("source_val")
    params = net.init_params(cfg.backbone)
    opt = Adam(cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    m = cfg.backbone.coarse_points

    def sample_loss(p, rec):
        partial = dataio.load_record_cloud(manifest, root, rec, "partial")
        gt = dataio.load_record_cloud(manifest, root, rec, "complete")
        out = _checked_forward(p, partial, cfg.backbone)
        gt_t = ad.constant(gt)
        coarse_gt = ad.constant(gt[geometry.fps(gt, min(m, gt.shape[0]), start=0)])
        return ad.add(
            losses.cd_tensor(out.fine, gt_t), losses.cd_tensor(out.coarse, coarse_gt)
        )

    def val_loss(p):
        vals = [float(sample_loss(p, rec).value) for rec in val]
        return float(np.mean(vals))

    best_val = val_loss(params)
    best_params = params.copy()
    best_step = 0
    history = []
    for step in range(cfg.steps):
        batch = rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
        acc = None
        total = 0.0
        for ridx in batch:
            loss = sample_loss(params, train[int(ridx)])
            total += float(loss.value)
            acc = _accumulate(acc, ad.backward(loss, params))
        mean_loss = total / len(batch)
        _check_finite(mean_loss, "pretraining loss", step)
        history.append(mean_loss)
        params = opt.step(params, _mean_grads(acc, len(batch)))
        if (step + 1) % cfg.val_every == 0 or step == cfg.steps - 1:
            v = val_loss(params)
            _check_finite(v, "validation loss", step)
            if v < best_val:
                best_val = v
                best_params = params.copy()
                best_step = step + 1
    dataio.save_checkpoint(cfg.out_checkpoint, best_params)
    return {
        "kind": "pretrain",
        "distance_convention": DISTANCE_CONVENTION,
        "config_hash": config_hash(cfg),
        "steps": cfg.steps,
        "best_step": best_step,
        "best_val": best_val,
        "loss_history": history,
        "wall_clock_s": time.perf_counter() - t0,
        "checkpoint": str(cfg.out_checkpoint),
    }


# ---------------------------------------------------------------------------
# source-free adaptation


def _sample_terms(student, teacher, P, cfg, plan, mask_seed):
    """Build the loss terms for one target sample; returns (terms, breakdown)."""
    k_eff = cfg.k_masks if plan.use_masks else 0
    ms = masking.build_masked_set(P, k_eff, cfg.mask_strategy, mask_seed)
    student_outs = [
        _checked_forward(student, c, cfg.backbone) for c in ms.clouds
    ]
    terms = {}
    if plan.needs_teacher_forward():
        t_out = _checked_forward(teacher, ms.clouds[0], cfg.backbone)
        if plan.fine:
            terms["fine"] = losses.l_fine(
                student_outs, t_out.fine.value, fps_n=cfg.fps_n, fps_start=0
            )
        if plan.coarse:
            terms["coarse"] = losses.l_coarse(student_outs, t_out.coarse.value)
        if plan.feature:
            terms["feature"] = losses.l_feature(student_outs, t_out.feature.value)
    if plan.consistency:
        terms["consistency"] = losses.l_consistency(student_outs)
    if plan.partial:
        terms["partial"] = losses.l_partial(ms.clouds[0], student_outs)
    return terms


def _term_value(terms, name):
    t = terms.get(name)
    return 0.0 if t is None else float(t.value)


def _breakdown_of(terms, weights):
    feature = float(terms["feature"].value) if terms.get("feature") is not None else None
    return losses.total_loss(
        _term_value(terms, "fine"),
        _term_value(terms, "coarse"),
        _term_value(terms, "consistency"),
        _term_value(terms, "partial"),
        weights,
        feature=feature,
    )


def adapt(cfg, plan=FULL_PLAN):
    """Source-free adaptation of a pretrained checkpoint to target data.

    The student initializes from the source checkpoint; a teacher copy
    provides distillation targets and is corrected toward the student by EMA
    after every optimizer step. Model selection uses an unsupervised proxy
    (partial + consistency values on a fixed validation subset with frozen
    mask seeds); with zero steps the returned parameters equal the source.

    The entire run executes under a dataset read audit; reading anything
    outside the target_train split fails the run.

    Returns (params, report dict); writes the selected checkpoint.
    """
    t0 = time.perf_counter()
    manifest, root = _manifest_and_root(cfg.manifest)
    records = manifest.records("target_train")
    source_arrays = dataio.load_checkpoint(cfg.source_checkpoint)
    student = ad.ParameterSet.from_arrays(source_arrays)
    net.init_params(cfg.backbone).require_congruent(
        student, "backbone config vs source checkpoint"
    )
    teacher = ad.ParameterSet.from_arrays(source_arrays)
    opt = Adam(cfg.lr)
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 201]))
    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 401]))
    n_val = min(cfg.val_samples, len(records))
    val_idx = val_rng.choice(len(records), size=n_val, replace=False)

    def val_proxy(p):
        """Unsupervised selection signal: partial + consistency values."""
        vals = []
        for i in val_idx:
            rec = records[int(i)]
            P = dataio.load_record_cloud(manifest, root, rec, "partial")
            terms = _sample_terms(
                p, p, P, cfg, replace(plan, fine=False, coarse=False, feature=False),
                _derive_int(cfg.seed, 501, int(i)),
            )
            vals.append(
                _term_value(terms, "partial") + _term_value(terms, "consistency")
            )
        return float(np.mean(vals))

    history = []
    with dataio.read_audit() as reads:
        best_proxy = val_proxy(student)
        best_params = student.copy()
        best_step = 0
        for step in range(cfg.steps):
            batch = batch_rng.choice(
                len(records), size=min(cfg.batch_size, len(records)), replace=False
            )
            acc = None
            sums = {"fine": 0.0, "coarse": 0.0, "consistency": 0.0, "partial": 0.0}
            feat_sum = 0.0
            for ridx in batch:
                rec = records[int(ridx)]
                P = dataio.load_record_cloud(manifest, root, rec, "partial")
                terms = _sample_terms(
                    student, teacher, P, cfg, plan,
                    _derive_int(cfg.seed, 301, step, int(ridx)),
                )
                total_t = losses.weighted_total_tensor(terms, cfg.weights)
                acc = _accumulate(acc, ad.backward(total_t, student))
                br = _breakdown_of(terms, cfg.weights)
                br.check(cfg.weights)
                for name in sums:
                    sums[name] += getattr(br, name)
                if br.feature is not None:
                    feat_sum += br.feature
            nb = len(batch)
            step_break = losses.total_loss(
                sums["fine"] / nb,
                sums["coarse"] / nb,
                sums["consistency"] / nb,
                sums["partial"] / nb,
                cfg.weights,
                feature=(feat_sum / nb) if plan.feature else None,
            )
            _check_finite(step_break.total, "adaptation loss", step)
            history.append(step_break.as_dict())
            student = opt.step(student, _mean_grads(acc, nb))
            if plan.use_ema:
                teacher = ema_step(teacher, student, cfg.ema_eta)
            if (step + 1) % cfg.val_every == 0 or step == cfg.steps - 1:
                proxy = val_proxy(student)
                _check_finite(proxy, "validation proxy", step)
                if proxy < best_proxy:
                    best_proxy = proxy
                    best_params = student.copy()
                    best_step = step + 1
    allowed = {
        str(root / rel) for rel in manifest.files_of_split("target_train")
    }
    offenders = sorted(set(reads) - allowed)
    if offenders:
        raise RuntimeError(
            f"adaptation read files outside target_train: {offenders[:5]}"
        )
    dataio.save_checkpoint(cfg.out_checkpoint, best_params)
    report = {
        "kind": "adapt",
        "distance_convention": DISTANCE_CONVENTION,
        "config_hash": config_hash(cfg),
        "plan": asdict(plan),
        "steps": cfg.steps,
        "best_step": best_step,
        "val_proxy": best_proxy,
        "loss_history": history,
        "audit": {
            "reads": len(reads),
            "distinct_files": len(set(reads)),
            "all_target_train": not offenders,
        },
        "wall_clock_s": time.perf_counter() - t0,
        "checkpoint": str(cfg.out_checkpoint),
    }
    return best_params, report


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    """Evaluation results for one checkpoint on one split."""

    per_category: dict
    overall: float
    n_samples: dict
    split: str
    config_hash: str
    wall_clock_s: float
    distance_convention: str = DISTANCE_CONVENTION
    per_step_losses: list = field(default_factory=list)

    def as_dict(self):
        return {
            "distance_convention": self.distance_convention,
            "split": self.split,
            "per_category": self.per_category,
            "overall": self.overall,
            "n_samples": self.n_samples,
            "config_hash": self.config_hash,
            "wall_clock_s": self.wall_clock_s,
            "per_step_losses": self.per_step_losses,
        }


def evaluate(params, manifest_path, backbone_cfg, split="target_test"):
    """Mean Chamfer (x 1e4) of fine predictions per category.

    The overall score is the unweighted mean of the per-category means.

    Args:
        params: ParameterSet, or a checkpoint path to load.
        manifest_path: dataset manifest.
        backbone_cfg: BackboneConfig the parameters belong to.
        split: records must carry complete shapes.
    """
    t0 = time.perf_counter()
    if not isinstance(params, ad.ParameterSet):
        params = ad.ParameterSet.from_arrays(dataio.load_checkpoint(params))
    net.init_params(backbone_cfg).require_congruent(
        params, "backbone config vs checkpoint"
    )
    manifest, root = _manifest_and_root(manifest_path)
    sums = {}
    counts = {}
    for rec in manifest.records(split):
        partial = dataio.load_record_cloud(manifest, root, rec, "partial")
        gt = dataio.load_record_cloud(manifest, root, rec, "complete")
        out = net.forward(params, partial, backbone_cfg)
        score = geometry.cd(out.fine.value, gt) * 1e4
        sums[rec.category] = sums.get(rec.category, 0.0) + score
        counts[rec.category] = counts.get(rec.category, 0) + 1
    per_cat = {c: sums[c] / counts[c] for c in sorted(sums)}
    overall = float(np.mean(list(per_cat.values())))
    return MetricsReport(
        per_category=per_cat,
        overall=overall,
        n_samples=dict(sorted(counts.items())),
        split=split,
        config_hash=config_hash(backbone_cfg),
        wall_clock_s=time.perf_counter() - t0,
    )

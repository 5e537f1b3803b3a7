"""Desk-scale two-stage RGB-TSDF fusion network.

Stage 1 fuses TSDF features (TF1-3) with projected RGB features (RF1-3)
and predicts a preliminary result. Its argmax drives classwise completion
of RF1 into RRF1, which a separate RGB branch turns into RRF1-3; stage 2
fuses those with the TSDF features of stage 1 and predicts the refined
result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, ShapeError, StateError
from .fcm import CompletionContext, class_mismatch_rate, complete_array
from .grid import IGNORE, NUM_CLASSES, ProbVolume, Visibility
from .loss import classwise_entropy_loss, cross_entropy_loss
from .metrics import ConfusionTally, EvalRegion, band_mass, consistency_score, eval_regions, prob_histogram

log = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    width: int = 8
    feature_dim: int = 8
    num_classes: int = NUM_CLASSES
    two_stage: bool = True  # False: stage 1 only, no completion (ablation model A)
    reuse_tsdf: bool = True  # False: stage 2 gets its own TSDF branch (model B)
    activation: bool = True  # False: identity instead of relu (linearity checks)
    class_source: str = "pred"  # "pred" = stage-1 argmax, "gt" = ground truth


@dataclass
class Batch:
    tsdf: np.ndarray  # (B, 1, X, Y, Z)
    rf1: np.ndarray  # (B, F, X, Y, Z)
    gt: np.ndarray  # (B, X, Y, Z)
    counts: np.ndarray  # (B, X, Y, Z)
    visibility: np.ndarray  # (B, X, Y, Z)

    @classmethod
    def from_samples(cls, samples: Sequence) -> "Batch":
        return cls(
            tsdf=np.stack([s.tsdf.values[None] for s in samples]).astype(np.float64),
            rf1=np.stack([s.rf1.data for s in samples]).astype(np.float64),
            gt=np.stack([s.gt.labels for s in samples]),
            counts=np.stack([s.counts for s in samples]),
            visibility=np.stack([s.tsdf.visibility for s in samples]),
        )

    def __len__(self):
        return self.tsdf.shape[0]

    def contexts(self, class_maps: np.ndarray) -> List[CompletionContext]:
        return [CompletionContext.from_scene(class_maps[b], self.counts[b], self.visibility[b])
                for b in range(len(self))]


@dataclass
class ForwardTrace:
    tf: Optional[List[ad.Node]] = None
    rf: Optional[List[ad.Node]] = None
    rrf: Optional[List[ad.Node]] = None
    logits1: Optional[ad.Node] = None
    logits2: Optional[ad.Node] = None
    probs_stage1: Optional[np.ndarray] = None
    probs_stage2: Optional[np.ndarray] = None
    class_maps: Optional[np.ndarray] = None
    batch: Optional[Batch] = None

    @property
    def final_probs(self) -> np.ndarray:
        return self.probs_stage1 if self.probs_stage2 is None else self.probs_stage2


class FusionModel:
    def __init__(self, config: FusionConfig = None, seed: int = 0):
        self.config = config or FusionConfig()
        self.params: Dict[str, ad.Parameter] = {}
        self._rng = np.random.default_rng(seed)
        w, f = self.config.width, self.config.feature_dim

        self._tsdf_branch("tsdf")
        self._rgb_branch("rgb1", f)
        self._head("head1")
        if self.config.two_stage:
            self._rgb_branch("rgb2", f)
            self._head("head2")
            if not self.config.reuse_tsdf:
                self._tsdf_branch("tsdf2")
        del self._rng

    # -- parameter construction ---------------------------------------------

    def _conv(self, name: str, cin: int, cout: int):
        fan_in = cin * 27
        self.params[name + ".w"] = ad.init_uniform(self._rng, (cout, cin, 3, 3, 3), fan_in, name + ".w")
        self.params[name + ".b"] = ad.init_uniform(self._rng, (cout,), fan_in, name + ".b")

    def _linear(self, name: str, cin: int, cout: int):
        self.params[name + ".w"] = ad.init_uniform(self._rng, (cout, cin), cin, name + ".w")
        self.params[name + ".b"] = ad.init_uniform(self._rng, (cout,), cin, name + ".b")

    def _tsdf_branch(self, p: str):
        w = self.config.width
        self._conv(f"{p}.c1a", 1, w)
        self._conv(f"{p}.c1b", w, w)
        self._conv(f"{p}.c2a", w, w)
        self._conv(f"{p}.c2b", w, w)
        self._conv(f"{p}.c3a", w, w)
        self._conv(f"{p}.c3b", w, w)

    def _rgb_branch(self, p: str, f: int):
        w = self.config.width
        if f != w:
            self._linear(f"{p}.in", f, w)
        self._conv(f"{p}.c2a", w, w)
        self._conv(f"{p}.c2b", w, w)
        self._conv(f"{p}.c3a", w, w)
        self._conv(f"{p}.c3b", w, w)

    def _head(self, p: str):
        w = self.config.width
        self._conv(f"{p}.up2", w, w)
        self._conv(f"{p}.up1", w, w)
        self._conv(f"{p}.mix", w, w)
        self._linear(f"{p}.cls", w, self.config.num_classes)

    def parameters(self, prefix: str = "") -> List[ad.Parameter]:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    # -- building blocks ----------------------------------------------------

    def _act(self, x: ad.Node) -> ad.Node:
        return ad.relu(x) if self.config.activation else x

    def _conv_node(self, name: str, x: ad.Node, stride: int = 1) -> ad.Node:
        return ad.conv3d(x, self.params[name + ".w"], self.params[name + ".b"], stride)

    def _block(self, p: str, x: ad.Node, stride_first: int) -> ad.Node:
        x = self._act(self._conv_node(p + "a", x, stride_first))
        return self._act(self._conv_node(p + "b", x))

    def tsdf_features(self, x: ad.Node, p: str = "tsdf") -> List[ad.Node]:
        tf1 = self._block(f"{p}.c1", x, 1)
        tf2 = self._block(f"{p}.c2", tf1, 2)
        tf3 = self._block(f"{p}.c3", tf2, 2)
        return [tf1, tf2, tf3]

    def rgb_features(self, x: ad.Node, p: str) -> List[ad.Node]:
        if p + ".in.w" in self.params:
            x = ad.linear(x, self.params[p + ".in.w"], self.params[p + ".in.b"])
        rf2 = self._block(f"{p}.c2", x, 2)
        rf3 = self._block(f"{p}.c3", rf2, 2)
        return [x, rf2, rf3]

    def multiscale_fuse(self, f: Sequence[ad.Node], g: Sequence[ad.Node], p: str) -> ad.Node:
        """Add modalities per scale, then upsample-transform-add from coarse to fine."""
        for a, b in zip(f, g):
            if a.shape != b.shape:
                raise ShapeError(f"multiscale_fuse: scale mismatch {a.shape} vs {b.shape}")
        s1, s2, s3 = (ad.add(a, b) for a, b in zip(f, g))
        if s2.shape[2:] != tuple(d // 2 for d in s1.shape[2:]) or s3.shape[2:] != tuple(d // 2 for d in s2.shape[2:]):
            raise ShapeError(f"multiscale_fuse: scales must halve, got {s1.shape}, {s2.shape}, {s3.shape}")
        x = ad.add(self._act(self._conv_node(f"{p}.up2", ad.upsample_nearest(s3))), s2)
        x = ad.add(self._act(self._conv_node(f"{p}.up1", ad.upsample_nearest(x))), s1)
        return self.classifier(x, p)

    def classifier(self, x: ad.Node, p: str) -> ad.Node:
        h = self._act(self._conv_node(f"{p}.mix", x))
        return ad.linear(h, self.params[f"{p}.cls.w"], self.params[f"{p}.cls.b"])


def _check_grid(batch: Batch):
    if any(d % 4 for d in batch.tsdf.shape[2:]):
        raise ShapeError(f"grid dims {batch.tsdf.shape[2:]} must be divisible by 4")
    if batch.tsdf.shape[2:] != batch.rf1.shape[2:]:
        raise ShapeError(f"tsdf {batch.tsdf.shape[2:]} and rf1 {batch.rf1.shape[2:]} grids differ")


def forward_stage1(model: FusionModel, batch: Batch) -> ForwardTrace:
    _check_grid(batch)
    tf = model.tsdf_features(ad.constant(batch.tsdf))
    rf = model.rgb_features(ad.constant(batch.rf1), "rgb1")
    logits = model.multiscale_fuse(tf, rf, "head1")
    probs = ad.softmax_axis(ad.detach(logits), 1).value
    return ForwardTrace(tf=tf, rf=rf, logits1=logits, probs_stage1=probs, batch=batch)


def forward_stage2(model: FusionModel, trace: ForwardTrace, class_source: Optional[str] = None) -> ForwardTrace:
    if not model.config.two_stage:
        raise StateError("model has no refinement stage")
    if trace.tf is None or trace.probs_stage1 is None or trace.batch is None:
        raise StateError("stage-2 forward needs a stage-1 trace with TF1-3 and preliminary probabilities")
    batch = trace.batch
    source = class_source or model.config.class_source
    if source == "pred":
        class_maps = np.argmax(trace.probs_stage1, axis=1).astype(np.uint8)
    elif source == "gt":
        class_maps = batch.gt
    else:
        raise ValueError(f"unknown class source {source!r}")
    rrf1 = np.stack([complete_array(batch.rf1[b], ctx) for b, ctx in enumerate(batch.contexts(class_maps))])
    tf = trace.tf if model.config.reuse_tsdf else model.tsdf_features(ad.constant(batch.tsdf), "tsdf2")
    rrf = model.rgb_features(ad.constant(rrf1), "rgb2")
    logits = model.multiscale_fuse(tf, rrf, "head2")
    trace.rrf = rrf
    trace.class_maps = class_maps
    trace.logits2 = logits
    trace.probs_stage2 = ad.softmax_axis(ad.detach(logits), 1).value
    return trace


def forward(model: FusionModel, batch: Batch) -> ForwardTrace:
    trace = forward_stage1(model, batch)
    if model.config.two_stage:
        forward_stage2(model, trace)
    return trace


def _stage_loss(logits: ad.Node, gt: np.ndarray, lam: float):
    """Per-sample CE + lam * entropy, averaged over the batch."""
    B = logits.shape[0]
    grad = np.zeros_like(logits.value)
    terms = np.zeros(2)
    for b in range(B):
        pv = ProbVolume(logits.value[b])
        ce = cross_entropy_loss(pv, gt[b])
        ent = classwise_entropy_loss(pv, gt[b])
        terms += (ce.value, ent.value)
        grad[b] = (ce.grad_logits + lam * ent.grad_logits) / B
    terms /= B
    return terms, grad


def loss_node(trace: ForwardTrace, lambda1: float, lambda2: float, stage2_weight: float = 1.0):
    """Scalar graph node for the combined two-stage objective, plus its terms."""
    gt = trace.batch.gt
    (ce1, ent1), g1 = _stage_loss(trace.logits1, gt, lambda1)
    terms = {"ce1": ce1, "ent1": ent1, "ce2": 0.0, "ent2": 0.0}
    value = ce1 + lambda1 * ent1
    parents, grads = [trace.logits1], [g1]
    if trace.logits2 is not None and stage2_weight > 0:
        (ce2, ent2), g2 = _stage_loss(trace.logits2, gt, lambda2)
        terms.update(ce2=ce2, ent2=ent2)
        value += stage2_weight * (ce2 + lambda2 * ent2)
        parents.append(trace.logits2)
        grads.append(stage2_weight * g2)
    return ad.external(parents, value, grads, "combined_loss"), terms


def stage2_loss_value(model: FusionModel, batch: Batch, lambda2: float, class_source: Optional[str] = None) -> float:
    """Refined-stage loss alone, for detachment checks."""
    trace = forward_stage2(model, forward_stage1(model, batch), class_source)
    (ce2, ent2), _ = _stage_loss(trace.logits2, batch.gt, lambda2)
    return float(ce2 + lambda2 * ent2)


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalResult:
    tally_pre: ConfusionTally
    tally_ref: Optional[ConfusionTally]
    histograms: Dict[int, np.ndarray]
    consistency_pre: float
    consistency_ref: float
    occluded_consistency_pre: float
    occluded_consistency_ref: float
    class_mismatch: float = 0.0  # occluded voxels completed under a wrong class

    @property
    def miou_pre(self) -> float:
        return self.tally_pre.ssc()[1]

    @property
    def miou_ref(self) -> float:
        return self.tally_ref.ssc()[1] if self.tally_ref is not None else float("nan")

    @property
    def miou(self) -> float:
        """mIoU of the model's final output."""
        return self.miou_ref if self.tally_ref is not None else self.miou_pre

    @property
    def mid_mass(self) -> float:
        """Mean over classes of histogram mass in the (0.4, 0.6) probability band."""
        masses = [band_mass(h) for h in self.histograms.values() if h.sum() > 0]
        return float(np.mean(masses)) if masses else 0.0


def evaluate(model: FusionModel, samples: Sequence, bins: int = 100, batch_size: int = 4) -> EvalResult:
    tally_pre = ConfusionTally()
    tally_ref = ConfusionTally() if model.config.two_stage else None
    hists = {c: np.zeros(bins, dtype=np.int64) for c in range(1, NUM_CLASSES)}
    preds_pre, preds_ref, gts, occ, maps = [], [], [], [], []
    for start in range(0, len(samples), batch_size):
        batch = Batch.from_samples(samples[start:start + batch_size])
        trace = forward(model, batch)
        for b in range(len(batch)):
            region = eval_regions(batch.visibility[b], batch.gt[b])
            pre = np.argmax(trace.probs_stage1[b], axis=0)
            tally_pre.update(pre, batch.gt[b], region)
            preds_pre.append(pre)
            final = trace.probs_stage1[b]
            if tally_ref is not None:
                ref = np.argmax(trace.probs_stage2[b], axis=0)
                tally_ref.update(ref, batch.gt[b], region)
                preds_ref.append(ref)
                maps.append(trace.class_maps[b])
                final = trace.probs_stage2[b]
            gt_eval = np.where(region != EvalRegion.EXCLUDED, batch.gt[b], IGNORE)
            for c in hists:
                hists[c] += prob_histogram(final, gt_eval, c, bins)
            gts.append(gt_eval)
            occ.append(region == EvalRegion.OCCLUDED)
    gt_all = np.stack(gts)
    occ_all = np.stack(occ)
    pre_all = np.stack(preds_pre)
    ref_all = np.stack(preds_ref) if preds_ref else pre_all
    return EvalResult(
        tally_pre, tally_ref, hists,
        consistency_score(pre_all, gt_all)[1],
        consistency_score(ref_all, gt_all)[1],
        consistency_score(pre_all, gt_all, occ_all)[1],
        consistency_score(ref_all, gt_all, occ_all)[1],
        class_mismatch_rate(np.stack(maps), gt_all, occ_all) if maps else 0.0,
    )


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 2
    lambda1: float = 0.5
    lambda2: float = 0.5
    warmup_epochs: int = 0  # epochs optimising stage 1 only
    eval_every: int = 1
    bins: int = 100


@dataclass
class TrainingLog:
    rows: List[Dict[str, float]] = field(default_factory=list)
    final: Optional[EvalResult] = None

    COLUMNS = ("epoch", "lr", "loss", "ce1", "ent1", "ce2", "ent2",
               "miou_pre", "miou_ref", "consistency_pre", "consistency_ref", "mid_mass", "class_mismatch")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row.get(c, float("nan"))) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def train(model: FusionModel, samples: Sequence, cfg: TrainConfig = None, seed: int = 0,
          val: Optional[Sequence] = None) -> TrainingLog:
    """Joint SGD on the two-stage objective with a poly learning-rate schedule."""
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(seed)
    params = list(model.params.values())
    steps_per_epoch = -(-len(samples) // cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch
    it = 0
    out = TrainingLog()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        sums: Dict[str, float] = {"loss": 0.0, "ce1": 0.0, "ent1": 0.0, "ce2": 0.0, "ent2": 0.0}
        lr = cfg.base_lr
        for start in range(0, len(samples), cfg.batch_size):
            batch = Batch.from_samples([samples[i] for i in order[start:start + cfg.batch_size]])
            trace = forward_stage1(model, batch)
            warm = epoch < cfg.warmup_epochs
            if model.config.two_stage and not warm:
                forward_stage2(model, trace)
            root, terms = loss_node(trace, cfg.lambda1, cfg.lambda2)
            if not np.isfinite(root.value):
                raise DivergenceError("non-finite training loss", epoch)
            ad.backward(root)
            lr = ad.poly_lr(cfg.base_lr, it, max_iter)
            try:
                ad.sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
            except FloatingPointError as exc:
                raise DivergenceError(str(exc), epoch) from exc
            it += 1
            sums["loss"] += float(root.value)
            for k, v in terms.items():
                sums[k] += v
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / steps_per_epoch for k, v in sums.items()})
        last = epoch == cfg.epochs - 1
        if val and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            res = evaluate(model, val, cfg.bins)
            row.update(miou_pre=res.miou_pre, miou_ref=res.miou_ref, consistency_pre=res.consistency_pre,
                       consistency_ref=res.consistency_ref, mid_mass=res.mid_mass,
                       class_mismatch=res.class_mismatch)
            if last:
                out.final = res
        log.info("epoch %d loss %.4f", epoch, row["loss"])
        out.rows.append(row)
    return out

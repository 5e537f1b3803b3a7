"""Controlled comparisons: every variant trains on the same synthetic dataset."""

from __future__ import annotations

import logging
import time
import tracemalloc
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .config import AblationPlan, Config, Variant
from .errors import VoxsemError
from .fusion import EvalResult, FusionConfig, FusionModel, TrainConfig, train
from .scenes import SceneSample, make_dataset, train_val_split

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("variant", "fcm", "reuse", "lambda1", "lambda2", "miou_pre", "miou_ref",
                  "consistency_pre", "consistency_ref", "mid_mass", "status")
RESOURCE_COLUMNS = ("variant", "wall_seconds", "peak_memory_mb")

DATASET_SEED_STRIDE = 1000


@dataclass
class VariantOutcome:
    variant: Variant
    result: Optional[EvalResult]
    wall_seconds: float
    peak_memory_mb: float
    error: Optional[str] = None


def dataset_for(cfg: Config) -> Tuple[List[SceneSample], List[SceneSample]]:
    """Train/val split shared by every variant of a run with this config's seed."""
    samples = make_dataset(cfg.scene_spec(), cfg.n_scenes, cfg.seed * DATASET_SEED_STRIDE)
    return train_val_split(samples)


def model_config(cfg: Config, variant: Variant) -> FusionConfig:
    return FusionConfig(width=cfg.width, two_stage=variant.fcm, reuse_tsdf=variant.reuse)


def train_config(cfg: Config, variant: Variant, eval_every: int = 0) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, base_lr=cfg.base_lr, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                       lambda1=variant.lambda1, lambda2=variant.lambda2, eval_every=eval_every)


def run_variant(cfg: Config, variant: Variant, train_set: Sequence, val_set: Sequence) -> EvalResult:
    model = FusionModel(model_config(cfg, variant), cfg.seed)
    return train(model, train_set, train_config(cfg, variant), seed=cfg.seed, val=val_set).final


def run_ablation(plan: AblationPlan, cfg: Config, data=None) -> List[VariantOutcome]:
    """Train and evaluate each variant; a failing variant is recorded and skipped."""
    if not plan.variants:
        return []
    train_set, val_set = data if data is not None else dataset_for(cfg)
    outcomes = []
    for variant in plan.variants:
        log.info("variant %s", variant.name)
        tracemalloc.start()
        start = time.perf_counter()
        result, error = None, None
        try:
            result = run_variant(cfg, variant, train_set, val_set)
        except (VoxsemError, FloatingPointError, ValueError) as exc:
            error = f"{type(exc).__name__}: {exc}"
            log.warning("variant %s failed: %s", variant.name, error)
        wall = time.perf_counter() - start
        peak = tracemalloc.get_traced_memory()[1] / 2 ** 20
        tracemalloc.stop()
        outcomes.append(VariantOutcome(variant, result, wall, peak, error))
    return outcomes


def _num(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6f}"


def results_csv(outcomes: Sequence[VariantOutcome]) -> str:
    lines = [",".join(RESULT_COLUMNS)]
    for o in outcomes:
        v, r = o.variant, o.result
        row = [v.name, str(int(v.fcm)), str(int(v.reuse)), repr(v.lambda1), repr(v.lambda2)]
        if r is None:
            row += [""] * 5 + [_csv_safe(o.error or "error")]
        else:
            two = r.tally_ref is not None
            row += [_num(r.miou_pre), _num(r.miou_ref if two else None), _num(r.consistency_pre),
                    _num(r.consistency_ref if two else None), _num(r.mid_mass), "ok"]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def resources_csv(outcomes: Sequence[VariantOutcome]) -> str:
    lines = [",".join(RESOURCE_COLUMNS)]
    for o in outcomes:
        lines.append(f"{o.variant.name},{o.wall_seconds:.3f},{o.peak_memory_mb:.3f}")
    return "\n".join(lines) + "\n"


def _csv_safe(text: str) -> str:
    return text.replace(",", ";").replace("\n", " ")

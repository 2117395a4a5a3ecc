"""Training loop, threshold calibration, and evaluation.

Training follows a plain Adam schedule over seeded scene batches.  Each scene
in a batch draws one of the four prompt-modality masks so every conditioning
path (including the no-negative bypass) keeps receiving gradient.  After
training, the count threshold is picked by a grid search minimizing MAE on
the validation split, and evaluation reports MAE, RMSE, and NAE per mask.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import RngStream, Tensor
from .config import (
    ABLATION_MASKS,
    MASK_SAMPLING_WEIGHTS,
    TAU_GRID,
    CountexConfig,
    mask_label,
)
from .errors import ContractError
from .heads import LossBreakdown, count
from .model import CountModel
from .scenes import PromptSpec, SyntheticScene, build_prompt


class Adam:
    """Adam with bias correction; parameters update in sorted-name order."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.names = sorted(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(params[name].data) for name in self.names}
        self.v = {name: np.zeros_like(params[name].data) for name in self.names}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in self.names:
            p = self.params[name]
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)


@dataclass
class EvalReport:
    mae: float
    rmse: float
    nae: float
    modality_mask: str
    tau: float
    seed: int
    per_scene: list[tuple[str, int, int]] = field(default_factory=list)
    nae_skipped: int = 0


@dataclass
class TrainResult:
    model: CountModel
    tau: float
    curve: list[LossBreakdown]


def count_metrics(gts: np.ndarray, preds: np.ndarray) -> tuple[float, float, float, int]:
    """MAE, RMSE, and NAE over per-scene counts.

    NAE averages |error| / gt and therefore skips gt-zero scenes; the number
    skipped is returned so reports can flag it.
    """
    gts = np.asarray(gts, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if gts.shape != preds.shape or gts.ndim != 1 or gts.size == 0:
        raise ContractError(f"metrics need matching 1D arrays, got {gts.shape} and {preds.shape}")
    err = np.abs(preds - gts)
    mae = float(err.mean())
    rmse = float(np.sqrt(np.mean(err * err)))
    nonzero = gts > 0
    skipped = int(np.sum(~nonzero))
    nae = float(np.mean(err[nonzero] / gts[nonzero])) if nonzero.any() else float("nan")
    return mae, rmse, nae, skipped


def train(
    cfg: CountexConfig,
    train_scenes: list[SyntheticScene],
    val_scenes: list[SyntheticScene],
    seed: int,
) -> TrainResult:
    """Train a fresh model and calibrate its count threshold.

    Train and validation splits must not share scene ids.  With zero steps
    the parameters keep their initialization; the threshold is calibrated
    either way.
    """
    overlap = {s.scene_id for s in train_scenes} & {s.scene_id for s in val_scenes}
    if overlap:
        raise ContractError(f"train/val scene ids overlap: {sorted(overlap)[:3]}")
    if not train_scenes or not val_scenes:
        raise ContractError("train and validation splits must both be non-empty")

    model = CountModel.create(cfg, seed)
    adam = Adam(
        model.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )
    batch_gen = RngStream(seed, "train/batches").generator()
    mask_gen = RngStream(seed, "train/masks").generator()
    drop_gen = RngStream(seed, "train/dropout").generator()

    curve: list[LossBreakdown] = []
    for step in range(cfg.steps):
        # cosine decay to a 10% floor; late steps refine scores rather than
        # bounce around the loss basin
        frac = step / max(cfg.steps - 1, 1)
        adam.lr = cfg.learning_rate * (0.1 + 0.45 * (1.0 + math.cos(math.pi * frac)))
        idx = batch_gen.integers(len(train_scenes), size=cfg.batch_size)
        totals = []
        rows = []
        for i in idx:
            scene = train_scenes[int(i)]
            mask = ABLATION_MASKS[int(mask_gen.choice(len(ABLATION_MASKS), p=MASK_SAMPLING_WEIGHTS))]
            prompt = build_prompt(scene, mask, seed)
            total, breakdown = model.scene_loss(scene, prompt, training=True, gen=drop_gen, step=step)
            totals.append(total)
            rows.append(breakdown)
        batch_total = totals[0]
        for t in totals[1:]:
            batch_total = ag.add(batch_total, t)
        batch_total = ag.scale(batch_total, 1.0 / len(totals))
        model.zero_grads()
        ag.backward(batch_total)
        adam.step()
        curve.append(
            LossBreakdown(
                cls=float(np.mean([r.cls for r in rows])),
                loc=float(np.mean([r.loc for r in rows])),
                den=float(np.mean([r.den for r in rows])),
                share=float(np.mean([r.share for r in rows])),
                div=float(np.mean([r.div for r in rows])),
                total=float(np.mean([r.total for r in rows])),
            )
        )
    tau = calibrate_tau(model, val_scenes, list(ABLATION_MASKS), seed)
    return TrainResult(model=model, tau=tau, curve=curve)


def calibrate_tau(
    model: CountModel,
    val_scenes: list[SyntheticScene],
    masks: Sequence[frozenset[str]],
    seed: int,
) -> float:
    """Grid-search the score threshold minimizing validation MAE.

    The single returned threshold is shared by every downstream protocol, so
    the search averages the MAE over all prompt masks it will later serve.
    Scores are computed once per scene and mask; ties across the grid resolve
    to the lowest threshold.
    """
    scored = []
    for scene in val_scenes:
        for mask in masks:
            prompt = build_prompt(scene, mask, seed)
            preds = model.predict(scene, prompt, tau=0.5)
            scored.append((scene.positive_count, preds.scores))
    best_tau = TAU_GRID[0]
    best_mae = float("inf")
    for tau in TAU_GRID:
        mae = float(np.mean([abs(count(scores, tau) - gt) for gt, scores in scored]))
        if mae < best_mae:
            best_mae = mae
            best_tau = tau
    return best_tau


def evaluate(
    model: CountModel,
    scenes: list[SyntheticScene],
    tau: float,
    mask: frozenset[str],
    seed: int,
    negative_override_fn=None,
    mask_note: str = "",
    threads: int | None = None,
) -> EvalReport:
    """Count every scene under one modality mask and summarize the errors.

    `negative_override_fn(scene) -> variant id` substitutes the negative text
    prompt (absent-category protocols); prompts otherwise come from the scene
    itself.  Per-scene results are independent, so the optional thread pool
    changes wall time only.
    """
    if not scenes:
        raise ContractError("evaluate needs at least one scene")

    def run(scene: SyntheticScene) -> tuple[str, int, int]:
        override = negative_override_fn(scene) if negative_override_fn else None
        prompt = build_prompt(scene, mask, seed, negative_override=override)
        preds = model.predict(scene, prompt, tau)
        return scene.scene_id, scene.positive_count, preds.count

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, scenes))
    else:
        rows = [run(scene) for scene in scenes]
    gts = np.array([gt for _, gt, _ in rows], dtype=np.float64)
    preds = np.array([p for _, _, p in rows], dtype=np.float64)
    mae, rmse, nae, skipped = count_metrics(gts, preds)
    label = mask_label(mask) + (f":{mask_note}" if mask_note else "")
    return EvalReport(
        mae=mae, rmse=rmse, nae=nae, modality_mask=label, tau=tau, seed=seed,
        per_scene=rows, nae_skipped=skipped,
    )


def prediction_rows(
    model: CountModel,
    scenes: list[SyntheticScene],
    tau: float,
    mask: frozenset[str],
    seed: int,
) -> list[tuple[str, int, float, float, float]]:
    """Flat per-query dump: scene id, query index, center row/col, score."""
    out = []
    for scene in scenes:
        prompt = build_prompt(scene, mask, seed)
        preds = model.predict(scene, prompt, tau)
        for q in range(preds.scores.shape[0]):
            out.append(
                (
                    scene.scene_id,
                    q,
                    float(preds.centers[q, 0]),
                    float(preds.centers[q, 1]),
                    float(preds.scores[q]),
                )
            )
    return out

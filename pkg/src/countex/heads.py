"""Prediction heads, bipartite matching, and the training losses.

Each refined query decodes to a score, a center, and a box extent.  Ground
truth points are matched one-to-one to queries by a minimum-cost assignment
over L1 center distance plus (1 - score); matched queries are supervised as
positives by a focal term and pulled onto their points by an L1 term, while a
density head regresses the positive category's ground-truth density map.
Counting at inference is a strict threshold on the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import LinearParams, RngStream, Tensor
from .config import CountexConfig
from .encoder import anchor_grid
from .errors import NonFiniteLossError, ShapeError

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SCORE_CLAMP = 1e-7


@dataclass
class HeadParams:
    score: LinearParams  # d -> 1
    center: LinearParams  # d -> 2, offset in cells from the query anchor
    extent: LinearParams  # d -> 2
    density_out: LinearParams  # d -> 1
    grid_hw: tuple[int, int]
    anchors: np.ndarray  # n_queries x 2, same lattice the encoder seeds carry

    @staticmethod
    def create(rng: RngStream, cfg: CountexConfig) -> "HeadParams":
        d = cfg.embed_dim
        return HeadParams(
            score=LinearParams.create(rng.child("score"), d, 1),
            center=LinearParams.create(rng.child("center"), d, 2),
            extent=LinearParams.create(rng.child("extent"), d, 2),
            density_out=LinearParams.create(rng.child("density_out"), d, 1),
            grid_hw=(cfg.grid_h, cfg.grid_w),
            anchors=anchor_grid(cfg.n_queries, (cfg.grid_h, cfg.grid_w)),
        )

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.score.tensors("heads.score"))
        out.update(self.center.tensors("heads.center"))
        out.update(self.extent.tensors("heads.extent"))
        out.update(self.density_out.tensors("heads.density_out"))
        return out


@dataclass
class DecodedQueries:
    """Differentiable decode of one refined query set."""

    scores: Tensor  # n x 1 in (0, 1)
    centers: Tensor  # n x 2 in cell units
    extents: Tensor  # n x 2, nonnegative


@dataclass
class PredictionSet:
    """Plain-array view of a decode, ready for thresholding and reports."""

    centers: np.ndarray
    extents: np.ndarray
    scores: np.ndarray
    tau: float

    @property
    def count(self) -> int:
        return count(self.scores, self.tau)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (query index, ground truth index)
    n_queries: int
    n_points: int

    @property
    def matched_queries(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.intp)

    @property
    def matched_points(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.intp)


def decode(refined: Tensor, params: HeadParams) -> DecodedQueries:
    """Scores through a sigmoid, centers as anchor offsets, extents positive."""
    n = refined.shape[0]
    if n > params.anchors.shape[0]:
        raise ShapeError(
            f"{n} queries but only {params.anchors.shape[0]} anchors configured"
        )
    scores = ag.sigmoid(params.score.apply(refined))
    offsets = params.center.apply(refined)
    centers = ag.add(offsets, ag.const(params.anchors[:n], "anchors"))
    extents = ag.softplus(params.extent.apply(refined))
    return DecodedQueries(scores=scores, centers=centers, extents=extents)


def prediction_set(decoded: DecodedQueries, tau: float) -> PredictionSet:
    return PredictionSet(
        centers=decoded.centers.data.copy(),
        extents=decoded.extents.data.copy(),
        scores=decoded.scores.data[:, 0].copy(),
        tau=tau,
    )


def match(centers: np.ndarray, scores: np.ndarray, points: np.ndarray) -> MatchResult:
    """Minimum-cost one-to-one assignment between queries and ground truth.

    Pair cost is the L1 center distance plus (1 - score), so among equally
    distant queries the more confident one is taken.  The assignment is
    globally optimal and deterministic; exactly min(n, k) pairs come back.
    """
    n = centers.shape[0]
    k = points.shape[0]
    if k == 0 or n == 0:
        return MatchResult(pairs=[], n_queries=n, n_points=k)
    cost = (
        np.abs(centers[:, None, :] - points[None, :, :]).sum(axis=2)
        + (1.0 - scores)[:, None]
    )
    if k <= n:
        point4query = kernels.solve_assignment(np.ascontiguousarray(cost.T))
        pairs = [(int(q), int(g)) for g, q in enumerate(point4query)]
    else:
        query4point = kernels.solve_assignment(np.ascontiguousarray(cost))
        pairs = [(int(q), int(g)) for q, g in enumerate(query4point)]
    pairs.sort()
    return MatchResult(pairs=pairs, n_queries=n, n_points=k)


def match_bruteforce(
    centers: np.ndarray, scores: np.ndarray, points: np.ndarray
) -> tuple[float, list[tuple[int, int]]]:
    """Exhaustive optimal assignment, for small oracle checks only.

    Returns the optimal cost and the first optimal pairing in enumeration
    order; when the optimum is unique the pairing is the only valid answer.
    """
    import itertools

    n, k = centers.shape[0], points.shape[0]
    cost = (
        np.abs(centers[:, None, :] - points[None, :, :]).sum(axis=2)
        + (1.0 - scores)[:, None]
    )
    best = np.inf
    best_pairs: list[tuple[int, int]] = []
    if k <= n:
        for perm in itertools.permutations(range(n), k):
            value = sum(cost[q, g] for g, q in enumerate(perm))
            if value < best:
                best = value
                best_pairs = sorted((q, g) for g, q in enumerate(perm))
    else:
        for perm in itertools.permutations(range(k), n):
            value = sum(cost[q, g] for q, g in enumerate(perm))
            if value < best:
                best = value
                best_pairs = sorted((q, g) for q, g in enumerate(perm))
    return float(best), best_pairs


def focal_loss(
    scores: Tensor,
    positive_queries: np.ndarray,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> Tensor:
    """Focal binary loss summed over all queries.

    Matched queries are the positive class.  Scores are clamped away from the
    open interval's ends before the logs; the clamp only engages under
    saturation, where the gradient is dead anyway.
    """
    n = scores.shape[0]
    labels = np.zeros((n, 1))
    if positive_queries.size:
        labels[positive_queries, 0] = 1.0
    s = ag.clamp(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    one_minus = ag.sub(ag.const(np.ones((n, 1))), s)
    pos_part = ag.hadamard_const(ag.mul(ag.power(one_minus, gamma), ag.log(s)), -alpha * labels)
    neg_part = ag.hadamard_const(
        ag.mul(ag.power(s, gamma), ag.log(one_minus)), -(1.0 - alpha) * (1.0 - labels)
    )
    return ag.sum_all(ag.add(pos_part, neg_part))


def localization_loss(centers: Tensor, result: MatchResult, points: np.ndarray) -> Tensor:
    """Sum of L1 center distances over matched pairs; zero without matches."""
    if not result.pairs:
        return ag.const(np.zeros((1, 1)), "zero_loss")
    chosen = ag.gather_rows(centers, result.matched_queries)
    targets = ag.const(points[result.matched_points], "match_targets")
    return ag.sum_all(ag.absval(ag.sub(chosen, targets)))


def density_head(tokens: Tensor, params: HeadParams) -> Tensor:
    """Per-cell nonnegative density: squared linear response.

    The square keeps the map nonnegative while sending all-zero weights to an
    exactly zero map, which a saturating nonlinearity would not.
    """
    return ag.power(params.density_out.apply(tokens), 2.0)


def density_loss(predicted: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against the flattened ground-truth map.

    The mean makes the term, and with it the fixed loss weight, independent of
    the grid resolution.
    """
    flat = target.reshape(-1, 1)
    if predicted.shape != flat.shape:
        raise ShapeError(
            f"density map mismatch: predicted {predicted.shape}, target {flat.shape}"
        )
    return ag.mean_all(ag.power(ag.sub(predicted, ag.const(flat, "density_target")), 2.0))


@dataclass
class LossWeights:
    cls: float = 5.0
    loc: float = 1.0
    den: float = 200.0
    share: float = 2.0
    div: float = 0.01

    @staticmethod
    def from_config(cfg: CountexConfig) -> "LossWeights":
        return LossWeights(
            cls=cfg.weight_cls,
            loc=cfg.weight_loc,
            den=cfg.weight_den,
            share=cfg.weight_share,
            div=cfg.weight_div,
        )


@dataclass
class LossBreakdown:
    cls: float
    loc: float
    den: float
    share: float
    div: float
    total: float

    def as_row(self) -> dict[str, float]:
        return {
            "L_cls": self.cls,
            "L_loc": self.loc,
            "L_den": self.den,
            "L_share": self.share,
            "L_div": self.div,
            "total": self.total,
        }


def total_loss(
    cls: Tensor,
    loc: Tensor,
    den: Tensor,
    share: Tensor,
    div: Tensor,
    weights: LossWeights,
    step: int = -1,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the five terms; aborts naming any non-finite term."""
    parts = {"L_cls": cls, "L_loc": loc, "L_den": den, "L_share": share, "L_div": div}
    for name, part in parts.items():
        if not np.isfinite(part.data[0, 0]):
            raise NonFiniteLossError(name, step)
    total = ag.scale(cls, weights.cls)
    total = ag.add(total, ag.scale(loc, weights.loc))
    total = ag.add(total, ag.scale(den, weights.den))
    total = ag.add(total, ag.scale(share, weights.share))
    total = ag.add(total, ag.scale(div, weights.div))
    breakdown = LossBreakdown(
        cls=cls.item(),
        loc=loc.item(),
        den=den.item(),
        share=share.item(),
        div=div.item(),
        total=total.item(),
    )
    if not np.isfinite(breakdown.total):
        raise NonFiniteLossError("total", step)
    return total, breakdown


def count(scores: np.ndarray, tau: float) -> int:
    """Predicted count: scores strictly above the threshold."""
    return int(np.sum(scores > tau))

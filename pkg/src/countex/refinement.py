"""Discriminative refinement of the positive query set.

Three stages run between the encoder and the prediction heads:

1. A small bank of learned prototypes cross-attends over both query sets and
   is fused into shared-feature directions (trained to be shareable across
   the sets and mutually diverse).
2. Negative queries least similar to those shared directions are selected as
   negative-exclusive; projecting away the shared subspace leaves residual
   reference rows that carry what is unique to the negative category.
3. Positive queries attend onto the references and subtract the result
   through a zero-initialized gate, suppressing whatever they share with the
   negative-exclusive content.

Without a negative prompt stages 1-3 are bypassed and the positive queries
only pass through the final normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import AttentionParams, LayerNormParams, LinearParams, RngStream, Tensor
from .config import CountexConfig
from .errors import ContractError

RANK_DROP_TOL = 1e-8


@dataclass
class RefinementParams:
    prototypes: Tensor  # r x d, unit-norm rows at init
    proto_attention: AttentionParams
    proto_proj: LinearParams  # d -> d fusion after attention
    proto_norm: LayerNormParams
    refine_attention: AttentionParams
    refine_norm: LayerNormParams
    gate: Tensor  # 1 x 1, starts at zero
    n_exclusive: int
    dropout_rate: float
    literal_shared_projection: bool
    proto_attention_residual: bool

    @staticmethod
    def create(rng: RngStream, cfg: CountexConfig) -> "RefinementParams":
        d = cfg.embed_dim
        protos = rng.child("prototypes").generator().normal(size=(cfg.n_prototypes, d))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        return RefinementParams(
            prototypes=Tensor(protos),
            proto_attention=AttentionParams.create(rng.child("proto_attention"), d, cfg.heads),
            proto_proj=LinearParams.create(rng.child("proto_proj"), d, d),
            proto_norm=LayerNormParams.create(d),
            refine_attention=AttentionParams.create(rng.child("refine_attention"), d, cfg.heads),
            refine_norm=LayerNormParams.create(d),
            gate=Tensor(np.zeros((1, 1))),
            n_exclusive=cfg.exclusive_count,
            dropout_rate=cfg.dropout_rate,
            literal_shared_projection=cfg.literal_shared_projection,
            proto_attention_residual=cfg.proto_attention_residual,
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {"refine.prototypes": self.prototypes, "refine.gate": self.gate}
        out.update(self.proto_attention.tensors("refine.proto_attention"))
        out.update(self.proto_proj.tensors("refine.proto_proj"))
        out.update(self.proto_norm.tensors("refine.proto_norm"))
        out.update(self.refine_attention.tensors("refine.refine_attention"))
        out.update(self.refine_norm.tensors("refine.refine_norm"))
        return out


@dataclass
class PrototypeBank:
    """Fused shared-feature directions plus an orthonormal basis of their span."""

    fused: Tensor  # r x d
    basis: Tensor | None  # k x d orthonormal rows, None when fused is all-zero
    kept_rows: list[int]


@dataclass
class ExclusivitySelection:
    scores: np.ndarray  # per negative query: max cosine to any fused row
    indices: np.ndarray  # m selected rows, ascending
    m: int


@dataclass
class NegativeReferenceSet:
    rows: Tensor  # m x d residuals
    selection: ExclusivitySelection


@dataclass
class RefinementTrace:
    """What the forward pass produced, for logging and tests."""

    bank: PrototypeBank | None
    selection: ExclusivitySelection | None
    bypassed: bool


def orthonormal_rows(c: Tensor, drop_tol: float = RANK_DROP_TOL) -> tuple[Tensor | None, list[int]]:
    """Differentiable modified Gram-Schmidt over the rows of `c`.

    Rows whose residual norm falls below `drop_tol` are dropped, so the result
    always has full row rank.  Returns (basis, kept row indices); the basis is
    None when every row collapses.
    """
    rows: list[Tensor] = []
    kept: list[int] = []
    for j in range(c.shape[0]):
        v = ag.gather_rows(c, [j])
        for u in rows:
            coef = ag.matmul(v, ag.transpose(u))
            v = ag.sub(v, ag.mul(u, coef))
        norm_sq = ag.matmul(v, ag.transpose(v))
        if float(norm_sq.data[0, 0]) ** 0.5 < drop_tol:
            continue
        rows.append(ag.mul(v, ag.power(norm_sq, -0.5)))
        kept.append(j)
    if not rows:
        return None, []
    return ag.concat_rows(rows) if len(rows) > 1 else rows[0], kept


def identify_shared(
    pos_queries: Tensor,
    neg_queries: Tensor,
    params: RefinementParams,
) -> PrototypeBank:
    """Stage 1: attend the prototype bank over both query sets and fuse.

    The fused rows are projected and row-normalized; their orthonormalized
    span is kept alongside for the projection step.
    """
    both = ag.concat_rows([pos_queries, neg_queries])
    attended = ag.multi_head_attention(params.prototypes, both, both, params.proto_attention)
    if params.proto_attention_residual:
        attended = ag.add(params.prototypes, attended)
    fused = params.proto_norm.apply(params.proto_proj.apply(attended))
    basis, kept = orthonormal_rows(fused)
    return PrototypeBank(fused=fused, basis=basis, kept_rows=kept)


def shareability_loss(bank: PrototypeBank, pos_queries: Tensor, neg_queries: Tensor) -> Tensor:
    """Negative mean over fused rows of their best match in each query set.

    Minimizing drives every fused direction toward content present in both
    sets at once; the floor of -2 is reached when each row coincides with a
    query in each set.
    """
    r = bank.fused.shape[0]
    best_pos = ag.rowmax(ag.cosine_matrix(bank.fused, pos_queries))
    best_neg = ag.rowmax(ag.cosine_matrix(bank.fused, neg_queries))
    return ag.scale(ag.sum_all(ag.add(best_pos, best_neg)), -1.0 / r)


def diversity_loss(prototypes: Tensor) -> Tensor:
    """Squared Frobenius distance of the prototype Gram matrix from identity."""
    r = prototypes.shape[0]
    gram = ag.matmul(prototypes, ag.transpose(prototypes))
    return ag.sum_all(ag.power(ag.sub(gram, ag.const(np.eye(r))), 2.0))


def extract_exclusive(
    neg_queries: Tensor,
    bank: PrototypeBank,
    m: int,
) -> NegativeReferenceSet:
    """Stage 2: pick the m least-shared negative queries, remove the shared span.

    Exclusivity of a negative query is its best cosine match against the
    fused rows (not the basis); the m smallest scores win, ties resolved by
    ascending index.  Selected rows are projected onto the orthogonal
    complement of the shared span, leaving negative-exclusive residuals.
    """
    n = neg_queries.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"exclusive count m={m} must lie in [1, {n}]")
    sim = ag.rowmax(ag.cosine_matrix(neg_queries, bank.fused))
    scores = sim.data[:, 0].copy()
    chosen = np.sort(np.argsort(scores, kind="stable")[:m])
    selected = ag.gather_rows(neg_queries, chosen)
    if bank.basis is not None:
        span = ag.matmul(ag.matmul(selected, ag.transpose(bank.basis)), bank.basis)
        residual = ag.sub(selected, span)
    else:
        residual = selected
    selection = ExclusivitySelection(scores=scores, indices=chosen, m=m)
    return NegativeReferenceSet(rows=residual, selection=selection)


def extract_exclusive_literal(
    neg_queries: Tensor,
    bank: PrototypeBank,
    m: int,
) -> NegativeReferenceSet:
    """Variant subtracting q C^T C with the raw fused rows.

    Kept behind a config switch for comparison: without orthonormalization
    the subtraction is not a projection, so residuals keep a shared-span
    component whenever the fused rows are correlated.
    """
    n = neg_queries.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"exclusive count m={m} must lie in [1, {n}]")
    sim = ag.rowmax(ag.cosine_matrix(neg_queries, bank.fused))
    scores = sim.data[:, 0].copy()
    chosen = np.sort(np.argsort(scores, kind="stable")[:m])
    selected = ag.gather_rows(neg_queries, chosen)
    span = ag.matmul(ag.matmul(selected, ag.transpose(bank.fused)), bank.fused)
    residual = ag.sub(selected, span)
    selection = ExclusivitySelection(scores=scores, indices=chosen, m=m)
    return NegativeReferenceSet(rows=residual, selection=selection)


def refine_queries(
    pos_queries: Tensor,
    references: NegativeReferenceSet,
    params: RefinementParams,
    training: bool = False,
    gen: np.random.Generator | None = None,
    bias: np.ndarray | None = None,
) -> Tensor:
    """Stage 3: gated subtraction of reference-aligned content.

    The positive queries attend onto the reference rows; the attended rows,
    scaled by the learned gate, are subtracted before the final layer norm.
    A zero gate therefore leaves exactly the normalized positive queries.
    Dropout touches only the attended rows and only on training passes.  An
    optional fixed `bias` (n_pos x m) steers each positive query toward
    particular reference rows; the model passes anchor distances here so
    suppression acts where the negative-exclusive content actually sits.
    """
    attended = ag.multi_head_attention(
        pos_queries, references.rows, references.rows, params.refine_attention, bias=bias
    )
    if training and params.dropout_rate > 0.0:
        if gen is None:
            raise ContractError("training-mode refinement needs a random generator")
        attended = ag.dropout(attended, params.dropout_rate, gen)
    gated = ag.mul(attended, params.gate)
    return params.refine_norm.apply(ag.sub(pos_queries, gated))


@dataclass
class RefinementResult:
    refined: Tensor
    share_loss: Tensor
    div_loss: Tensor
    trace: RefinementTrace


def dqr_forward(
    pos_queries: Tensor,
    neg_queries: Tensor | None,
    params: RefinementParams,
    training: bool = False,
    gen: np.random.Generator | None = None,
    anchors: np.ndarray | None = None,
    anchor_tau: float | None = None,
) -> RefinementResult:
    """Run all three stages; bypass them when no negative prompt exists.

    On bypass the refined set is the normalized positive set and both
    auxiliary losses are constant zeros.  When `anchors` and `anchor_tau` are
    given, the stage-3 attention is biased by minus the city-block distance
    between each positive query's anchor and the anchors of the selected
    reference rows, in units of `anchor_tau`; both query sets share the seed
    lattice, so row i of the references inherits anchor `selection.indices[i]`.
    """
    if neg_queries is None:
        zero = ag.const(np.zeros((1, 1)), "zero_loss")
        return RefinementResult(
            refined=params.refine_norm.apply(pos_queries),
            share_loss=zero,
            div_loss=zero,
            trace=RefinementTrace(bank=None, selection=None, bypassed=True),
        )
    if pos_queries.shape != neg_queries.shape:
        raise ContractError(
            f"query sets must match, got {pos_queries.shape} and {neg_queries.shape}"
        )
    bank = identify_shared(pos_queries, neg_queries, params)
    share = shareability_loss(bank, pos_queries, neg_queries)
    div = diversity_loss(params.prototypes)
    extractor = (
        extract_exclusive_literal if params.literal_shared_projection else extract_exclusive
    )
    references = extractor(neg_queries, bank, params.n_exclusive)
    bias = None
    if anchors is not None and anchor_tau is not None:
        picked = anchors[references.selection.indices]
        dist = np.abs(anchors[:, None, :] - picked[None, :, :]).sum(axis=2)
        bias = -dist / anchor_tau
    refined = refine_queries(pos_queries, references, params, training, gen, bias=bias)
    return RefinementResult(
        refined=refined,
        share_loss=share,
        div_loss=div,
        trace=RefinementTrace(bank=bank, selection=references.selection, bypassed=False),
    )

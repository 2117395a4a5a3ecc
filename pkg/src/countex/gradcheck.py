"""Central finite-difference verification of every differentiable piece.

Each check builds a small random instance, runs one backward pass, and
compares every (or a sampled subset of) input coordinate against a central
difference.  The relative error is |a - n| / max(1, |a|, |n|), so tiny
gradients are judged on absolute error where difference noise dominates.

Losses that involve bipartite matching freeze the assignment computed at the
evaluation point: the assignment is locally constant almost everywhere and
receives no gradient, exactly as in training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import encoder as enc
from . import heads as hd
from . import refinement as rf
from .autograd import AttentionParams, LayerNormParams, LinearParams, Tensor

THRESHOLD = 1e-4
FD_STEP = 1e-5


@dataclass
class GradCheckRow:
    op: str
    max_rel_err: float
    worst_leaf: str
    worst_coord: tuple[int, int]
    analytic: float
    numeric: float
    passed: bool


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Fixed-weight scalarization so every output coordinate gets probed."""
    return ag.sum_all(ag.hadamard_const(out, weights))


Builder = Callable[[np.random.Generator], tuple[dict[str, Tensor], Callable[[], Tensor]]]


def _build_linear(gen):
    x = Tensor(gen.normal(size=(3, 4)))
    w = Tensor(gen.normal(size=(4, 5)))
    b = Tensor(gen.normal(size=(1, 5)))
    probe = gen.normal(size=(3, 5))
    return {"x": x, "w": w, "b": b}, lambda: _weighted_sum(ag.linear(x, w, b), probe)


def _build_layer_norm(gen):
    x = Tensor(gen.normal(size=(4, 6)))
    gain = Tensor(gen.normal(size=(1, 6)))
    shift = Tensor(gen.normal(size=(1, 6)))
    probe = gen.normal(size=(4, 6))
    return {"x": x, "gain": gain, "shift": shift}, lambda: _weighted_sum(
        ag.layer_norm(x, gain, shift), probe
    )


def _build_softmax(gen):
    x = Tensor(gen.normal(size=(4, 5)))
    probe = gen.normal(size=(4, 5))
    return {"x": x}, lambda: _weighted_sum(ag.softmax_rows(x), probe)


def _build_attention(gen):
    d = 8
    q = Tensor(gen.normal(size=(3, d)))
    k = Tensor(gen.normal(size=(5, d)))
    v = Tensor(gen.normal(size=(5, d)))
    params = AttentionParams(
        wq=Tensor(gen.normal(size=(d, d)) / np.sqrt(d)),
        wk=Tensor(gen.normal(size=(d, d)) / np.sqrt(d)),
        wv=Tensor(gen.normal(size=(d, d)) / np.sqrt(d)),
        wo=Tensor(gen.normal(size=(d, d)) / np.sqrt(d)),
        heads=2,
    )
    probe = gen.normal(size=(3, d))
    leaves = {"q": q, "k": k, "v": v, "wq": params.wq, "wk": params.wk, "wv": params.wv, "wo": params.wo}
    return leaves, lambda: _weighted_sum(ag.multi_head_attention(q, k, v, params), probe)


def _build_biased_attention(gen):
    d = 8
    q = Tensor(gen.normal(size=(3, d)))
    k = Tensor(gen.normal(size=(5, d)))
    v = Tensor(gen.normal(size=(5, d)))
    params = AttentionParams(
        wq=Tensor(gen.normal(size=(d, d)) / np.sqrt(d)),
        wk=Tensor(gen.normal(size=(d, d)) / np.sqrt(d)),
        wv=Tensor(gen.normal(size=(d, d)) / np.sqrt(d)),
        wo=Tensor(gen.normal(size=(d, d)) / np.sqrt(d)),
        heads=2,
    )
    bias = gen.normal(size=(3, 5))
    probe = gen.normal(size=(3, d))
    leaves = {"q": q, "k": k, "v": v, "wq": params.wq, "wk": params.wk, "wv": params.wv, "wo": params.wo}
    return leaves, lambda: _weighted_sum(
        ag.multi_head_attention(q, k, v, params, bias=bias), probe
    )


def _build_film_conditioning(gen):
    d = 8
    keys = Tensor(gen.normal(size=(5, d)))
    cond = Tensor(gen.normal(size=(3, d)))
    film = LinearParams(
        weight=Tensor(gen.normal(size=(d, d)) / np.sqrt(d)),
        bias=Tensor(gen.normal(size=(1, d)) * 0.1),
    )
    probe = gen.normal(size=(5, d))
    leaves = {"keys": keys, "cond": cond, "film_w": film.weight, "film_b": film.bias}
    return leaves, lambda: _weighted_sum(enc.condition_keys(keys, cond, film), probe)


def _build_cosine(gen):
    a = Tensor(gen.normal(size=(3, 5)))
    b = Tensor(gen.normal(size=(4, 5)))
    probe = gen.normal(size=(3, 4))
    return {"a": a, "b": b}, lambda: _weighted_sum(ag.cosine_matrix(a, b), probe)


def _build_rowmax(gen):
    x = Tensor(gen.normal(size=(5, 7)))
    probe = gen.normal(size=(5, 1))
    return {"x": x}, lambda: _weighted_sum(ag.rowmax(x), probe)


def _build_embedding(gen):
    table = Tensor(gen.normal(size=(9, 6)))
    idx = [1, 4, 4, 7]
    probe = gen.normal(size=(4, 6))
    return {"table": table}, lambda: _weighted_sum(ag.gather_rows(table, idx), probe)


def _build_orthonormal(gen):
    c = Tensor(gen.normal(size=(4, 6)))
    probe = gen.normal(size=(4, 6))

    def forward() -> Tensor:
        basis, _ = rf.orthonormal_rows(c)
        return _weighted_sum(basis, probe)

    return {"c": c}, forward


def _build_projection(gen):
    q = Tensor(gen.normal(size=(5, 6)))
    c = Tensor(gen.normal(size=(3, 6)))
    probe = gen.normal(size=(5, 6))

    def forward() -> Tensor:
        basis, _ = rf.orthonormal_rows(c)
        span = ag.matmul(ag.matmul(q, ag.transpose(basis)), basis)
        return _weighted_sum(ag.sub(q, span), probe)

    return {"q": q, "c": c}, forward


def _build_shareability(gen):
    fused = Tensor(gen.normal(size=(3, 8)))
    pos = Tensor(gen.normal(size=(6, 8)))
    neg = Tensor(gen.normal(size=(6, 8)))

    def forward() -> Tensor:
        bank = rf.PrototypeBank(fused=fused, basis=None, kept_rows=[])
        return rf.shareability_loss(bank, pos, neg)

    return {"fused": fused, "pos": pos, "neg": neg}, forward


def _build_diversity(gen):
    protos = Tensor(gen.normal(size=(4, 6)))
    return {"prototypes": protos}, lambda: rf.diversity_loss(protos)


def _build_focal(gen):
    logits = Tensor(gen.normal(size=(7, 1)))
    matched = np.array([1, 4], dtype=np.intp)
    return {"logits": logits}, lambda: hd.focal_loss(ag.sigmoid(logits), matched)


def _build_localization(gen):
    centers = Tensor(gen.normal(size=(6, 2)) * 3.0)
    points = gen.normal(size=(4, 2)) * 3.0
    result = hd.MatchResult(pairs=[(0, 2), (2, 0), (3, 1), (5, 3)], n_queries=6, n_points=4)
    return {"centers": centers}, lambda: hd.localization_loss(centers, result, points)


def _build_density(gen):
    d = 6
    tokens = Tensor(gen.normal(size=(12, d)))
    weight = Tensor(gen.normal(size=(d, 1)))
    bias = Tensor(gen.normal(size=(1, 1)))
    target = np.abs(gen.normal(size=(12, 1)))

    def forward() -> Tensor:
        pred = ag.power(ag.linear(tokens, weight, bias), 2.0)
        return ag.mean_all(ag.power(ag.sub(pred, ag.const(target)), 2.0))

    return {"tokens": tokens, "weight": weight, "bias": bias}, forward


def _refinement_params(gen, d: int, m: int) -> rf.RefinementParams:
    def mat():
        return Tensor(gen.normal(size=(d, d)) / np.sqrt(d))

    protos = gen.normal(size=(3, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return rf.RefinementParams(
        prototypes=Tensor(protos),
        proto_attention=AttentionParams(wq=mat(), wk=mat(), wv=mat(), wo=mat(), heads=2),
        proto_proj=LinearParams(weight=mat(), bias=Tensor(gen.normal(size=(1, d)) * 0.1)),
        proto_norm=LayerNormParams(
            gain=Tensor(1.0 + 0.1 * gen.normal(size=(1, d))),
            shift=Tensor(0.1 * gen.normal(size=(1, d))),
        ),
        refine_attention=AttentionParams(wq=mat(), wk=mat(), wv=mat(), wo=mat(), heads=2),
        refine_norm=LayerNormParams(
            gain=Tensor(1.0 + 0.1 * gen.normal(size=(1, d))),
            shift=Tensor(0.1 * gen.normal(size=(1, d))),
        ),
        gate=Tensor(gen.normal(size=(1, 1)) * 0.3),
        n_exclusive=m,
        dropout_rate=0.0,
        literal_shared_projection=False,
        proto_attention_residual=False,
    )


def _build_refine_gate(gen):
    d = 8
    params = _refinement_params(gen, d, m=2)
    pos = Tensor(gen.normal(size=(4, d)))
    refs = Tensor(gen.normal(size=(2, d)))
    leaves = {"pos": pos, "refs": refs, "gate": params.gate}
    leaves.update({f"attn_{k}": v for k, v in params.refine_attention.tensors("x").items()})
    probe = gen.normal(size=(4, d))

    def forward() -> Tensor:
        refset = rf.NegativeReferenceSet(
            rows=refs, selection=rf.ExclusivitySelection(np.zeros(2), np.array([0, 1]), 2)
        )
        return _weighted_sum(rf.refine_queries(pos, refset, params), probe)

    return leaves, forward


def _build_dqr_heads_composite(gen):
    d = 8
    n = 6
    # m = n keeps the exclusivity selection constant under FD perturbations;
    # the sub-selection itself is discrete and covered by the oracle tests
    params = _refinement_params(gen, d, m=n)
    head = hd.HeadParams(
        score=LinearParams(weight=Tensor(gen.normal(size=(d, 1))), bias=Tensor(gen.normal(size=(1, 1)))),
        center=LinearParams(weight=Tensor(gen.normal(size=(d, 2))), bias=Tensor(gen.normal(size=(1, 2)))),
        extent=LinearParams(weight=Tensor(gen.normal(size=(d, 2))), bias=Tensor(gen.normal(size=(1, 2)))),
        density_out=LinearParams(weight=Tensor(gen.normal(size=(d, 1))), bias=Tensor(gen.normal(size=(1, 1)))),
        grid_hw=(10, 10),
        anchors=hd.anchor_grid(n, (10, 10)),
    )
    pos = Tensor(gen.normal(size=(n, d)))
    neg = Tensor(gen.normal(size=(n, d)))
    points = gen.uniform(1.0, 9.0, size=(3, 2))
    weights = hd.LossWeights()

    # freeze the assignment at the evaluation point; it is locally constant
    base = rf.dqr_forward(pos, neg, params)
    decoded = hd.decode(base.refined, head)
    frozen = hd.match(decoded.centers.data, decoded.scores.data[:, 0], points)

    leaves = {"pos": pos, "neg": neg, "prototypes": params.prototypes, "gate": params.gate}
    leaves.update(params.proto_attention.tensors("proto_attn"))
    leaves.update(params.refine_attention.tensors("refine_attn"))
    leaves.update(params.proto_proj.tensors("proto_proj"))
    leaves.update(head.score.tensors("score"))
    leaves.update(head.center.tensors("center"))

    def forward() -> Tensor:
        result = rf.dqr_forward(pos, neg, params)
        dec = hd.decode(result.refined, head)
        cls = hd.focal_loss(dec.scores, frozen.matched_queries)
        loc = hd.localization_loss(dec.centers, frozen, points)
        den = ag.const(np.zeros((1, 1)))
        total, _ = hd.total_loss(cls, loc, den, result.share_loss, result.div_loss, weights)
        return total

    return leaves, forward


CHECKS: list[tuple[str, Builder]] = [
    ("linear", _build_linear),
    ("layer_norm", _build_layer_norm),
    ("softmax_rows", _build_softmax),
    ("multi_head_attention", _build_attention),
    ("biased_attention", _build_biased_attention),
    ("film_conditioning", _build_film_conditioning),
    ("cosine_similarity", _build_cosine),
    ("rowmax", _build_rowmax),
    ("embedding_gather", _build_embedding),
    ("orthonormal_rows", _build_orthonormal),
    ("projection_residual", _build_projection),
    ("shareability_loss", _build_shareability),
    ("diversity_loss", _build_diversity),
    ("focal_loss", _build_focal),
    ("localization_loss", _build_localization),
    ("density_loss", _build_density),
    ("refine_gate", _build_refine_gate),
    ("dqr_heads_composite", _build_dqr_heads_composite),
]


def check_operation(
    name: str,
    builder: Builder,
    seed: int,
    points: int = 20,
    step: float = FD_STEP,
    coord_budget: int = 24,
    fault: str | None = None,
) -> GradCheckRow:
    """Worst relative error for one operation across `points` random instances."""
    worst = GradCheckRow(name, 0.0, "", (0, 0), 0.0, 0.0, True)
    for p in range(points):
        gen = np.random.default_rng([seed, p, hash_label(name)])
        leaves, forward = builder(gen)
        out = forward()
        ag.reset_graph_grads(out)
        ag.backward(out)
        analytic = {key: leaf.grad.copy() for key, leaf in leaves.items()}
        if fault == name:
            analytic[sorted(leaves)[0]] += 1e-2
        for key, leaf in leaves.items():
            rows, cols = leaf.data.shape
            coords = [(r, c) for r in range(rows) for c in range(cols)]
            if len(coords) > coord_budget:
                picks = gen.choice(len(coords), size=coord_budget, replace=False)
                coords = [coords[int(i)] for i in picks]
            for r, c in coords:
                keep = leaf.data[r, c]
                leaf.data[r, c] = keep + step
                up = forward().data[0, 0]
                leaf.data[r, c] = keep - step
                down = forward().data[0, 0]
                leaf.data[r, c] = keep
                numeric = (up - down) / (2.0 * step)
                a = analytic[key][r, c]
                err = relative_error(a, numeric)
                if err > worst.max_rel_err:
                    worst = GradCheckRow(
                        op=name, max_rel_err=err, worst_leaf=key, worst_coord=(r, c),
                        analytic=float(a), numeric=float(numeric),
                        passed=err < THRESHOLD,
                    )
    worst.passed = worst.max_rel_err < THRESHOLD
    return worst


def hash_label(label: str) -> int:
    import zlib

    return zlib.crc32(label.encode("utf-8"))


def run_gradient_suite(
    seed: int = 0,
    points: int = 20,
    step: float = FD_STEP,
    coord_budget: int = 24,
    fault: str | None = None,
) -> list[GradCheckRow]:
    return [
        check_operation(name, builder, seed, points, step, coord_budget, fault)
        for name, builder in CHECKS
    ]


def format_rows(rows: list[GradCheckRow]) -> str:
    lines = [f"{'operation':<24} {'max_rel_err':>12} {'worst leaf':>12} verdict"]
    for row in rows:
        verdict = "PASS" if row.passed else (
            f"FAIL (leaf {row.worst_leaf}{row.worst_coord}: "
            f"analytic {row.analytic:.6g} vs numeric {row.numeric:.6g})"
        )
        lines.append(f"{row.op:<24} {row.max_rel_err:>12.3e} {row.worst_leaf:>12} {verdict}")
    return "\n".join(lines)

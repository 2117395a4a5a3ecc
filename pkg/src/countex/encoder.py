"""Prompt conditioning and query encoding.

Prompts become short conditioning sequences: embedded text tokens (category
plus attribute) and linearly projected exemplar vectors.  A fixed budget of
learned query seeds then cross-attends in one attention + layer-norm block to
the scene's instance features concatenated with the conditioning sequence.
Positive and negative prompts run through the same weights; only the
conditioning input differs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import (
    AttentionParams,
    LayerNormParams,
    LinearParams,
    RngStream,
    Tensor,
)
from .config import CountexConfig
from .errors import ContractError
from .scenes import CategoryUniverse, PromptSpec, SyntheticScene


def positional_rows(centers: np.ndarray, grid_hw: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed positional code per center: normalized coords plus sin/cos tones.

    The raw normalized coordinates sit in the first two slots so a linear head
    can read locations back out directly; the tones give attention something
    sharper to bind to.  Padded or truncated to `dim` columns.
    """
    h, w = grid_hw
    rn = centers[:, 0] / h
    cn = centers[:, 1] / w
    cols = [rn, cn]
    for freq in (1.0, 2.0, 4.0, 8.0):
        cols.append(np.sin(2.0 * np.pi * freq * rn))
        cols.append(np.cos(2.0 * np.pi * freq * rn))
        cols.append(np.sin(2.0 * np.pi * freq * cn))
        cols.append(np.cos(2.0 * np.pi * freq * cn))
    full = np.stack(cols, axis=1)
    out = np.zeros((centers.shape[0], dim))
    keep = min(dim, full.shape[1])
    out[:, :keep] = full[:, :keep]
    return out


def anchor_grid(n: int, grid_hw: tuple[int, int]) -> np.ndarray:
    """Fixed per-query anchor points on an even lattice over the grid.

    Each query owns a spatial neighborhood: its seed carries the anchor's
    positional code and its predicted center is an offset from the anchor.
    That gives queries distinct roles from step zero, which one block of
    cross-attention alone does not.
    """
    h, w = grid_hw
    k = int(np.ceil(np.sqrt(n)))
    rows = (np.arange(k) + 0.5) * h / k
    cols = (np.arange(k) + 0.5) * w / k
    lattice = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)
    return lattice[:n]


@dataclass
class EncoderParams:
    embed: Tensor  # vocab x d token table
    exemplar_proj: LinearParams  # feature_dim -> d
    scene_proj: LinearParams  # feature_dim -> d
    film: LinearParams  # d -> d, prompt pooled into a per-column key gain
    fuse: AttentionParams
    fuse_norm: LayerNormParams
    seeds: Tensor  # n_queries x d
    anchors: np.ndarray  # n_queries x 2 fixed lattice, not trained
    density_scene: LinearParams  # feature_dim -> d
    density_prompt: LinearParams  # d -> d
    n_categories: int
    n_attributes: int

    @staticmethod
    def create(rng: RngStream, cfg: CountexConfig) -> "EncoderParams":
        d = cfg.embed_dim
        vocab = cfg.n_categories + cfg.n_attributes + 1
        anchors = anchor_grid(cfg.n_queries, (cfg.grid_h, cfg.grid_w))
        seeds = ag.uniform_matrix(rng.child("seeds"), cfg.n_queries, d, d)
        seeds.data += positional_rows(anchors, (cfg.grid_h, cfg.grid_w), d)
        return EncoderParams(
            embed=ag.uniform_matrix(rng.child("embed"), vocab, d, d),
            exemplar_proj=LinearParams.create(rng.child("exemplar_proj"), cfg.feature_dim, d),
            scene_proj=LinearParams.create(rng.child("scene_proj"), cfg.feature_dim, d),
            film=LinearParams.create(rng.child("film"), d, d),
            fuse=AttentionParams.create(rng.child("fuse"), d, cfg.heads),
            fuse_norm=LayerNormParams.create(d),
            seeds=seeds,
            anchors=anchors,
            density_scene=LinearParams.create(rng.child("density_scene"), cfg.feature_dim, d),
            density_prompt=LinearParams.create(rng.child("density_prompt"), d, d),
            n_categories=cfg.n_categories,
            n_attributes=cfg.n_attributes,
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {"encoder.embed": self.embed, "encoder.seeds": self.seeds}
        out.update(self.exemplar_proj.tensors("encoder.exemplar_proj"))
        out.update(self.scene_proj.tensors("encoder.scene_proj"))
        out.update(self.film.tensors("encoder.film"))
        out.update(self.fuse.tensors("encoder.fuse"))
        out.update(self.fuse_norm.tensors("encoder.fuse_norm"))
        out.update(self.density_scene.tensors("encoder.density_scene"))
        out.update(self.density_prompt.tensors("encoder.density_prompt"))
        return out

    @property
    def null_token(self) -> int:
        return self.n_categories + self.n_attributes


def text_tokens(universe: CategoryUniverse, variant_id: str, n_categories: int) -> list[int]:
    """Token ids for a variant: its category token then its attribute token."""
    spec = universe.spec(variant_id)
    base_index = int(spec.base_id[1:])
    return [base_index, n_categories + spec.attr_token]


def encode_prompt(
    text: str | None,
    exemplars: np.ndarray,
    params: EncoderParams,
    universe: CategoryUniverse,
) -> Tensor:
    """Conditioning sequence for one prompt side.

    Text contributes its two token embeddings; missing text contributes the
    learned null token instead, so a bare sentinel prompt is a single-row
    sequence.  Each exemplar feature vector adds one projected row, so 2 text
    tokens plus 3 exemplars yield a 5-row sequence.
    """
    if len(exemplars) not in (0, 3):
        raise ContractError(f"exemplar count must be 0 or 3, got {len(exemplars)}")
    if text is not None:
        tokens = text_tokens(universe, text, params.n_categories)
    else:
        tokens = [params.null_token]
    rows = [ag.gather_rows(params.embed, tokens)]
    if len(exemplars) > 0:
        rows.append(params.exemplar_proj.apply(ag.const(exemplars, "exemplars")))
    return ag.concat_rows(rows) if len(rows) > 1 else rows[0]


def scene_keys(scene: SyntheticScene, params: EncoderParams) -> Tensor:
    """Projected instance features with positional codes added."""
    feats = ag.const(scene.feature_matrix(), "scene_features")
    pos = positional_rows(scene.centers(), scene.grid_hw, params.seeds.shape[1])
    return ag.add(params.scene_proj.apply(feats), ag.const(pos, "positional"))


def locality_bias(
    anchors: np.ndarray,
    centers: np.ndarray,
    grid_hw: tuple[int, int],
    n_conditioning: int,
) -> np.ndarray:
    """Additive attention bias tying each query to its spatial neighborhood.

    Instance keys are penalized by their city-block distance from the query's
    anchor, measured in units of half the anchor lattice pitch; conditioning
    rows get zero bias so the prompt stays visible everywhere.  Without this,
    fresh attention weights are near uniform over keys and every query reads
    the same scene-wide average, which no amount of desk-scale training
    recovers from.
    """
    pitch = max(grid_hw) / math.ceil(math.sqrt(anchors.shape[0]))
    dist = np.abs(anchors[:, None, :] - centers[None, :, :]).sum(axis=2)
    scene_part = -dist / (pitch / 2.0)
    return np.concatenate(
        [scene_part, np.zeros((anchors.shape[0], n_conditioning))], axis=1
    )


def condition_keys(keys: Tensor, conditioning: Tensor, film: LinearParams) -> Tensor:
    """Feature-wise modulation of the scene keys by the pooled prompt.

    The pooled conditioning row maps to a bounded per-column gain, 1 + tanh,
    multiplying every key.  The additive route (prompt rows concatenated into
    the attention keys) only shifts what queries read; this multiplicative
    route makes prompt-feature agreement itself visible as key magnitude,
    which the score head needs in order to count one variant and not its
    lookalike.
    """
    pooled = ag.mean_rows(conditioning)
    gain = ag.add(ag.const(np.ones((1, keys.shape[1]))), ag.tanh(film.apply(pooled)))
    return ag.mul(keys, gain)


def encode_queries(
    keys: Tensor,
    conditioning: Tensor,
    params: EncoderParams,
    bias: np.ndarray | None = None,
) -> Tensor:
    """One block of cross-attention from the seeds onto [keys ; conditioning]."""
    kv = ag.concat_rows([condition_keys(keys, conditioning, params.film), conditioning])
    attended = ag.multi_head_attention(params.seeds, kv, kv, params.fuse, bias=bias)
    return params.fuse_norm.apply(ag.add(params.seeds, attended))


def encode_query_sets(
    scene: SyntheticScene,
    prompt: PromptSpec,
    params: EncoderParams,
    universe: CategoryUniverse,
) -> tuple[Tensor, Tensor | None, Tensor]:
    """Positive queries, negative queries (None without a negative prompt),
    and the positive conditioning sequence."""
    keys = scene_keys(scene, params)
    centers = scene.centers()

    def side_bias(cond: Tensor) -> np.ndarray:
        return locality_bias(params.anchors, centers, scene.grid_hw, cond.shape[0])

    pos_cond = encode_prompt(prompt.positive_text, prompt.positive_exemplars, params, universe)
    pos_q = encode_queries(keys, pos_cond, params, bias=side_bias(pos_cond))
    neg_q = None
    if prompt.has_negative:
        neg_cond = encode_prompt(prompt.negative_text, prompt.negative_exemplars, params, universe)
        neg_q = encode_queries(keys, neg_cond, params, bias=side_bias(neg_cond))
    return pos_q, neg_q, pos_cond


def density_tokens(
    cell_features: np.ndarray,
    pos_conditioning: Tensor,
    params: EncoderParams,
) -> Tensor:
    """Prompt-fused per-cell tokens feeding the density head.

    `cell_features` is the (H*W) x feature_dim grid of instance features (zero
    rows for empty cells); every cell receives the same pooled projection of
    the positive conditioning sequence.
    """
    cells = params.density_scene.apply(ag.const(cell_features, "cell_features"))
    pooled = params.density_prompt.apply(ag.mean_rows(pos_conditioning))
    return ag.add(cells, pooled)


def cell_feature_grid(scene: SyntheticScene) -> np.ndarray:
    """(H*W) x feature_dim scatter of instance features (rows sum on collision)."""
    h, w = scene.grid_hw
    feats = scene.feature_matrix()
    grid = np.zeros((h * w, feats.shape[1]))
    centers = scene.centers()
    flat = (np.round(centers[:, 0]).astype(int) * w + np.round(centers[:, 1]).astype(int))
    np.add.at(grid, flat, feats)
    return grid

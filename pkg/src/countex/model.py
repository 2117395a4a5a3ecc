"""Full model: encoder, refinement stack, and prediction heads.

`forward_scene` wires one scene and one prompt through every stage and hands
back the differentiable pieces; `scene_loss` adds matching and the loss
terms.  Parameters live in a flat name -> tensor registry so the optimizer
and the on-disk format stay trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import heads as hd
from . import jsonio
from . import refinement as rf
from .autograd import RngStream, Tensor
from .config import CountexConfig, load_config
from .encoder import (
    EncoderParams,
    cell_feature_grid,
    density_tokens,
    encode_query_sets,
)
from .errors import ConfigError
from .heads import DecodedQueries, HeadParams, LossBreakdown, LossWeights
from .refinement import RefinementParams, RefinementResult
from .scenes import CategoryUniverse, PromptSpec, SyntheticScene, render_density

PARAMS_FORMAT = "countex-params-v1"


@dataclass
class SceneForward:
    decoded: DecodedQueries
    refinement: RefinementResult
    density: Tensor  # (H*W) x 1 predicted map


class CountModel:
    def __init__(self, cfg: CountexConfig, encoder: EncoderParams, refiner: RefinementParams, head: HeadParams):
        self.cfg = cfg
        self.encoder = encoder
        self.refiner = refiner
        self.head = head
        self.universe = CategoryUniverse.from_config(cfg)
        self.weights = LossWeights.from_config(cfg)
        self._cell_cache: dict[str, np.ndarray] = {}
        self._density_cache: dict[tuple[str, str], np.ndarray] = {}

    @staticmethod
    def create(cfg: CountexConfig, seed: int) -> "CountModel":
        rng = RngStream(seed, "init")
        return CountModel(
            cfg,
            EncoderParams.create(rng.child("encoder"), cfg),
            RefinementParams.create(rng.child("refine"), cfg),
            HeadParams.create(rng.child("heads"), cfg),
        )

    # -- parameters -------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.encoder.tensors())
        out.update(self.refiner.tensors())
        out.update(self.head.tensors())
        return out

    def zero_grads(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    # -- forward ----------------------------------------------------------

    def _cell_features(self, scene: SyntheticScene) -> np.ndarray:
        cached = self._cell_cache.get(scene.scene_id)
        if cached is None:
            cached = cell_feature_grid(scene)
            self._cell_cache[scene.scene_id] = cached
        return cached

    def _density_target(self, scene: SyntheticScene) -> np.ndarray:
        key = (scene.scene_id, scene.positive_category)
        cached = self._density_cache.get(key)
        if cached is None:
            cached = render_density(scene, scene.positive_category, self.cfg.density_sigma)
            self._density_cache[key] = cached
        return cached

    def forward_scene(
        self,
        scene: SyntheticScene,
        prompt: PromptSpec,
        training: bool = False,
        gen: np.random.Generator | None = None,
    ) -> SceneForward:
        pos_q, neg_q, pos_cond = encode_query_sets(scene, prompt, self.encoder, self.universe)
        pitch = max(scene.grid_hw) / math.ceil(math.sqrt(self.cfg.n_queries))
        refined = rf.dqr_forward(
            pos_q, neg_q, self.refiner, training, gen,
            anchors=self.encoder.anchors, anchor_tau=pitch / 2.0,
        )
        decoded = hd.decode(refined.refined, self.head)
        tokens = density_tokens(self._cell_features(scene), pos_cond, self.encoder)
        density = hd.density_head(tokens, self.head)
        return SceneForward(decoded=decoded, refinement=refined, density=density)

    def scene_loss(
        self,
        scene: SyntheticScene,
        prompt: PromptSpec,
        training: bool = True,
        gen: np.random.Generator | None = None,
        step: int = -1,
    ) -> tuple[Tensor, LossBreakdown]:
        fwd = self.forward_scene(scene, prompt, training, gen)
        points = scene.centers_of(scene.positive_category)
        result = hd.match(fwd.decoded.centers.data, fwd.decoded.scores.data[:, 0], points)
        cls = hd.focal_loss(fwd.decoded.scores, result.matched_queries)
        loc = hd.localization_loss(fwd.decoded.centers, result, points)
        den = hd.density_loss(fwd.density, self._density_target(scene))
        return hd.total_loss(
            cls, loc, den, fwd.refinement.share_loss, fwd.refinement.div_loss,
            self.weights, step,
        )

    def predict(self, scene: SyntheticScene, prompt: PromptSpec, tau: float) -> hd.PredictionSet:
        fwd = self.forward_scene(scene, prompt, training=False)
        return hd.prediction_set(fwd.decoded, tau)

    # -- serialization ----------------------------------------------------

    def save(self, path, tau: float) -> None:
        arrays = {
            name: {
                "shape": list(tensor.data.shape),
                "data": [float(x) for x in tensor.data.ravel()],
            }
            for name, tensor in sorted(self.parameters().items())
        }
        jsonio.write_file(path, {
            "format": PARAMS_FORMAT,
            "config": self.cfg.to_dict(),
            "tau": float(tau),
            "arrays": arrays,
        })

    @staticmethod
    def load(path) -> tuple["CountModel", float]:
        raw = jsonio.read_file(path)
        if not isinstance(raw, dict) or raw.get("format") != PARAMS_FORMAT:
            raise ConfigError(f"{path} is not a {PARAMS_FORMAT} file")
        cfg = load_config(None, raw["config"])
        model = CountModel.create(cfg, seed=0)
        params = model.parameters()
        stored = raw["arrays"]
        missing = sorted(set(params) - set(stored))
        extra = sorted(set(stored) - set(params))
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, tensor in params.items():
            entry = stored[name]
            shape = tuple(entry["shape"])
            if shape != tensor.data.shape:
                raise ConfigError(
                    f"parameter {name}: stored shape {shape} != expected {tensor.data.shape}"
                )
            tensor.data[:] = np.array(entry["data"], dtype=np.float64).reshape(shape)
        return model, float(raw["tau"])

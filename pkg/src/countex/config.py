"""Run configuration: one flat record covering scenes, model, and training.

Values resolve with the usual precedence: built-in defaults, then a JSON
config file, then explicit command line overrides.  `load_config` applies the
chain and validates once at the end.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Mapping

from . import jsonio
from .errors import ConfigError

TAU_GRID = [round(0.05 * k, 2) for k in range(1, 20)]

MODALITY_TOKENS = ("t_pos", "e_pos", "t_neg", "e_neg")

# evaluation rows of the prompt-modality sweep, in reporting order
ABLATION_MASKS = (
    frozenset({"t_pos"}),
    frozenset({"t_pos", "e_pos"}),
    frozenset({"t_pos", "t_neg"}),
    frozenset({"t_pos", "e_pos", "t_neg", "e_neg"}),
)

# per-scene sampling weights over ABLATION_MASKS during training: most steps
# carry a negative prompt, mirroring a pipeline trained with exclusion always
# available, so prompt-impoverished inference is a genuine distribution shift
MASK_SAMPLING_WEIGHTS = (0.05, 0.10, 0.25, 0.60)


@dataclass
class CountexConfig:
    # synthetic scenes
    grid_h: int = 64
    grid_w: int = 64
    base_dim: int = 24
    attr_dim: int = 8
    noise_sigma: float = 0.15
    count_min: int = 5
    count_max: int = 60
    distractor_min: int = 0
    distractor_max: int = 10
    attribute_separation: float = 0.5
    n_categories: int = 8
    n_attributes: int = 3
    exemplar_count: int = 3
    density_sigma: float = 1.0
    universe_seed: int = 0
    # model
    embed_dim: int = 32
    n_queries: int = 100
    heads: int = 4
    n_prototypes: int = 8
    n_exclusive: int = 0  # 0 derives ceil(n_queries / 8)
    dropout_rate: float = 0.1
    literal_shared_projection: bool = False
    proto_attention_residual: bool = False
    # training and evaluation
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weight_cls: float = 5.0
    weight_loc: float = 1.0
    weight_den: float = 200.0
    weight_share: float = 2.0
    weight_div: float = 0.01
    eval_mask: str = "t_pos+e_pos+t_neg+e_neg"
    split_train: float = 0.70
    split_val: float = 0.15
    split_test: float = 0.15

    @property
    def feature_dim(self) -> int:
        return self.base_dim + self.attr_dim

    @property
    def exclusive_count(self) -> int:
        if self.n_exclusive > 0:
            return self.n_exclusive
        return math.ceil(self.n_queries / 8)

    def validate(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(f"grid must be positive, got {self.grid_h}x{self.grid_w}")
        if self.base_dim < 1 or self.attr_dim < 3:
            raise ConfigError(
                f"base_dim >= 1 and attr_dim >= 3 required, got {self.base_dim}/{self.attr_dim}"
            )
        if not 0 <= self.count_min <= self.count_max:
            raise ConfigError(f"bad count range [{self.count_min}, {self.count_max}]")
        if self.count_min < 1:
            raise ConfigError("count_min must be >= 1 so both target categories appear")
        if not 0 <= self.distractor_min <= self.distractor_max:
            raise ConfigError(
                f"bad distractor range [{self.distractor_min}, {self.distractor_max}]"
            )
        if 2 * self.count_max + self.distractor_max > self.grid_h * self.grid_w:
            raise ConfigError(
                f"up to {2 * self.count_max + self.distractor_max} instances cannot fit "
                f"a {self.grid_h}x{self.grid_w} grid"
            )
        if not 0.0 <= self.attribute_separation <= math.sqrt(3.0):
            raise ConfigError(
                f"attribute_separation must lie in [0, sqrt(3)], got {self.attribute_separation}"
            )
        if self.n_categories < 3:
            raise ConfigError("need at least 3 categories for absent-category prompts")
        if self.n_attributes < 3 or self.n_attributes > self.attr_dim:
            raise ConfigError(
                f"n_attributes must lie in [3, attr_dim], got {self.n_attributes}"
            )
        if self.exemplar_count != 3:
            raise ConfigError("exemplar prompts carry exactly 3 vectors")
        if self.density_sigma <= 0:
            raise ConfigError(f"density_sigma must be positive, got {self.density_sigma}")
        if self.embed_dim < 4 or self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"heads={self.heads} must divide embed_dim={self.embed_dim}"
            )
        if self.n_queries < self.count_max:
            raise ConfigError(
                f"n_queries={self.n_queries} below count_max={self.count_max}; "
                "the query budget must cover every countable instance"
            )
        if self.n_prototypes < 1 or self.n_prototypes > self.embed_dim:
            raise ConfigError(f"n_prototypes must lie in [1, embed_dim], got {self.n_prototypes}")
        if self.exclusive_count < 1 or self.exclusive_count > self.n_queries:
            raise ConfigError(f"n_exclusive resolves to {self.exclusive_count}, out of range")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("weight_cls", "weight_loc", "weight_den", "weight_share", "weight_div"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        parse_mask(self.eval_mask)
        ratios = (self.split_train, self.split_val, self.split_test)
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be nonnegative and sum to 1, got {ratios}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def parse_mask(text: str) -> frozenset[str]:
    """Parse a '+'-joined modality mask string such as 't_pos+t_neg'."""
    tokens = [t.strip() for t in text.split("+") if t.strip()]
    unknown = [t for t in tokens if t not in MODALITY_TOKENS]
    if unknown:
        raise ConfigError(f"unknown modality tokens {unknown}; valid: {MODALITY_TOKENS}")
    mask = frozenset(tokens)
    if "t_pos" not in mask:
        raise ConfigError("modality mask must include t_pos")
    return mask


def mask_label(mask: frozenset[str]) -> str:
    return "+".join(t for t in MODALITY_TOKENS if t in mask)


def load_config(path: str | None = None, overrides: Mapping[str, Any] | None = None) -> CountexConfig:
    """Defaults, then file values, then overrides; validated once assembled."""
    values: dict[str, Any] = {}
    sources: dict[str, str] = {}
    if path is not None:
        raw = jsonio.read_file(path)
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, val in raw.items():
            values[key] = val
            sources[key] = "file"
    if overrides:
        for key, val in overrides.items():
            if val is not None:
                values[key] = val
                sources[key] = "override"
    fields = {f.name: f for f in dataclasses.fields(CountexConfig)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    kwargs: dict[str, Any] = {}
    for name, field in fields.items():
        if name not in values:
            continue
        val = values[name]
        want = field.type
        if want == "int" and isinstance(val, bool):
            raise ConfigError(f"config key {name} must be int, got bool")
        if want == "int" and not isinstance(val, int):
            raise ConfigError(f"config key {name} must be int, got {type(val).__name__}")
        if want == "float":
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"config key {name} must be a number")
            val = float(val)
        if want == "bool" and not isinstance(val, bool):
            raise ConfigError(f"config key {name} must be bool")
        if want == "str" and not isinstance(val, str):
            raise ConfigError(f"config key {name} must be a string")
        kwargs[name] = val
    cfg = CountexConfig(**kwargs)
    cfg.validate()
    cfg._sources = sources  # type: ignore[attr-defined]
    return cfg


def describe(cfg: CountexConfig) -> str:
    """Human-readable dump of the resolved configuration, one key per line."""
    sources = getattr(cfg, "_sources", {})
    lines = []
    for field in dataclasses.fields(CountexConfig):
        origin = sources.get(field.name, "default")
        lines.append(f"{field.name} = {getattr(cfg, field.name)} ({origin})")
    return "\n".join(lines)


def split_counts(total: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor-then-remainder split of `total` items.

    Each share is floored first; leftover items go to the splits with the
    largest fractional parts, ties resolved toward the later split.  With
    ratios (0.7, 0.15, 0.15), 10 scenes split 7/1/2.
    """
    exact = [total * r for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    leftover = total - sum(counts)
    order = sorted(range(3), key=lambda i: (exact[i] - counts[i], i), reverse=True)
    for i in range(leftover):
        counts[order[i]] += 1
    return counts[0], counts[1], counts[2]

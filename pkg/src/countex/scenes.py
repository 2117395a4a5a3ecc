"""Synthetic confusable-category scenes.

A scene is a sparse grid of point instances.  Each category comes in two
variants that share a base descriptor and differ only in an attribute
descriptor, so telling them apart requires attribute-level discrimination.
The distance between attribute descriptors is the difficulty knob: small
separations make variants nearly indistinguishable under feature noise.

Scenes serialize to a small JSON schema with exact float round trips and
validate on read with JSON-pointer error locations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import jsonio, kernels
from .autograd import RngStream
from .config import CountexConfig
from .errors import CapacityError, ContractError, SceneFormatError


# ---------------------------------------------------------------------------
# category universe


@dataclass(frozen=True)
class CategorySpec:
    """One countable variant: a base descriptor plus an attribute descriptor."""

    variant_id: str
    base_id: str
    base: np.ndarray  # unit norm, base_dim
    attribute: np.ndarray  # unit norm, attr_dim
    attr_token: int
    separation: float

    def descriptor(self) -> np.ndarray:
        return np.concatenate([self.base, self.attribute])


def _attribute_vectors(dim: int, count: int, separation: float, gen: np.random.Generator) -> np.ndarray:
    """`count` unit vectors with pairwise distance exactly `separation`.

    Vectors sit on a circle around a common axis: v_k = cos(phi) u + sin(phi) f_k
    with the f_k equally spaced in a plane orthogonal to u.  Equal angular
    spacing is only equidistant for up to 3 vectors, which covers the default
    attribute pool.
    """
    if count > 3:
        raise ContractError(f"equidistant construction supports up to 3 attributes, got {count}")
    basis = np.linalg.qr(gen.normal(size=(dim, 3)))[0].T  # 3 orthonormal rows
    u, e1, e2 = basis[0], basis[1], basis[2]
    # pairwise distance between points at angle theta on the unit circle,
    # scaled by sin(phi): 2 sin(phi) sin(theta/2) with theta = 2 pi / 3
    chord = 2.0 * math.sin(math.pi / max(count, 2)) if count == 2 else math.sqrt(3.0)
    sin_phi = separation / chord if chord > 0 else 0.0
    sin_phi = min(sin_phi, 1.0)
    cos_phi = math.sqrt(max(0.0, 1.0 - sin_phi * sin_phi))
    vecs = []
    for k in range(count):
        ang = 2.0 * math.pi * k / count
        f = math.cos(ang) * e1 + math.sin(ang) * e2
        vecs.append(cos_phi * u + sin_phi * f)
    return np.stack(vecs)


@dataclass
class CategoryUniverse:
    """All categories a dataset draws from, fixed by the universe seed."""

    specs: dict[str, CategorySpec]
    base_ids: list[str]
    variants_by_base: dict[str, tuple[str, str]]
    attr_vectors: np.ndarray

    @staticmethod
    def from_config(cfg: CountexConfig) -> "CategoryUniverse":
        stream = RngStream(cfg.universe_seed, "universe")
        attr_vectors = _attribute_vectors(
            cfg.attr_dim, cfg.n_attributes, cfg.attribute_separation,
            stream.child("attributes").generator(),
        )
        gen = stream.child("categories").generator()
        specs: dict[str, CategorySpec] = {}
        base_ids: list[str] = []
        variants_by_base: dict[str, tuple[str, str]] = {}
        for k in range(cfg.n_categories):
            base_id = f"c{k:02d}"
            base = gen.normal(size=cfg.base_dim)
            base /= np.linalg.norm(base)
            tokens = gen.choice(cfg.n_attributes, size=2, replace=False)
            pair = []
            for slot, token in enumerate(tokens):
                vid = f"{base_id}:{slot}"
                specs[vid] = CategorySpec(
                    variant_id=vid,
                    base_id=base_id,
                    base=base,
                    attribute=attr_vectors[int(token)],
                    attr_token=int(token),
                    separation=cfg.attribute_separation,
                )
                pair.append(vid)
            base_ids.append(base_id)
            variants_by_base[base_id] = (pair[0], pair[1])
        return CategoryUniverse(specs, base_ids, variants_by_base, attr_vectors)

    def spec(self, variant_id: str) -> CategorySpec:
        if variant_id not in self.specs:
            raise KeyError(f"unknown category id {variant_id!r}")
        return self.specs[variant_id]

    def sibling(self, variant_id: str) -> str:
        spec = self.spec(variant_id)
        a, b = self.variants_by_base[spec.base_id]
        return b if variant_id == a else a

    def variant_ids(self) -> list[str]:
        return sorted(self.specs)

    def absent_variant(self, scene: "SyntheticScene") -> str:
        """Deterministic pick of a variant absent from the scene.

        Prefers a variant whose base does not appear at all and whose
        attribute token differs from both target variants, so the prompt is
        genuinely unrelated to anything rendered.
        """
        present_bases = {self.spec(inst.category).base_id for inst in scene.instances}
        target_tokens = {
            self.spec(scene.positive_category).attr_token,
            self.spec(scene.negative_category).attr_token,
        }
        fallback = None
        for vid in self.variant_ids():
            spec = self.specs[vid]
            if spec.base_id in present_bases:
                continue
            if fallback is None:
                fallback = vid
            if spec.attr_token not in target_tokens:
                return vid
        if fallback is not None:
            return fallback
        raise ContractError(
            f"scene {scene.scene_id} uses every category; cannot pick an absent one"
        )


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneInstance:
    center: tuple[float, float]  # (row, col) in cell units
    category: str
    features: np.ndarray


@dataclass
class SyntheticScene:
    scene_id: str
    grid_hw: tuple[int, int]
    positive_category: str
    negative_category: str
    instances: list[SceneInstance] = field(default_factory=list)

    def count(self, variant_id: str) -> int:
        return sum(1 for inst in self.instances if inst.category == variant_id)

    @property
    def positive_count(self) -> int:
        return self.count(self.positive_category)

    @property
    def negative_count(self) -> int:
        return self.count(self.negative_category)

    @property
    def distractor_count(self) -> int:
        targets = {self.positive_category, self.negative_category}
        return sum(1 for inst in self.instances if inst.category not in targets)

    def feature_matrix(self) -> np.ndarray:
        return np.stack([inst.features for inst in self.instances])

    def centers(self) -> np.ndarray:
        return np.array([inst.center for inst in self.instances], dtype=np.float64)

    def centers_of(self, variant_id: str) -> np.ndarray:
        pts = [inst.center for inst in self.instances if inst.category == variant_id]
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def swapped(self) -> "SyntheticScene":
        """Same scene with the prompt roles exchanged."""
        return SyntheticScene(
            scene_id=self.scene_id,
            grid_hw=self.grid_hw,
            positive_category=self.negative_category,
            negative_category=self.positive_category,
            instances=self.instances,
        )


def generate_scene(
    cfg: CountexConfig,
    rng: RngStream,
    universe: CategoryUniverse | None = None,
    scene_id: str | None = None,
) -> SyntheticScene:
    """Sample one scene: a target pair sharing a base, plus distractors.

    Counts are uniform over the configured range, cells are drawn without
    replacement, and which variant plays the positive role is a coin flip, so
    a trained model cannot shortcut the prompt.
    """
    if universe is None:
        universe = CategoryUniverse.from_config(cfg)
    gen = rng.generator()
    if scene_id is None:
        scene_id = f"scene-{rng.seed:x}-{zlib_id(rng.label)}"
    h, w = cfg.grid_h, cfg.grid_w

    base_id = universe.base_ids[int(gen.integers(len(universe.base_ids)))]
    va, vb = universe.variants_by_base[base_id]
    if gen.random() < 0.5:
        va, vb = vb, va
    n_pos = int(gen.integers(cfg.count_min, cfg.count_max + 1))
    n_neg = int(gen.integers(cfg.count_min, cfg.count_max + 1))
    n_dis = int(gen.integers(cfg.distractor_min, cfg.distractor_max + 1))

    other_variants = [
        vid for vid in universe.variant_ids()
        if universe.spec(vid).base_id != base_id
    ]
    categories = [va] * n_pos + [vb] * n_neg + [
        other_variants[int(gen.integers(len(other_variants)))] for _ in range(n_dis)
    ]
    total = len(categories)
    if total > h * w:
        raise CapacityError(
            f"scene needs {total} distinct cells but the grid has {h * w}"
        )
    flat = gen.choice(h * w, size=total, replace=False)
    order = gen.permutation(total)

    instances = []
    for idx in order:
        cat = categories[idx]
        cell = int(flat[idx])
        desc = universe.spec(cat).descriptor()
        feat = desc + gen.normal(0.0, cfg.noise_sigma, size=desc.shape)
        instances.append(
            SceneInstance(
                center=(float(cell // w), float(cell % w)),
                category=cat,
                features=feat,
            )
        )
    return SyntheticScene(
        scene_id=scene_id,
        grid_hw=(h, w),
        positive_category=va,
        negative_category=vb,
        instances=instances,
    )


def zlib_id(label: str) -> str:
    import zlib

    return format(zlib.crc32(label.encode("utf-8")), "08x")


def render_density(scene: SyntheticScene, category_id: str, sigma: float) -> np.ndarray:
    """Ground-truth density map for one category; mass equals its count."""
    known = {inst.category for inst in scene.instances}
    if category_id not in known:
        raise KeyError(
            f"category {category_id!r} has no instances in scene {scene.scene_id}"
        )
    pts = scene.centers_of(category_id)
    h, w = scene.grid_hw
    return kernels.render_density(h, w, pts[:, 0].copy(), pts[:, 1].copy(), sigma)


# ---------------------------------------------------------------------------
# prompts


@dataclass
class PromptSpec:
    """Prompt material for one scene under some modality mask.

    Text fields hold variant ids (resolved to tokens by the encoder); exemplar
    fields hold 0 or 3 raw instance feature vectors.  The negative side may be
    entirely absent.
    """

    positive_text: str
    positive_exemplars: np.ndarray  # (0 or 3) x feature_dim
    negative_text: str | None
    negative_exemplars: np.ndarray

    def __post_init__(self) -> None:
        for name, ex in (("positive", self.positive_exemplars), ("negative", self.negative_exemplars)):
            if len(ex) not in (0, 3):
                raise ContractError(f"{name} exemplar count must be 0 or 3, got {len(ex)}")

    @property
    def has_negative(self) -> bool:
        return self.negative_text is not None or len(self.negative_exemplars) > 0


def sample_exemplars(scene: SyntheticScene, variant_id: str, count: int, gen: np.random.Generator) -> np.ndarray:
    """`count` instance feature vectors of one category, with replacement if scarce."""
    feats = [inst.features for inst in scene.instances if inst.category == variant_id]
    if not feats:
        raise ContractError(
            f"scene {scene.scene_id} has no instances of {variant_id!r} to sample exemplars from"
        )
    idx = gen.integers(len(feats), size=count) if len(feats) < count else gen.choice(len(feats), size=count, replace=False)
    return np.stack([feats[int(i)] for i in idx])


def build_prompt(
    scene: SyntheticScene,
    mask: frozenset[str],
    seed: int,
    negative_override: str | None = None,
) -> PromptSpec:
    """Prompt for `scene` under a modality mask.

    Exemplars are drawn from the scene's own instances through a stream keyed
    by scene id, so the same scene always yields the same prompt regardless of
    evaluation order.  `negative_override` swaps in a different negative text
    (used for absent-category prompts); exemplars for an override never exist
    in the scene, so e_neg is dropped in that case.
    """
    gen = RngStream(seed, f"exemplars/{scene.scene_id}").generator()
    empty = np.zeros((0, scene.instances[0].features.shape[0]))
    pos_ex = (
        sample_exemplars(scene, scene.positive_category, 3, gen)
        if "e_pos" in mask
        else empty
    )
    neg_text = None
    neg_ex = empty
    if "t_neg" in mask:
        neg_text = negative_override or scene.negative_category
    if "e_neg" in mask and negative_override is None:
        neg_ex = sample_exemplars(scene, scene.negative_category, 3, gen)
    return PromptSpec(
        positive_text=scene.positive_category,
        positive_exemplars=pos_ex,
        negative_text=neg_text,
        negative_exemplars=neg_ex,
    )


# ---------------------------------------------------------------------------
# serialization

_SCENE_KEYS = {"scene_id", "grid", "positive_category", "negative_category", "instances"}
_INSTANCE_KEYS = {"center", "category", "features"}


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "grid": [scene.grid_hw[0], scene.grid_hw[1]],
        "positive_category": scene.positive_category,
        "negative_category": scene.negative_category,
        "instances": [
            {
                "center": [inst.center[0], inst.center[1]],
                "category": inst.category,
                "features": [float(x) for x in inst.features],
            }
            for inst in scene.instances
        ],
    }


def write_scene(scene: SyntheticScene, path) -> None:
    jsonio.write_file(path, scene_to_dict(scene))


def _expect(cond: bool, pointer: str, reason: str) -> None:
    if not cond:
        raise SceneFormatError(pointer, reason)


def scene_from_dict(raw: dict) -> SyntheticScene:
    _expect(isinstance(raw, dict), "", "scene file must hold a JSON object")
    for key in _SCENE_KEYS:
        _expect(key in raw, f"/{key}", "missing required field")
    extra = sorted(set(raw) - _SCENE_KEYS)
    _expect(not extra, f"/{extra[0] if extra else ''}", "unknown field")
    _expect(isinstance(raw["scene_id"], str) and raw["scene_id"], "/scene_id", "must be a non-empty string")
    grid = raw["grid"]
    _expect(
        isinstance(grid, list) and len(grid) == 2
        and all(isinstance(g, int) and not isinstance(g, bool) and g >= 1 for g in grid),
        "/grid", "must be [rows, cols] with positive integers",
    )
    for key in ("positive_category", "negative_category"):
        _expect(isinstance(raw[key], str) and raw[key], f"/{key}", "must be a non-empty string")
    _expect(
        raw["positive_category"] != raw["negative_category"],
        "/negative_category", "must differ from positive_category",
    )
    _expect(isinstance(raw["instances"], list) and raw["instances"], "/instances", "must be a non-empty list")

    h, w = grid
    feat_len = None
    instances = []
    for i, entry in enumerate(raw["instances"]):
        where = f"/instances/{i}"
        _expect(isinstance(entry, dict), where, "must be an object")
        for key in _INSTANCE_KEYS:
            _expect(key in entry, f"{where}/{key}", "missing required field")
        extra = sorted(set(entry) - _INSTANCE_KEYS)
        _expect(not extra, f"{where}/{extra[0] if extra else ''}", "unknown field")
        center = entry["center"]
        _expect(
            isinstance(center, list) and len(center) == 2
            and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in center),
            f"{where}/center", "must be [row, col] numbers",
        )
        r, c = float(center[0]), float(center[1])
        _expect(0 <= r < h and 0 <= c < w, f"{where}/center", f"lies outside the {h}x{w} grid")
        _expect(isinstance(entry["category"], str) and entry["category"], f"{where}/category", "must be a non-empty string")
        feats = entry["features"]
        _expect(
            isinstance(feats, list) and feats
            and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in feats),
            f"{where}/features", "must be a non-empty list of numbers",
        )
        if feat_len is None:
            feat_len = len(feats)
        _expect(len(feats) == feat_len, f"{where}/features", f"length {len(feats)} != {feat_len} of instance 0")
        instances.append(
            SceneInstance(center=(r, c), category=entry["category"], features=np.array(feats, dtype=np.float64))
        )
    scene = SyntheticScene(
        scene_id=raw["scene_id"],
        grid_hw=(h, w),
        positive_category=raw["positive_category"],
        negative_category=raw["negative_category"],
        instances=instances,
    )
    _expect(scene.positive_count >= 1, "/instances", "no instance of positive_category")
    _expect(scene.negative_count >= 1, "/instances", "no instance of negative_category")
    seen = set()
    for i, inst in enumerate(instances):
        key = inst.center
        _expect(key not in seen, f"/instances/{i}/center", "duplicate cell")
        seen.add(key)
    return scene


def read_scene(path) -> SyntheticScene:
    try:
        raw = jsonio.read_file(path)
    except ValueError as exc:
        raise SceneFormatError("", f"invalid JSON: {exc}") from exc
    return scene_from_dict(raw)

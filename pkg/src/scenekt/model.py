"""Parameter container and the per-scene / per-pair forward assembly shared
by training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import interaction, relation
from .autodiff import Tensor
from .relation import RelationCodebook

FORMAT_VERSION = 1

# fixed order: per-block rng streams must not depend on which toggles are on
BLOCK_ORDER = (
    "w_g",
    "multilabel_w",
    "multilabel_b",
    "object_w",
    "object_b",
    "lift_w",
    "lift_b",
    "codebook",
    "coarse_w",
    "coarse_b",
    "fuse_w",
    "final_w",
    "scene_proj_w",
    "scene_proj_b",
)


@dataclass(frozen=True)
class ModelDims:
    d_v: int = 64
    d_s: int = 16
    n_object_classes: int = 150
    n_relations: int = 50

    @property
    def d_t(self) -> int:
        return self.d_v + self.d_s


@dataclass(frozen=True)
class Toggles:
    """Ablation switches: scene-object interaction, knowledge transfer,
    feature calibration, statistical-bias prior."""

    so: bool = True
    kt: bool = True
    fc: bool = True
    bias: bool = True

    def __post_init__(self):
        if self.fc and not self.kt:
            raise ValueError("FC requires KT: calibration consumes the coarse distribution")


def _block_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    C, R, dv, ds, dt = (
        dims.n_object_classes,
        dims.n_relations,
        dims.d_v,
        dims.d_s,
        dims.d_t,
    )
    return {
        "w_g": (dv,),
        "multilabel_w": (C, dv),
        "multilabel_b": (C,),
        "object_w": (C, dv),
        "object_b": (C,),
        "lift_w": (ds, 5),
        "lift_b": (ds,),
        "codebook": (R, dt),
        "coarse_w": (R, dt),
        "coarse_b": (R,),
        "fuse_w": (dt,),
        "final_w": (R, dt),
        "scene_proj_w": (dv, dv),
        "scene_proj_b": (dv,),
    }


def _init_block(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name in ("multilabel_b", "object_b", "coarse_b", "lift_b", "scene_proj_b"):
        return np.zeros(shape)
    if name in ("w_g", "fuse_w"):
        # positive mean-pooling init keeps the relu gate open from the start;
        # a near-zero init leaves the gate shut and its gradient stalled
        fan_in = shape[-1]
        return np.full(shape, 1.0 / fan_in) + rng.normal(0.0, 0.01 / fan_in, size=shape)
    if name == "codebook":
        return rng.normal(0.0, 0.01, size=shape)  # replaced by init_codebook when KT is on
    if name == "final_w":
        # zero init for the final softmax head: the head then adapts to the
        # feature scale of whichever toggle combination feeds it
        return np.zeros(shape)
    fan_in = shape[-1]
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


@dataclass
class ModelParams:
    """All learnable blocks plus the fixed per-run scalars and priors."""

    dims: ModelDims
    blocks: dict[str, Tensor]
    alpha: float = 10.0
    margin: float = 1.0
    class_weights: np.ndarray | None = None
    bias_table: np.ndarray | None = None

    @classmethod
    def initialize(cls, dims: ModelDims, seed: int, alpha: float = 10.0, margin: float = 1.0) -> "ModelParams":
        shapes = _block_shapes(dims)
        blocks = {}
        for idx, name in enumerate(BLOCK_ORDER):
            rng = np.random.default_rng([int(seed), idx])
            blocks[name] = Tensor(_init_block(name, shapes[name], rng), requires_grad=True)
        return cls(dims=dims, blocks=blocks, alpha=alpha, margin=margin)

    @property
    def codebook(self) -> RelationCodebook:
        return RelationCodebook(self.blocks["codebook"], self.margin)

    def set_codebook(self, cb: RelationCodebook):
        if cb.codewords.value.shape != self.blocks["codebook"].value.shape:
            raise ValueError("codebook shape mismatch")
        self.blocks["codebook"] = cb.codewords
        self.margin = cb.margin

    def zero_grads(self):
        for t in self.blocks.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(
            dims=self.dims,
            blocks={k: Tensor(v.value.copy(), requires_grad=True) for k, v in self.blocks.items()},
            alpha=self.alpha,
            margin=self.margin,
            class_weights=None if self.class_weights is None else self.class_weights.copy(),
            bias_table=None if self.bias_table is None else self.bias_table.copy(),
        )


def optimized_blocks(toggles: Toggles) -> tuple[str, ...]:
    """Parameter blocks the optimizer updates under the given toggles."""
    names = ["object_w", "object_b", "lift_w", "lift_b", "final_w"]
    if toggles.so:
        names += ["w_g", "multilabel_w", "multilabel_b", "scene_proj_w", "scene_proj_b"]
    if toggles.kt:
        names += ["codebook", "coarse_w", "coarse_b", "fuse_w"]
    return tuple(names)


def scene_feature_tensor(params: ModelParams, scene_feature, object_features) -> Tensor:
    """Scene feature as a constant input; when the data source supplies none,
    fall back to a learned projection of the mean object feature."""
    if scene_feature is not None:
        return Tensor(np.asarray(scene_feature, dtype=np.float64))
    mean_f = Tensor(np.mean([np.asarray(f, dtype=np.float64) for f in object_features], axis=0))
    return ad.add(ad.matvec(params.blocks["scene_proj_w"], mean_f), params.blocks["scene_proj_b"])


def refine_objects(params: ModelParams, f_s: Tensor, object_features, toggles: Toggles) -> list[Tensor]:
    """Per-object refined features; the identity map when SO is off."""
    refined = []
    for f in object_features:
        f_o = Tensor(np.asarray(f, dtype=np.float64))
        if toggles.so:
            a_i = interaction.interaction_coefficient(f_o, f_s, params.blocks["w_g"])
            refined.append(interaction.refine_object_feature(f_o, f_s, a_i))
        else:
            refined.append(f_o)
    return refined


@dataclass
class PairOutput:
    f_t: Tensor           # raw triple feature
    p: Tensor | None      # coarse relation distribution (KT only)
    f_final: Tensor       # feature fed to the final classifier
    logits: Tensor


def pair_forward(
    params: ModelParams,
    f_i: Tensor,
    f_j: Tensor,
    f_u,
    s_lifted: Tensor,
    toggles: Toggles,
    subj_class: int | None = None,
    obj_class: int | None = None,
    coarse_live: bool = False,
    detach_calibration: bool = False,
) -> PairOutput:
    """Full relation-head forward for one ordered object pair.

    By default the coarse classifier reads a detached copy of the triple
    feature, so its loss trains only the coarse head and codebook; pass
    `coarse_live=True` for a fully connected graph (end-to-end gradient
    checks).
    """
    f_u_t = Tensor(np.asarray(f_u, dtype=np.float64))
    f_t = relation.triple_feature(f_i, f_u_t, f_j, s_lifted)
    p = None
    f_final = f_t
    if toggles.kt:
        coarse_in = f_t if coarse_live else f_t.detach()
        p = relation.coarse_predict(coarse_in, params.blocks["coarse_w"], params.blocks["coarse_b"])
        f_hall = relation.hallucinate(p, params.codebook)
        f_final = relation.fuse(f_t, f_hall, params.blocks["fuse_w"])
        if toggles.fc:
            f_final = relation.calibrate(f_final, p, params.alpha, detach_scale=detach_calibration)
    logits = relation.relation_logits(
        f_final,
        params.blocks["final_w"],
        bias_table=params.bias_table if toggles.bias else None,
        subj_class=subj_class,
        obj_class=obj_class,
    )
    return PairOutput(f_t=f_t, p=p, f_final=f_final, logits=logits)

"""Relation head: triple-feature assembly and the knowledge-transfer stack.

Pipeline per object pair: triple feature -> coarse relation distribution ->
hallucinated feature (codeword mixture) -> attention fusion -> calibration ->
final relation classifier (optionally plus a statistical-bias log-prior).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class RelationCodebook:
    """One learnable prototype vector per relation, plus the inter-group margin."""

    codewords: Tensor  # (n_relations, d_t)
    margin: float

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("codebook margin must be positive")
        if not np.all(np.isfinite(self.codewords.value)):
            raise ValueError("codebook entries must be finite")

    @property
    def n_relations(self) -> int:
        return self.codewords.value.shape[0]


def triple_feature(f_i: Tensor, f_u: Tensor, f_j: Tensor, s_lifted: Tensor) -> Tensor:
    """[f_i * f_u * f_j ; s_lifted]: three-way elementwise product, then the
    lifted relative-spatial tail."""
    return ad.concat(ad.mul(ad.mul(f_i, f_u), f_j), s_lifted)


def init_codebook(features, labels, n_relations: int, margin: float, rng=None) -> RelationCodebook:
    """Per-relation centroids of the given triple features.

    Lloyd's algorithm with one cluster per relation reduces to the mean of
    that relation's samples. Relations with no samples fall back to a small
    N(0, 0.01^2) draw from `rng`.
    """
    if n_relations <= 0:
        raise ValueError("init_codebook: n_relations must be positive")
    features = [np.asarray(f, dtype=np.float64) for f in features]
    labels = list(labels)
    if len(features) != len(labels):
        raise ValueError("init_codebook: features and labels length mismatch")
    if not features:
        raise ValueError("init_codebook: need at least one labeled sample")
    for r in labels:
        if not 0 <= r < n_relations:
            raise ValueError(f"init_codebook: relation id {r} out of range")
    d = features[0].shape[0]
    if rng is None:
        rng = np.random.default_rng(0)
    D = np.empty((n_relations, d), dtype=np.float64)
    by_rel: dict[int, list[np.ndarray]] = {}
    for f, r in zip(features, labels):
        by_rel.setdefault(int(r), []).append(f)
    for r in range(n_relations):
        if r in by_rel:
            D[r] = np.mean(by_rel[r], axis=0)
        else:
            D[r] = rng.normal(0.0, 0.01, size=d)
    return RelationCodebook(Tensor(D, requires_grad=True), margin)


def codeword_loss(f: Tensor, relation_label: int, codebook: RelationCodebook) -> Tensor:
    """Pull f toward its relation's codeword (mean-L1), hinge-push the rest
    beyond the margin. Fused kernel: gradients flow to f and the codebook."""
    D = codebook.codewords
    R, d = D.value.shape
    if not 0 <= relation_label < R:
        raise ValueError(f"codeword_loss: invalid relation label {relation_label}")
    diffs = f.value[None, :] - D.value  # (R, d)
    dists = np.abs(diffs).mean(axis=1)
    hinge_active = codebook.margin - dists > 0
    hinge_active[relation_label] = False
    loss = dists[relation_label] + np.maximum(
        0.0, codebook.margin - np.delete(dists, relation_label)
    ).sum()
    signs = np.sign(diffs) / d  # subgradient 0 at ties

    def vjp(g):
        gf = signs[relation_label].copy()
        gf -= signs[hinge_active].sum(axis=0)
        gD = np.zeros_like(D.value)
        gD[relation_label] = -signs[relation_label]
        gD[hinge_active] = signs[hinge_active]
        return (float(g) * gf, float(g) * gD)

    return ad._node(loss, (f, D), vjp)


def coarse_predict(f: Tensor, coarse_w: Tensor, coarse_b: Tensor) -> Tensor:
    """Softmax distribution over relation types from a linear head on the
    triple feature."""
    return ad.softmax(ad.add(ad.matvec(coarse_w, f), coarse_b))


def coarse_loss(p: Tensor, relation_label: int) -> Tensor:
    """Cross-entropy of the coarse distribution against the true relation."""
    return ad.scale(ad.log(ad.pick(p, relation_label)), -1.0)


def hallucinate(p: Tensor, codebook: RelationCodebook) -> Tensor:
    """Probability-weighted mixture of codewords: sum_r p_r d_r."""
    if abs(float(p.value.sum()) - 1.0) > 1e-5:
        raise ValueError("hallucinate: p is not normalized")
    return ad.matvec_t(codebook.codewords, p)


def fuse(f: Tensor, f_hall: Tensor, w_f: Tensor) -> Tensor:
    """Additive attention between the raw and hallucinated triple features:
    a = relu(w_f . (f + f_hall)); returns f + a * f_hall."""
    a = ad.relu(ad.dot(w_f, ad.add(f, f_hall)))
    return ad.add(f, ad.smul(a, f_hall))


def calibrate(f_fused: Tensor, p: Tensor, alpha: float, detach_scale: bool = False) -> Tensor:
    """Rescale by alpha * max(p): confident (head) features keep a large
    scale, uncertain (tail) ones shrink. `detach_scale` cuts the gradient
    through max(p) for stability experiments."""
    if alpha <= 0:
        raise ValueError("calibrate: alpha must be positive")
    s = ad.vmax(p)
    if detach_scale:
        s = s.detach()
    return ad.smul(ad.scale(s, alpha), f_fused)


def relation_logits(
    f: Tensor,
    final_w: Tensor,
    bias_table: np.ndarray | None = None,
    subj_class: int | None = None,
    obj_class: int | None = None,
) -> Tensor:
    """Bias-free linear relation classifier, optionally shifted by the
    statistical log-prior for the (subject class, object class) pair."""
    logits = ad.matvec(final_w, f)
    if bias_table is not None:
        if subj_class is None or obj_class is None:
            raise ValueError("relation_logits: bias enabled but class ids missing")
        prior = ad.Tensor(bias_table[subj_class, obj_class])
        logits = ad.add(logits, prior)
    return logits


def build_bias_table(triples, object_labels, n_classes: int, n_relations: int) -> np.ndarray:
    """Log of the add-1-smoothed empirical predicate distribution per
    (subject class, object class) pair.

    `triples` iterates (scene_index, subj_idx, relation, obj_idx) resolved
    through `object_labels[scene_index]`.
    """
    counts = np.ones((n_classes, n_classes, n_relations), dtype=np.float64)
    for scene_idx, si, r, oi in triples:
        labels = object_labels[scene_idx]
        counts[labels[si], labels[oi], r] += 1.0
    return np.log(counts / counts.sum(axis=2, keepdims=True))

"""Scene-object interaction: additive attention between each object feature
and the shared per-image scene feature, the weighted multi-label scene loss,
and a small object-classification head for the SGCls task."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def interaction_coefficient(f_o: ad.Tensor, f_s: ad.Tensor, w_g: ad.Tensor) -> ad.Tensor:
    """relu(w_g . (f_o + f_s)): non-negative scalar coupling of object and scene."""
    return ad.relu(ad.dot(w_g, ad.add(f_o, f_s)))


def refine_object_feature(f_o: ad.Tensor, f_s: ad.Tensor, a_i: ad.Tensor) -> ad.Tensor:
    """f_o + a_i * f_s; exactly f_o when the coefficient is zero."""
    return ad.add(f_o, ad.smul(a_i, f_s))


def class_weights(train_object_counts) -> np.ndarray:
    """Inverse-frequency class weights rescaled to mean 1.

    Classes absent from the training set get the maximum finite weight
    (before rescaling), so rare-but-present classes stay dominant.
    """
    counts = np.asarray(train_object_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("class_weights: expected a nonempty count vector")
    if np.any(counts < 0):
        raise ValueError("class_weights: negative count")
    total = counts.sum()
    if total == 0:
        raise ValueError("class_weights: all counts are zero")
    w = np.zeros_like(counts)
    seen = counts > 0
    w[seen] = total / counts[seen]
    if not np.all(seen):
        w[~seen] = w[seen].max()
    return w / w.mean()


def scene_multilabel_loss(
    f_s: ad.Tensor,
    multilabel_w: ad.Tensor,
    multilabel_b: ad.Tensor,
    multilabel_target,
    weights,
) -> ad.Tensor:
    """Weighted multi-label BCE on sigmoid outputs of a linear head over f_s."""
    target = np.asarray(multilabel_target, dtype=np.float64)
    if target.sum() < 1:
        raise ValueError("scene_multilabel_loss: target has no positive entry")
    logits = ad.add(ad.matvec(multilabel_w, f_s), multilabel_b)
    p = ad.sigmoid(logits)
    return ad.weighted_bce(p, target, weights)


def classify_objects(f_refined: ad.Tensor, object_w: ad.Tensor, object_b: ad.Tensor) -> ad.Tensor:
    """Softmax distribution over object classes from a refined object feature."""
    return ad.softmax(ad.add(ad.matvec(object_w, f_refined), object_b))


def object_class_loss(f_refined: ad.Tensor, object_w: ad.Tensor, object_b: ad.Tensor, label: int) -> ad.Tensor:
    """Cross-entropy training signal for the SGCls object head."""
    return ad.cross_entropy_logits(ad.add(ad.matvec(object_w, f_refined), object_b), label)

"""Recall@K evaluation: PredCls / SGCls / SGDet-from-file scoring, constrained
and unconstrained ranking, mean recall, and per-relation tail reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import NONE_RELATION, SceneSample, SceneObject
from .geometry import BoundingBox, lift_spatial, relative_spatial
from .interaction import classify_objects
from .model import ModelParams, Toggles, pair_forward, refine_objects, scene_feature_tensor

TASKS = ("predcls", "sgcls", "sgdet")
MODES = ("constrained", "unconstrained")
DEFAULT_KS = (20, 50, 100)


@dataclass(frozen=True, slots=True)
class RankedTriple:
    subject: int
    relation: int
    object: int
    score: float
    subj_prob: float
    pred_prob: float
    obj_prob: float
    pair_index: int
    subj_class: int = -1
    obj_class: int = -1


@dataclass
class MetricsReport:
    # results[task][mode][K] -> recall
    results: dict[str, dict[str, dict[int, float]]]
    mean_recall: float = 0.0
    per_relation: list[dict] | None = None
    vacuous: bool = False  # some scene had an empty ground-truth set

    def finalize(self):
        cells = [
            v
            for task in self.results.values()
            for mode in task.values()
            for v in mode.values()
        ]
        self.mean_recall = float(np.mean(cells)) if cells else 0.0
        return self

    def to_json(self) -> str:
        return json.dumps(
            {
                "results": {
                    t: {m: {str(k): v for k, v in ks.items()} for m, ks in modes.items()}
                    for t, modes in self.results.items()
                },
                "mean_recall": self.mean_recall,
                "per_relation": self.per_relation,
                "vacuous": self.vacuous,
            },
            indent=2,
        )

    def to_text(self) -> str:
        lines = []
        header = f"{'task':<8} {'mode':<14}" + "".join(
            f"{'R@' + str(k):>9}" for k in self._ks()
        )
        lines.append(header)
        for task, modes in self.results.items():
            for mode, ks in modes.items():
                row = f"{task:<8} {mode:<14}" + "".join(
                    f"{100 * ks[k]:>9.2f}" for k in sorted(ks)
                )
                lines.append(row)
        lines.append(f"mean recall: {100 * self.mean_recall:.2f}")
        if self.per_relation is not None:
            lines.append("")
            lines.append(f"{'relation':>9} {'train_count':>12} " + " ".join(
                f"{'R@' + str(k):>8}" for k in sorted(self.per_relation[0]["recall"])
            ))
            for row in self.per_relation:
                cells = " ".join(
                    f"{100 * v:>8.2f}" if v is not None else f"{'null':>8}"
                    for _, v in sorted(row["recall"].items())
                )
                lines.append(f"{row['relation']:>9} {row['train_count']:>12} {cells}")
        return "\n".join(lines)

    def _ks(self):
        for modes in self.results.values():
            for ks in modes.values():
                return sorted(ks)
        return []


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x_b, b.x_b) - max(a.x_t, b.x_t))
    iy = max(0.0, min(a.y_b, b.y_b) - max(a.y_t, b.y_t))
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


def _pair_predicate_scores(params: ModelParams, scene: SceneSample, toggles: Toggles):
    """Per ordered pair: relation logits (bias excluded; added separately).

    Returns (pairs, logits_per_pair) with pairs in lexicographic order.
    """
    feats = [o.feature for o in scene.objects]
    no_bias = Toggles(so=toggles.so, kt=toggles.kt, fc=toggles.fc, bias=False)
    with ad.no_grad():
        f_s = scene_feature_tensor(params, scene.scene_feature, feats)
        refined = refine_objects(params, f_s, feats, toggles)
        n = len(scene.objects)
        pairs, logits = [], []
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                s_raw = relative_spatial(scene.objects[i].box, scene.objects[j].box)
                s_lift = lift_spatial(s_raw, params.blocks["lift_w"], params.blocks["lift_b"])
                out = pair_forward(
                    params, refined[i], refined[j], scene.union_feature(i, j), s_lift, no_bias
                )
                pairs.append((i, j))
                logits.append(out.logits.value)
        object_dists = [
            classify_objects(refined[i], params.blocks["object_w"], params.blocks["object_b"]).value
            for i in range(n)
        ]
    return pairs, logits, object_dists


def _predicate_distribution(logits: np.ndarray) -> np.ndarray:
    """Softmax over non-none relations; index r-1 holds relation id r."""
    z = logits[1:] - logits[1:].max()
    e = np.exp(z)
    return e / e.sum()


def score_scene(
    params: ModelParams,
    scene: SceneSample,
    task: str,
    toggles: Toggles,
) -> list[RankedTriple]:
    """Score every ordered object pair under the task's protocol.

    PredCls fixes subject/object class probabilities at 1 using ground-truth
    labels; SGCls takes them from the object head. SGDet scenes are built
    from a detections file first (see scene_from_detections)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    scores = _pair_predicate_scores(params, scene, toggles)
    return _candidates_from_scores(params, scene, task, toggles, scores)


def _task_classes_probs(scene: SceneSample, task: str, object_dists):
    """Object classes and class probabilities under the task's protocol."""
    if task == "predcls":
        return [o.label for o in scene.objects], [1.0] * len(scene.objects)
    classes = [int(np.argmax(d)) for d in object_dists]
    if task == "sgdet":
        # detection scenes carry class-score vectors in place of features'
        # head output; scene_from_detections stores them on the sample
        stored = getattr(scene, "class_scores", None)
        if stored is not None:
            classes = [int(np.argmax(s)) for s in stored]
            return classes, [float(s[c]) for s, c in zip(stored, classes)]
    return classes, [float(d[c]) for d, c in zip(object_dists, classes)]


def _candidates_from_scores(
    params: ModelParams,
    scene: SceneSample,
    task: str,
    toggles: Toggles,
    scores,
) -> list[RankedTriple]:
    """Task-specific post-processing of one shared forward pass (`scores`
    is the `_pair_predicate_scores` result for the scene)."""
    pairs, logits, object_dists = scores
    n_rel = params.dims.n_relations
    classes, probs = _task_classes_probs(scene, task, object_dists)
    out = []
    for pair_index, ((i, j), z) in enumerate(zip(pairs, logits)):
        if toggles.bias and params.bias_table is not None:
            z = z + params.bias_table[classes[i], classes[j]]
        dist = _predicate_distribution(z)
        for r in range(1, n_rel):
            pred_prob = float(dist[r - 1])
            sp, op = probs[i], probs[j]
            out.append(
                RankedTriple(
                    subject=i,
                    relation=r,
                    object=j,
                    score=sp * pred_prob * op,
                    subj_prob=sp,
                    pred_prob=pred_prob,
                    obj_prob=op,
                    pair_index=pair_index,
                    subj_class=classes[i],
                    obj_class=classes[j],
                )
            )
    return out


def _fast_mode_topk(
    params: ModelParams,
    scene: SceneSample,
    task: str,
    toggles: Toggles,
    scores,
    depth: int,
    modes=MODES,
) -> dict[str, list[tuple[int, int, int]]]:
    """Leading `depth` (subject, relation, object) triples per mode.

    Vectorized shortcut with the same ordering and tie rules as
    `rank(score_scene(...), mode)`; used by `evaluate` where the full
    RankedTriple list is not needed.
    """
    pairs, logits, object_dists = scores
    n_rel = params.dims.n_relations
    classes, probs = _task_classes_probs(scene, task, object_dists)
    n_pairs = len(pairs)
    out: dict[str, list[tuple[int, int, int]]] = {m: [] for m in modes}
    if not n_pairs:
        return out
    S = np.empty((n_pairs, n_rel - 1))
    for pi, ((i, j), z) in enumerate(zip(pairs, logits)):
        if toggles.bias and params.bias_table is not None:
            z = z + params.bias_table[classes[i], classes[j]]
        S[pi] = (probs[i] * _predicate_distribution(z)) * probs[j]
    subj = np.array([i for i, _ in pairs])
    obj = np.array([j for _, j in pairs])
    for mode in modes:
        if mode == "constrained":
            # argmax returns the first maximum: the lowest relation id wins
            # score ties, as in rank()
            br = S.argmax(axis=1)
            sc = S[np.arange(n_pairs), br]
            order = np.lexsort((br, np.arange(n_pairs), -sc))[:depth]
            out[mode] = [
                (int(subj[p]), int(br[p]) + 1, int(obj[p])) for p in order
            ]
        else:
            order = np.lexsort(
                (
                    np.tile(np.arange(n_rel - 1), n_pairs),
                    np.repeat(np.arange(n_pairs), n_rel - 1),
                    -S.ravel(),
                )
            )[:depth]
            out[mode] = [
                (int(subj[p]), int(r) + 1, int(obj[p]))
                for p, r in zip(order // (n_rel - 1), order % (n_rel - 1))
            ]
    return out


def rank(candidates: list[RankedTriple], mode: str) -> list[RankedTriple]:
    """Order candidates by score descending; constrained mode first keeps only
    the top-scoring predicate per ordered pair. Ties break by (pair index,
    relation id) ascending."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    pool = candidates
    if mode == "constrained":
        best: dict[int, RankedTriple] = {}
        for c in pool:
            cur = best.get(c.pair_index)
            if (
                cur is None
                or c.score > cur.score
                or (c.score == cur.score and c.relation < cur.relation)
            ):
                best[c.pair_index] = c
        pool = list(best.values())
    return sorted(pool, key=lambda c: (-c.score, c.pair_index, c.relation))


def recall_at_k(ranked: list[RankedTriple], gt_triples, k: int) -> tuple[float, bool]:
    """Fraction of distinct GT (subject idx, relation, object idx) triples in
    the top k. Empty GT is vacuous recall 1.0, flagged."""
    if k <= 0:
        raise ValueError("recall_at_k: k must be positive")
    gt = {(si, r, oi) for si, r, oi in gt_triples}
    if not gt:
        return 1.0, True
    hits = {
        (c.subject, c.relation, c.object)
        for c in ranked[:k]
        if (c.subject, c.relation, c.object) in gt
    }
    return len(hits) / len(gt), False


def sgdet_matches(ranked, det_scene, gt_scene, iou_threshold: float = 0.5):
    """For each ranked detection triple, the GT triples it matches: relation
    equal, predicted classes equal GT classes, both boxes at IoU >= 0.5."""
    gt = list(dict.fromkeys(gt_scene.gt_triples))
    matches = []
    for c in ranked:
        hit = []
        db_s = det_scene.objects[c.subject].box
        db_o = det_scene.objects[c.object].box
        for g_idx, (si, r, oi) in enumerate(gt):
            if r != c.relation:
                continue
            if c.subj_class != gt_scene.objects[si].label:
                continue
            if c.obj_class != gt_scene.objects[oi].label:
                continue
            if iou(db_s, gt_scene.objects[si].box) < iou_threshold:
                continue
            if iou(db_o, gt_scene.objects[oi].box) < iou_threshold:
                continue
            hit.append(g_idx)
        matches.append(hit)
    return matches, len(gt)


def sgdet_recall_at_k(matches, n_gt: int, k: int) -> tuple[float, bool]:
    if n_gt == 0:
        return 1.0, True
    found = set()
    for hit in matches[:k]:
        found.update(hit)
    return len(found) / n_gt, False


@dataclass
class DetectionScene(SceneSample):
    class_scores: list[np.ndarray] = field(default_factory=list)


def load_detections(path: str, d_v: int, n_classes: int) -> dict[str, DetectionScene]:
    """Line-delimited JSON: per image, detected boxes, class-score vectors,
    and d_v features."""
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"detections line {line_no}: malformed JSON ({e})") from None
            for fld in ("image_id", "detections"):
                if fld not in rec:
                    raise ValueError(f"detections line {line_no}: missing field '{fld}'")
            objects, scores = [], []
            for d in rec["detections"]:
                box = BoundingBox(*d["box"])
                s = np.asarray(d["class_scores"], dtype=np.float64)
                f = np.asarray(d["feature"], dtype=np.float64)
                if s.shape != (n_classes,) or f.shape != (d_v,):
                    raise ValueError(
                        f"detections line {line_no}: bad class_scores/feature shape"
                    )
                objects.append(SceneObject(box=box, label=int(np.argmax(s)), feature=f))
                scores.append(s)
            out[rec["image_id"]] = DetectionScene(
                image_id=rec["image_id"],
                objects=objects,
                scene_feature=None,  # learned projection fallback kicks in
                union_features={},
                gt_triples=[],
                class_scores=scores,
            )
    return out


def evaluate(
    params: ModelParams,
    scenes: list[SceneSample],
    toggles: Toggles,
    tasks=("predcls", "sgcls"),
    ks=DEFAULT_KS,
    modes=MODES,
    detections: dict | None = None,
) -> MetricsReport:
    """Recall@K over the given scenes for every (task, mode, K) cell."""
    if "sgdet" in tasks and detections is None:
        raise ValueError("sgdet evaluation requires a detections file")
    sums = {t: {m: {k: 0.0 for k in ks} for m in modes} for t in tasks}
    counts = {t: 0 for t in tasks}
    vacuous = False
    for scene in scenes:
        shared = None
        for task in tasks:
            if task == "sgdet":
                det = detections.get(scene.image_id)
                if det is None:
                    continue
                cands = score_scene(params, det, task, toggles)
                counts[task] += 1
                for mode in modes:
                    ranked = rank(cands, mode)
                    for k in ks:
                        matches, n_gt = sgdet_matches(ranked, det, scene)
                        r, vac = sgdet_recall_at_k(matches, n_gt, k)
                        sums[task][mode][k] += r
                        vacuous = vacuous or vac
                continue
            # predcls and sgcls differ only in post-processing, so the
            # forward pass over the scene's pairs is shared
            if shared is None:
                shared = _pair_predicate_scores(params, scene, toggles)
            top = _fast_mode_topk(params, scene, task, toggles, shared, max(ks), modes)
            gt = {(si, r, oi) for si, r, oi in scene.gt_triples}
            counts[task] += 1
            for mode in modes:
                for k in ks:
                    if not gt:
                        r, vac = 1.0, True
                    else:
                        r = len(gt.intersection(top[mode][:k])) / len(gt)
                        vac = False
                    sums[task][mode][k] += r
                    vacuous = vacuous or vac
    results = {
        t: {m: {k: (sums[t][m][k] / counts[t] if counts[t] else 0.0) for k in ks} for m in modes}
        for t in tasks
    }
    return MetricsReport(results=results, vacuous=vacuous).finalize()


def tail_recall(
    params: ModelParams,
    scenes: list[SceneSample],
    toggles: Toggles,
    relations,
    k: int = 50,
) -> float:
    """Unconstrained PredCls R@k averaged over the given relations, each
    scored over its own GT triples. Relations without test instances are
    skipped; returns 0.0 if none have instances."""
    hits = {r: 0 for r in relations}
    totals = {r: 0 for r in relations}
    for scene in scenes:
        if not scene.gt_triples:
            continue
        shared = _pair_predicate_scores(params, scene, toggles)
        top = set(
            _fast_mode_topk(
                params, scene, "predcls", toggles, shared, k, ("unconstrained",)
            )["unconstrained"]
        )
        for si, r, oi in dict.fromkeys(scene.gt_triples):
            if r in totals:
                totals[r] += 1
                if (si, r, oi) in top:
                    hits[r] += 1
    vals = [hits[r] / totals[r] for r in relations if totals[r]]
    return float(np.mean(vals)) if vals else 0.0


def per_relation_report(
    params: ModelParams,
    scenes: list[SceneSample],
    toggles: Toggles,
    train_relation_counts,
    bottom_n: int = 10,
    ks=(50, 100),
    mode: str = "unconstrained",
) -> list[dict]:
    """Unconstrained PredCls recall per relation over only that relation's GT
    triples; rows are the bottom_n relations by training frequency. Relations
    with zero test instances report null recalls."""
    n_rel = params.dims.n_relations
    counts = np.asarray(train_relation_counts)
    hits = {r: {k: 0 for k in ks} for r in range(1, n_rel)}
    totals = {r: 0 for r in range(1, n_rel)}
    for scene in scenes:
        if not scene.gt_triples:
            continue
        ranked = rank(score_scene(params, scene, "predcls", toggles), mode)
        top = {k: {(c.subject, c.relation, c.object) for c in ranked[:k]} for k in ks}
        for si, r, oi in dict.fromkeys(scene.gt_triples):
            totals[r] += 1
            for k in ks:
                if (si, r, oi) in top[k]:
                    hits[r][k] += 1
    order = sorted(range(1, n_rel), key=lambda r: (counts[r], r))
    rows = []
    for r in order[:bottom_n]:
        rec = {
            k: (hits[r][k] / totals[r] if totals[r] else None) for k in ks
        }
        rows.append(
            {
                "relation": r,
                "train_count": int(counts[r]),
                "test_count": totals[r],
                "recall": rec,
            }
        )
    return rows

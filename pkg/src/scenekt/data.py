"""Synthetic long-tail scene generation, dataset I/O, and checkpoints.

Datasets are line-delimited JSON (one scene per line) with a sibling
meta.json carrying dimensions and the training-split relation histogram.
Checkpoints are a single JSON document: header (version, config hash,
block shapes) plus base64-encoded float64 blocks, bit-exact on round-trip.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor
from .geometry import BoundingBox
from .model import FORMAT_VERSION, ModelDims, ModelParams, _block_shapes

NONE_RELATION = 0  # reserved id for "no relationship"


@dataclass
class SceneObject:
    box: BoundingBox
    label: int
    feature: np.ndarray


@dataclass
class SceneSample:
    image_id: str
    objects: list[SceneObject]
    scene_feature: np.ndarray | None
    union_features: dict[tuple[int, int], np.ndarray]
    gt_triples: list[tuple[int, int, int]]  # (subject idx, relation id, object idx)

    def validate(self, n_classes: int, n_relations: int):
        n = len(self.objects)
        for obj in self.objects:
            if not 0 <= obj.label < n_classes:
                raise ValueError(f"{self.image_id}: object label {obj.label} out of range")
        for si, r, oi in self.gt_triples:
            if not (0 <= si < n and 0 <= oi < n):
                raise ValueError(f"{self.image_id}: triple index out of range")
            if si == oi:
                raise ValueError(f"{self.image_id}: triple with subject == object")
            if not 0 <= r < n_relations:
                raise ValueError(f"{self.image_id}: relation id {r} out of range")

    def union_feature(self, i: int, j: int) -> np.ndarray:
        """Stored union-region feature, or the mean-of-endpoints fallback."""
        f = self.union_features.get((i, j))
        if f is not None:
            return f
        return 0.5 * (self.objects[i].feature + self.objects[j].feature)

    def multilabel_target(self, n_classes: int) -> np.ndarray:
        t = np.zeros(n_classes)
        for obj in self.objects:
            t[obj.label] = 1.0
        return t


@dataclass(frozen=True)
class GeneratorConfig:
    n_object_classes: int = 150
    n_relations: int = 50
    zipf_exponent: float = 1.5
    objects_min: int = 5
    objects_max: int = 12
    scenes: int = 3000
    d_v: int = 64
    d_s: int = 16
    noise_sigma: float = 0.3
    test_fraction: float = 0.1
    scene_groups: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_object_classes < 1 or self.n_relations < 2 or self.scenes < 1:
            raise ValueError("counts must be positive (and at least one non-none relation)")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be non-negative")
        if self.objects_min < 2 or self.objects_max < self.objects_min:
            raise ValueError("objects_per_scene range needs at least 2 objects")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.d_v, self.d_s, self.n_object_classes, self.n_relations)


@dataclass
class Dataset:
    config: GeneratorConfig
    train: list[SceneSample]
    test: list[SceneSample]

    @property
    def dims(self) -> ModelDims:
        return self.config.dims

    def relation_counts(self, split: str = "train") -> np.ndarray:
        scenes = self.train if split == "train" else self.test
        counts = np.zeros(self.config.n_relations, dtype=np.int64)
        for s in scenes:
            for _, r, _ in s.gt_triples:
                counts[r] += 1
        return counts

    def object_class_counts(self) -> np.ndarray:
        counts = np.zeros(self.config.n_object_classes, dtype=np.int64)
        for s in self.train:
            for obj in s.objects:
                counts[obj.label] += 1
        return counts


def zipf_weights(n_relations: int, exponent: float) -> np.ndarray:
    """Normalized Zipf mass over relation ids 1..n_relations-1 (none excluded).

    Index 0 of the returned array is the weight of relation id 1.
    """
    ranks = np.arange(1, n_relations, dtype=np.float64)
    w = ranks ** (-exponent)
    return w / w.sum()


def generate(config: GeneratorConfig) -> Dataset:
    """Build a learnable long-tail scene dataset, deterministic in the seed.

    Latent structure: every object class has a near-unity prototype feature;
    relations share union-region prototypes in cross-group pairs, so the
    scene-group component of the scene feature is the only signal that
    disambiguates a pair; object classes and box offsets are correlated with
    the relation so the bias prior and spatial encoding both carry signal.
    """
    cfg = config
    R, C = cfg.n_relations, cfg.n_object_classes
    G = max(1, min(cfg.scene_groups, R - 1))
    rng = np.random.default_rng([cfg.seed, 1000])

    class_proto = 1.0 + 0.25 * rng.normal(size=(C, cfg.d_v))
    # relations 1..R-1; consecutive ids share a union prototype but live in
    # different scene groups
    proto_id = [(r - 1) // 2 for r in range(R)]
    union_proto = rng.normal(1.0, 0.5, size=((R - 1) // 2 + 1, cfg.d_v))
    group_of = [(r - 1) % G for r in range(R)]
    group_proto = rng.normal(0.0, 1.0, size=(G, cfg.d_v))
    class_embed = rng.normal(0.0, 1.0, size=(C, cfg.d_v))
    # preferred endpoint classes and box offsets are shared within each union
    # prototype pair, so neither endpoints nor geometry separate the pair;
    # only the scene feature does
    n_protos = (R - 1) // 2 + 1
    pref_subj = rng.integers(0, C, size=n_protos)
    pref_obj = rng.integers(0, C, size=n_protos)
    rel_angle = 2.0 * np.pi * np.arange(n_protos) / n_protos

    w = zipf_weights(R, cfg.zipf_exponent)

    def random_box(rng) -> BoundingBox:
        w_ = rng.uniform(0.08, 0.35)
        h_ = rng.uniform(0.08, 0.35)
        x = rng.uniform(0.0, 1.0 - w_)
        y = rng.uniform(0.0, 1.0 - h_)
        return BoundingBox(x, y, x + w_, y + h_)

    def offset_box(rng, base: BoundingBox, r: int) -> BoundingBox:
        # object box displaced from the subject along a relation-specific
        # direction, so the relative-spatial feature is informative
        dx = 0.2 * np.cos(rel_angle[proto_id[r]]) + 0.05 * rng.normal()
        dy = 0.2 * np.sin(rel_angle[proto_id[r]]) + 0.05 * rng.normal()
        w_ = rng.uniform(0.08, 0.35)
        h_ = rng.uniform(0.08, 0.35)
        x = float(np.clip(base.x_t + dx, 0.0, 1.0 - w_))
        y = float(np.clip(base.y_t + dy, 0.0, 1.0 - h_))
        return BoundingBox(x, y, x + w_, y + h_)

    scenes: list[SceneSample] = []
    for idx in range(cfg.scenes):
        srng = np.random.default_rng([cfg.seed, 2000, idx])
        n_obj = int(srng.integers(cfg.objects_min, cfg.objects_max + 1))
        n_trip = int(srng.integers(max(2, n_obj - 2), n_obj + 3))

        labels = np.full(n_obj, -1, dtype=np.int64)
        boxes: list[BoundingBox | None] = [None] * n_obj
        triples: list[tuple[int, int, int]] = []
        used_pairs: set[tuple[int, int]] = set()
        all_rels = np.arange(1, R)
        for _ in range(n_trip):
            r = int(srng.choice(all_rels, p=w))
            for _attempt in range(10):
                si, oi = srng.choice(n_obj, size=2, replace=False)
                if (int(si), int(oi)) not in used_pairs:
                    break
            else:
                continue
            si, oi = int(si), int(oi)
            used_pairs.add((si, oi))
            if labels[si] < 0:
                labels[si] = pref_subj[proto_id[r]] if srng.random() < 0.8 else srng.integers(0, C)
            if labels[oi] < 0:
                labels[oi] = pref_obj[proto_id[r]] if srng.random() < 0.8 else srng.integers(0, C)
            if boxes[si] is None:
                boxes[si] = random_box(srng)
            if boxes[oi] is None:
                boxes[oi] = offset_box(srng, boxes[si], r)
            triples.append((si, r, oi))
        for i in range(n_obj):
            if labels[i] < 0:
                labels[i] = srng.integers(0, C)
            if boxes[i] is None:
                boxes[i] = random_box(srng)

        objects = [
            SceneObject(
                box=boxes[i],
                label=int(labels[i]),
                feature=class_proto[labels[i]] + cfg.noise_sigma * srng.normal(size=cfg.d_v),
            )
            for i in range(n_obj)
        ]
        union_features = {
            (si, oi): union_proto[proto_id[r]] + cfg.noise_sigma * srng.normal(size=cfg.d_v)
            for si, r, oi in triples
        }
        present = np.zeros(C)
        present[labels] = 1.0
        # the scene feature carries the mean group prototype of the relations
        # actually present, so it is the only input that disambiguates the two
        # relations sharing each union prototype
        if triples:
            group_component = np.mean(
                [group_proto[group_of[r]] for _, r, _ in triples], axis=0
            )
        else:
            group_component = np.zeros(cfg.d_v)
        scene_feature = (
            group_component
            + 0.3 * (present @ class_embed) / max(1, int(present.sum()))
            + 0.1 * srng.normal(size=cfg.d_v)
        )
        sample = SceneSample(
            image_id=f"scene-{idx:06d}",
            objects=objects,
            scene_feature=scene_feature,
            union_features=union_features,
            gt_triples=triples,
        )
        sample.validate(C, R)
        scenes.append(sample)

    n_test = max(1, int(round(cfg.test_fraction * cfg.scenes)))
    return Dataset(config=cfg, train=scenes[n_test:], test=scenes[:n_test])


# ---------------------------------------------------------------------------
# dataset serialization


def _scene_to_record(s: SceneSample) -> dict:
    return {
        "image_id": s.image_id,
        "objects": [
            {
                "box": list(o.box.as_array()),
                "label": int(o.label),
                "feature": [float(x) for x in o.feature],
            }
            for o in s.objects
        ],
        "scene_feature": None
        if s.scene_feature is None
        else [float(x) for x in s.scene_feature],
        "union_features": {
            f"{i},{j}": [float(x) for x in f] for (i, j), f in sorted(s.union_features.items())
        },
        "gt_triples": [[int(a), int(r), int(b)] for a, r, b in s.gt_triples],
    }


def _scene_from_record(rec: dict, line_no: int, n_classes: int | None, n_relations: int | None) -> SceneSample:
    def fail(msg):
        raise ValueError(f"line {line_no}: {msg}")

    for fld in ("image_id", "objects", "scene_feature", "union_features", "gt_triples"):
        if fld not in rec:
            fail(f"missing field '{fld}'")
    if rec["scene_feature"] is None:
        fail("missing field 'scene_feature'")
    objects = []
    for o in rec["objects"]:
        try:
            box = BoundingBox(*o["box"])
        except (KeyError, TypeError, ValueError) as e:
            fail(f"bad object box: {e}")
        objects.append(
            SceneObject(box=box, label=int(o["label"]), feature=np.asarray(o["feature"], dtype=np.float64))
        )
    union_features = {}
    for key, f in rec["union_features"].items():
        i, j = (int(x) for x in key.split(","))
        union_features[(i, j)] = np.asarray(f, dtype=np.float64)
    triples = [tuple(int(x) for x in t) for t in rec["gt_triples"]]
    sample = SceneSample(
        image_id=rec["image_id"],
        objects=objects,
        scene_feature=np.asarray(rec["scene_feature"], dtype=np.float64),
        union_features=union_features,
        gt_triples=triples,
    )
    if n_classes is not None and n_relations is not None:
        try:
            sample.validate(n_classes, n_relations)
        except ValueError as e:
            fail(str(e))
    return sample


def save_dataset(dataset: Dataset, out_dir: str):
    """Write train.jsonl, test.jsonl and meta.json under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    for split in ("train", "test"):
        with open(os.path.join(out_dir, f"{split}.jsonl"), "w") as fh:
            for s in getattr(dataset, split):
                fh.write(json.dumps(_scene_to_record(s)) + "\n")
    meta = {
        "format": "scenekt-dataset",
        "version": FORMAT_VERSION,
        "config": asdict(dataset.config),
        "relation_histogram": [int(c) for c in dataset.relation_counts("train")],
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_split(path: str, n_classes: int | None = None, n_relations: int | None = None) -> list[SceneSample]:
    scenes = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {line_no}: malformed JSON ({e})") from None
            scenes.append(_scene_from_record(rec, line_no, n_classes, n_relations))
    return scenes


def load_dataset(dir_path: str) -> Dataset:
    """Load a directory written by save_dataset; validates every record."""
    with open(os.path.join(dir_path, "meta.json")) as fh:
        meta = json.load(fh)
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError(
            f"dataset version {meta.get('version')} != supported {FORMAT_VERSION}"
        )
    cfg = GeneratorConfig(**meta["config"])
    train = load_split(os.path.join(dir_path, "train.jsonl"), cfg.n_object_classes, cfg.n_relations)
    test = load_split(os.path.join(dir_path, "test.jsonl"), cfg.n_object_classes, cfg.n_relations)
    return Dataset(config=cfg, train=train, test=test)


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=np.float64).tobytes()).decode()


def _decode_array(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype=np.float64).reshape(shape).copy()


def config_hash(dims: ModelDims) -> str:
    return hashlib.sha256(json.dumps(asdict(dims), sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(params: ModelParams, path: str):
    doc = {
        "format": "scenekt-checkpoint",
        "version": FORMAT_VERSION,
        "config_hash": config_hash(params.dims),
        "dims": asdict(params.dims),
        "alpha": params.alpha,
        "margin": params.margin,
        "block_shapes": {k: list(v.value.shape) for k, v in params.blocks.items()},
        "blocks": {k: _encode_array(v.value) for k, v in params.blocks.items()},
        "class_weights": None
        if params.class_weights is None
        else _encode_array(params.class_weights),
        "bias_table": None if params.bias_table is None else _encode_array(params.bias_table),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str, expect_dims: ModelDims | None = None) -> ModelParams:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(
            f"checkpoint version {doc.get('version')} != supported {FORMAT_VERSION}"
        )
    dims = ModelDims(**doc["dims"])
    if expect_dims is not None and dims != expect_dims:
        raise ValueError(f"checkpoint dims {dims} do not match expected {expect_dims}")
    shapes = _block_shapes(dims)
    blocks = {}
    for name, shape in shapes.items():
        if name not in doc["blocks"]:
            raise ValueError(f"checkpoint missing block '{name}'")
        stored = tuple(doc["block_shapes"][name])
        if stored != shape:
            raise ValueError(
                f"block '{name}' has shape {stored}, expected {shape} for dims {dims}"
            )
        blocks[name] = Tensor(_decode_array(doc["blocks"][name], shape), requires_grad=True)
    cw = doc.get("class_weights")
    bt = doc.get("bias_table")
    return ModelParams(
        dims=dims,
        blocks=blocks,
        alpha=doc["alpha"],
        margin=doc["margin"],
        class_weights=None if cw is None else _decode_array(cw, (dims.n_object_classes,)),
        bias_table=None
        if bt is None
        else _decode_array(bt, (dims.n_object_classes, dims.n_object_classes, dims.n_relations)),
    )

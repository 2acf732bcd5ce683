"""Synthetic HOI images, record files and candidate-pair assembly.

Each synthetic image holds one person and one or two objects of the same class
placed in the same relation to the person (overlapping, above, below or beside).
The verb is a pure function of that relation and the object class; the person
carries a coloured marker on the side facing the objects, so the label can be
read off the pixels as well as off the geometry.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import BoxPx, Image, ValidationError

HUMAN_SCORE_THRESHOLD = 0.8
OBJECT_SCORE_THRESHOLD = 0.4
PERSON_CLASS = 0

RELATIONS = ("overlap", "above", "below", "side")
NUM_OBJECT_CLASSES = 3

_BODY = (0.85, 0.30, 0.25)
_MARKERS = {
    "overlap": (0.15, 0.90, 0.90),
    "above": (0.95, 0.95, 0.20),
    "below": (0.20, 0.25, 0.95),
    "side": (0.95, 0.20, 0.95),
}
_OBJECT_COLOURS = {1: (0.20, 0.80, 0.20), 2: (0.95, 0.60, 0.10), 3: (0.55, 0.55, 1.00)}

IMAGE_MAGIC = b"IGIM"
_IMAGE_HEADER = struct.Struct("<4sIII")  # magic, height, width, channels -> 16 bytes


class RecordError(ValueError):
    """Malformed record file; the message names the line or the field."""


@dataclass
class Annotation:
    image_id: str
    humans: list[BoxPx]
    objects: list[tuple[BoxPx, int]]
    hois: list[tuple[int, int, int]]

    def validate(self, num_verbs: int | None = None) -> None:
        for h, o, v in self.hois:
            if not 0 <= h < len(self.humans):
                raise ValidationError(f"{self.image_id}: human_idx {h} out of range")
            if not 0 <= o < len(self.objects):
                raise ValidationError(f"{self.image_id}: object_idx {o} out of range")
            if v < 0 or (num_verbs is not None and v >= num_verbs):
                raise ValidationError(f"{self.image_id}: verb_id {v} out of range")


@dataclass(frozen=True)
class DetectedInstance:
    box: BoxPx
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 < self.score <= 1.0:
            raise ValidationError(f"detection score {self.score} outside (0, 1]")


@dataclass(frozen=True)
class Detection:
    image_id: str
    human_box: BoxPx
    object_box: BoxPx
    object_class: int
    verb: int
    score: float


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 200
    image_size: int = 32
    num_verbs: int = 4
    seed: int = 0
    max_objects: int = 2

    def __post_init__(self):
        if self.num_images < 1:
            raise ValidationError("num_images must be >= 1")
        if self.num_verbs < 2:
            raise ValidationError("num_verbs must be >= 2")
        if self.image_size < 16:
            raise ValidationError("image_size must be >= 16")


# ---------------------------------------------------------------------------
# geometry ground truth


def relation(b_h: BoxPx, b_o: BoxPx) -> str:
    ix = min(b_h.x2, b_o.x2) - max(b_h.x1, b_o.x1)
    iy = min(b_h.y2, b_o.y2) - max(b_h.y1, b_o.y1)
    if ix > 0 and iy > 0:
        return "overlap"
    if b_o.y2 <= b_h.y1:
        return "above"
    if b_o.y1 >= b_h.y2:
        return "below"
    return "side"


def verb_from_geometry(b_h: BoxPx, b_o: BoxPx, object_class: int, num_verbs: int) -> int:
    return (RELATIONS.index(relation(b_h, b_o)) + len(RELATIONS) * (object_class - 1)) % num_verbs


# ---------------------------------------------------------------------------
# generation


def _rand_box(rng: np.random.Generator, size: int, w_range, h_range) -> BoxPx:
    w = int(rng.integers(w_range[0], w_range[1] + 1))
    h = int(rng.integers(h_range[0], h_range[1] + 1))
    x = int(rng.integers(0, size - w + 1))
    y = int(rng.integers(0, size - h + 1))
    return BoxPx(float(x), float(y), float(x + w), float(y + h))


def _iou_any(b: BoxPx, others: list[BoxPx]) -> bool:
    for o in others:
        if min(b.x2, o.x2) > max(b.x1, o.x1) and min(b.y2, o.y2) > max(b.y1, o.y1):
            return True
    return False


def _unambiguous(human: BoxPx, obj: BoxPx, rel: str) -> bool:
    # keep placements far from the diagonal so the relation is clear at a glance
    cx, cy = (obj.x1 + obj.x2) / 2, (obj.y1 + obj.y2) / 2
    if rel in ("above", "below"):
        return human.x1 <= cx <= human.x2
    if rel == "side":
        return human.y1 <= cy <= human.y2
    return human.x1 <= cx <= human.x2 and human.y1 <= cy <= human.y2


def _layout(rng: np.random.Generator, size: int, rel: str, n_obj: int):
    hs = (max(3, size * 3 // 16), max(4, size * 5 // 16))
    hh = (max(5, size * 3 // 8), max(6, size // 2))
    os_ = (max(3, size * 3 // 16), max(4, size // 4))
    while True:
        human = _rand_box(rng, size, hs, hh)
        objs: list[BoxPx] = []
        for _ in range(200):
            b = _rand_box(rng, size, os_, os_)
            if relation(human, b) == rel and _unambiguous(human, b, rel) and not _iou_any(b, objs):
                objs.append(b)
                if len(objs) == n_obj:
                    return human, objs


def _paint(img: np.ndarray, box: BoxPx, colour) -> None:
    img[int(box.y1) : int(box.y2), int(box.x1) : int(box.x2)] = colour


def _marker_box(human: BoxPx, obj: BoxPx, rel: str) -> BoxPx:
    x1, y1, x2, y2 = human.as_list()
    bh = max(1.0, float(int(human.height) // 3))
    bw = max(1.0, float(int(human.width) // 2))
    if rel == "above":
        return BoxPx(x1, y1, x2, y1 + bh)
    if rel == "below":
        return BoxPx(x1, y2 - bh, x2, y2)
    if rel == "side":
        return BoxPx(x1, y1, x1 + bw, y2) if obj.x2 <= human.x1 else BoxPx(x2 - bw, y1, x2, y2)
    cy = y1 + float(int(human.height) // 3)
    return BoxPx(x1, cy, x2, cy + bh)


def generate_synthetic(cfg: SynthConfig) -> tuple[list[Image], list[Annotation]]:
    rng = np.random.default_rng(cfg.seed)
    images, anns = [], []
    s = cfg.image_size
    for i in range(cfg.num_images):
        rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
        cls = int(rng.integers(1, NUM_OBJECT_CLASSES + 1))
        n_obj = int(rng.integers(1, cfg.max_objects + 1))
        human, objs = _layout(rng, s, rel, n_obj)
        pix = rng.uniform(0.0, 0.15, size=(s, s, 3))
        _paint(pix, human, _BODY)
        for o in objs:
            _paint(pix, o, _OBJECT_COLOURS[cls])
        for o in objs:
            _paint(pix, _marker_box(human, o, rel), _MARKERS[rel])
        image_id = f"{i:06d}"
        verb = verb_from_geometry(human, objs[0], cls, cfg.num_verbs)
        images.append(Image(pix, image_id))
        anns.append(
            Annotation(
                image_id=image_id,
                humans=[human],
                objects=[(o, cls) for o in objs],
                hois=[(0, j, verb) for j in range(len(objs))],
            )
        )
    return images, anns


def detections_from_annotation(
    ann: Annotation, noise: float = 0.0, rng: np.random.Generator | None = None
) -> list[DetectedInstance]:
    """Ground-truth boxes as detections (score 1.0), optionally jittered."""
    out = [DetectedInstance(b, PERSON_CLASS, 1.0) for b in ann.humans]
    out += [DetectedInstance(b, c, 1.0) for b, c in ann.objects]
    if noise <= 0:
        return out
    rng = rng if rng is not None else np.random.default_rng(0)
    jittered = []
    for d in out:
        j = rng.uniform(-noise, noise, size=4) * np.array([d.box.width, d.box.height] * 2)
        x1, y1, x2, y2 = np.array(d.box.as_list()) + j
        if x2 <= x1 or y2 <= y1:
            x1, y1, x2, y2 = d.box.as_list()
        lo = 0.6 if d.class_id == PERSON_CLASS else 0.2
        jittered.append(DetectedInstance(BoxPx(x1, y1, x2, y2), d.class_id, float(rng.uniform(lo, 1.0))))
    return jittered


def candidate_pairs(instances: list[DetectedInstance]) -> list[tuple[DetectedInstance, DetectedInstance]]:
    """Cross product of confident persons (> 0.8) and confident objects (> 0.4)."""
    humans = [d for d in instances if d.class_id == PERSON_CLASS and d.score > HUMAN_SCORE_THRESHOLD]
    objects = [d for d in instances if d.class_id != PERSON_CLASS and d.score > OBJECT_SCORE_THRESHOLD]
    return [(h, o) for h in humans for o in objects]


def pair_labels(ann: Annotation, h_box: BoxPx, o_box: BoxPx, num_verbs: int) -> np.ndarray:
    """Binary verb labels for a candidate pair whose boxes coincide with annotated ones."""
    labels = np.zeros(num_verbs)
    for h, o, v in ann.hois:
        if ann.humans[h] == h_box and ann.objects[o][0] == o_box:
            labels[v] = 1.0
    return labels


# ---------------------------------------------------------------------------
# image files


def write_image(path: str | os.PathLike, img: Image) -> None:
    h, w, c = img.pixels.shape
    with open(path, "wb") as f:
        f.write(_IMAGE_HEADER.pack(IMAGE_MAGIC, h, w, c))
        f.write(np.ascontiguousarray(img.pixels, dtype="<f8").tobytes())


def read_image(path: str | os.PathLike, image_id: str | None = None) -> Image:
    blob = Path(path).read_bytes()
    if len(blob) < _IMAGE_HEADER.size:
        raise RecordError(f"{path}: truncated image header")
    magic, h, w, c = _IMAGE_HEADER.unpack_from(blob)
    if magic != IMAGE_MAGIC:
        raise RecordError(f"{path}: bad magic {magic!r}")
    body = blob[_IMAGE_HEADER.size :]
    if len(body) != 8 * h * w * c:
        raise RecordError(f"{path}: expected {h}x{w}x{c} values, found {len(body) // 8}")
    pixels = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(h, w, c)
    return Image(pixels, image_id or Path(path).stem)


def image_path(data_dir: str | os.PathLike, image_id: str) -> Path:
    return Path(data_dir) / "images" / f"{image_id}.igim"


# ---------------------------------------------------------------------------
# JSON-lines records


def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise RecordError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise RecordError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _box(value, where: str, key: str) -> BoxPx:
    if not (isinstance(value, list) and len(value) == 4 and all(isinstance(v, (int, float)) for v in value)):
        raise RecordError(f"{where}: field {key!r} must be [x1, y1, x2, y2]")
    try:
        return BoxPx.from_list(value)
    except ValidationError as exc:
        raise RecordError(f"{where}: field {key!r}: {exc}") from None


def _iter_json(path: str | os.PathLike):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: parse error: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise RecordError(f"{path}:{lineno}: expected a JSON object")
            yield f"{path}:{lineno}", obj


def _write_lines(path: str | os.PathLike, docs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(json.dumps(doc))
            f.write("\n")


def annotation_to_json(a: Annotation) -> dict:
    return {
        "image_id": a.image_id,
        "humans": [b.as_list() for b in a.humans],
        "objects": [{"box": b.as_list(), "class": c} for b, c in a.objects],
        "hois": [[h, o, v] for h, o, v in a.hois],
    }


def annotation_from_json(obj: dict, where: str = "record") -> Annotation:
    image_id = _require(obj, "image_id", str, where)
    humans = [_box(b, where, "humans") for b in _require(obj, "humans", list, where)]
    objects = []
    for i, o in enumerate(_require(obj, "objects", list, where)):
        if not isinstance(o, dict):
            raise RecordError(f"{where}: objects[{i}] must be an object")
        objects.append((_box(_require(o, "box", list, f"{where} objects[{i}]"), where, "box"),
                        _require(o, "class", int, f"{where} objects[{i}]")))
    hois = []
    names = ("human_idx", "object_idx", "verb_id")
    for i, t in enumerate(_require(obj, "hois", list, where)):
        if not isinstance(t, list):
            raise RecordError(f"{where}: hois[{i}] must be [human_idx, object_idx, verb_id]")
        for k, name in enumerate(names):
            if k >= len(t):
                raise RecordError(f"{where}: hois[{i}] missing field {name!r}")
            if not isinstance(t[k], int) or isinstance(t[k], bool):
                raise RecordError(f"{where}: hois[{i}] field {name!r} must be an integer")
        if len(t) != 3:
            raise RecordError(f"{where}: hois[{i}] has {len(t)} entries, expected 3")
        hois.append((t[0], t[1], t[2]))
    ann = Annotation(image_id, humans, objects, hois)
    try:
        ann.validate()
    except ValidationError as exc:
        raise RecordError(f"{where}: {exc}") from None
    return ann


def write_annotations(path: str | os.PathLike, anns: list[Annotation]) -> None:
    _write_lines(path, (annotation_to_json(a) for a in anns))


def read_annotations(path: str | os.PathLike) -> list[Annotation]:
    return [annotation_from_json(obj, where) for where, obj in _iter_json(path)]


def detection_to_json(d: Detection) -> dict:
    return {
        "image_id": d.image_id,
        "human_box": d.human_box.as_list(),
        "object_box": d.object_box.as_list(),
        "object_class": d.object_class,
        "verb": d.verb,
        "score": d.score,
    }


def detection_from_json(obj: dict, where: str = "record") -> Detection:
    return Detection(
        image_id=_require(obj, "image_id", str, where),
        human_box=_box(_require(obj, "human_box", list, where), where, "human_box"),
        object_box=_box(_require(obj, "object_box", list, where), where, "object_box"),
        object_class=_require(obj, "object_class", int, where),
        verb=_require(obj, "verb", int, where),
        score=float(_require(obj, "score", float, where)),
    )


def write_detections(path: str | os.PathLike, dets: list[Detection]) -> None:
    _write_lines(path, (detection_to_json(d) for d in dets))


def read_detections(path: str | os.PathLike) -> list[Detection]:
    return [detection_from_json(obj, where) for where, obj in _iter_json(path)]


@dataclass
class FeatureRecord:
    image_id: str
    pair_idx: int
    f_s: np.ndarray
    f_h: np.ndarray
    f_o: np.ndarray

    shape: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        self.shape = tuple(self.f_s.shape)
        if self.f_h.shape != self.shape or self.f_o.shape != self.shape or len(self.shape) != 3:
            raise ValidationError(f"{self.image_id}/{self.pair_idx}: target feature shapes differ")


def feature_to_json(r: FeatureRecord) -> dict:
    return {
        "image_id": r.image_id,
        "pair_idx": r.pair_idx,
        "f_s": r.f_s.reshape(-1).tolist(),
        "f_h": r.f_h.reshape(-1).tolist(),
        "f_o": r.f_o.reshape(-1).tolist(),
        "shape": list(r.shape),
    }


def feature_from_json(obj: dict, where: str = "record") -> FeatureRecord:
    shape = _require(obj, "shape", list, where)
    if len(shape) != 3 or not all(isinstance(s, int) and s >= 1 for s in shape):
        raise RecordError(f"{where}: field 'shape' must be [H, W, D]")
    maps = {}
    for key in ("f_s", "f_h", "f_o"):
        flat = _require(obj, key, list, where)
        if len(flat) != shape[0] * shape[1] * shape[2]:
            raise RecordError(f"{where}: field {key!r} has {len(flat)} values, shape needs {np.prod(shape)}")
        maps[key] = np.asarray(flat, dtype=np.float64).reshape(shape)
    return FeatureRecord(
        image_id=_require(obj, "image_id", str, where),
        pair_idx=_require(obj, "pair_idx", int, where),
        **maps,
    )


def write_features(path: str | os.PathLike, records: list[FeatureRecord]) -> None:
    _write_lines(path, (feature_to_json(r) for r in records))


def read_features(path: str | os.PathLike) -> list[FeatureRecord]:
    return [feature_from_json(obj, where) for where, obj in _iter_json(path)]


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(data_dir: str | os.PathLike, images: list[Image], anns: list[Annotation]) -> None:
    root = Path(data_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for img in images:
        write_image(image_path(root, img.id), img)
    write_annotations(root / "annotations.jsonl", anns)


def load_dataset(data_dir: str | os.PathLike) -> tuple[list[Image], list[Annotation]]:
    root = Path(data_dir)
    ann_path = root / "annotations.jsonl"
    if not ann_path.exists():
        raise FileNotFoundError(f"no annotations.jsonl in {root}")
    anns = read_annotations(ann_path)
    images = [read_image(image_path(root, a.image_id), a.image_id) for a in anns]
    return images, anns

"""Run configuration, the SGD training loop, inference and evaluation."""

from __future__ import annotations

import json
import math
import os
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .dataset import (
    Annotation,
    Detection,
    FeatureRecord,
    candidate_pairs,
    detections_from_annotation,
    load_dataset,
    pair_labels,
    read_features,
    write_detections,
)
from .evaluate import EvalReport, gt_pairs, role_map
from .features import BoxPx, Image, ValidationError
from .ingraph import InGraphConfig, TargetFeature, TargetKind
from .network import Ablation, HOISample, InGraphNet, NetConfig, branch_losses, fuse_scores, interaction_pattern
from .optim import OptimConfig, sgd_step
from .tensor import Parameter, Tensor, add, backward, scale, zero_grad


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class RunConfig:
    data_dir: str = "data"
    checkpoint: str = "model.igk"
    report: str = "report.json"
    detections: str | None = None
    features: str | None = None
    feature_dim: int = 32
    reduced_dim: int = 16
    node_count: int = 8
    num_categories: int = 4
    pattern_size: int = 64
    head_hidden: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    momentum: float = 0.9
    iterations: int = 100
    batch_size: int = 4
    seed: int = 0
    scene_wide: bool = True
    instance_wide: bool = True
    concat_only: bool = False
    resume: bool = False
    log_every: int = 1
    noise: float = 0.0
    grad_clip: float | None = None
    lr_schedule: str = "constant"
    node_sweep: list[int] = field(default_factory=lambda: [4, 8, 16])

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.log_every < 1:
            raise ValidationError(f"log_every must be >= 1, got {self.log_every}")
        if self.seed < 0:
            raise ValidationError("seed must be unsigned")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValidationError(f"grad_clip must be positive, got {self.grad_clip}")
        self.ablation  # validates flag consistency
        self.optim  # validates optimiser fields

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ValidationError(f"unknown config keys {unknown}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.scene_wide, self.instance_wide, self.concat_only)

    @property
    def optim(self) -> OptimConfig:
        return OptimConfig(self.learning_rate, self.weight_decay, self.momentum)

    @property
    def net(self) -> NetConfig:
        return NetConfig(
            ingraph=InGraphConfig(self.feature_dim, self.reduced_dim, self.node_count),
            num_categories=self.num_categories,
            pattern_size=self.pattern_size,
            head_hidden=self.head_hidden,
            ablation=self.ablation,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def optim_at(self, iteration: int) -> OptimConfig:
        """Optimiser settings for 0-based ``iteration`` under the learning-rate schedule."""
        if self.lr_schedule == "constant":
            return self.optim
        lr = 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * iteration / self.iterations))
        return OptimConfig(lr, self.weight_decay, self.momentum)


# ---------------------------------------------------------------------------
# candidate pairs


@dataclass
class PairItem:
    image_index: int
    pair_index: int
    human_box: BoxPx
    object_box: BoxPx
    object_class: int
    labels: np.ndarray
    pattern: np.ndarray
    s_h_pre: float = 1.0
    s_o_pre: float = 1.0


def build_pairs(
    anns: list[Annotation], num_categories: int, pattern_size: int, noise: float = 0.0, seed: int = 0
) -> list[PairItem]:
    rng = np.random.default_rng([seed, 7]) if noise > 0 else None
    items = []
    for i, ann in enumerate(anns):
        for k, (h, o) in enumerate(candidate_pairs(detections_from_annotation(ann, noise, rng))):
            items.append(
                PairItem(
                    image_index=i,
                    pair_index=k,
                    human_box=h.box,
                    object_box=o.box,
                    object_class=o.class_id,
                    labels=pair_labels(ann, h.box, o.box, num_categories),
                    pattern=interaction_pattern(h.box, o.box, pattern_size),
                    s_h_pre=h.score,
                    s_o_pre=o.score,
                )
            )
    return items


class SampleSource:
    """Turns pair items into :class:`HOISample` objects, running the stem once per image."""

    def __init__(
        self,
        model: InGraphNet,
        images: list[Image],
        anns: list[Annotation],
        features: list[FeatureRecord] | None = None,
    ):
        self.model = model
        self.images = images
        self.anns = anns
        self.features = None
        if features is not None:
            self.features = {(r.image_id, r.pair_idx): r for r in features}

    @property
    def uses_backbone(self) -> bool:
        return self.features is None

    def samples(self, items: list[PairItem]) -> list[HOISample]:
        out: list[HOISample | None] = [None] * len(items)
        if self.features is not None:
            for n, it in enumerate(items):
                key = (self.anns[it.image_index].image_id, it.pair_index)
                if key not in self.features:
                    raise ValidationError(f"features file has no record for image {key[0]} pair {key[1]}")
                r = self.features[key]
                targets = (
                    TargetFeature(TargetKind.SCENE, Tensor(r.f_s)),
                    TargetFeature(TargetKind.HUMAN, Tensor(r.f_h)),
                    TargetFeature(TargetKind.OBJECT, Tensor(r.f_o)),
                )
                out[n] = self._sample(it, targets)
            return out
        by_image: dict[int, list[int]] = {}
        for n, it in enumerate(items):
            by_image.setdefault(it.image_index, []).append(n)
        for image_index, members in by_image.items():
            boxes = [(items[n].human_box, items[n].object_box) for n in members]
            for n, targets in zip(members, self.model.extractor.extract_pairs(self.images[image_index], boxes)):
                out[n] = self._sample(items[n], targets)
        return out

    @staticmethod
    def _sample(it: PairItem, targets) -> HOISample:
        f_s, f_h, f_o = targets
        return HOISample(f_s, f_h, f_o, it.pattern, it.labels, it.s_h_pre, it.s_o_pre)


# ---------------------------------------------------------------------------
# training


def trainable_parameters(model: InGraphNet, source: SampleSource) -> list[Parameter]:
    params = list(model.parameters())
    if not source.uses_backbone:
        stem = {id(p) for p in model.extractor.parameters()}
        params = [p for p in params if id(p) not in stem]
    return params


def batch_indices(n: int, batch_size: int, iteration: int, seed: int, _cache: dict | None = None) -> list[int]:
    """Indices for 0-based ``iteration``: consecutive slices of per-epoch permutations.

    Each epoch's permutation depends only on ``(seed, epoch)``, so a resumed run
    sees exactly the batches an uninterrupted run would.
    """
    out = []
    for pos in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, offset = divmod(pos, n)
        if _cache is not None and epoch in _cache:
            perm = _cache[epoch]
        else:
            perm = np.random.default_rng([seed, epoch]).permutation(n)
            if _cache is not None:
                _cache.clear()
                _cache[epoch] = perm
        out.append(int(perm[offset]))
    return out


def batch_loss(model: InGraphNet, samples: list[HOISample]) -> tuple[Tensor, tuple[float, float, float]]:
    """Mean over the batch of the summed branch losses, plus per-branch means."""
    total = None
    parts = np.zeros(3)
    for s in samples:
        l_h, l_o, l_s = branch_losses(model(s), s.labels)
        parts += [l_h.item(), l_o.item(), l_s.item()]
        term = add(add(l_h, l_o), l_s)
        total = term if total is None else add(total, term)
    n = len(samples)
    return scale(total, 1.0 / n), tuple(float(v) for v in parts / n)


def largest_gradient_group(params: list[Parameter]) -> str:
    worst, group = -1.0, "none"
    for p in params:
        if p.grad is None:
            continue
        g = np.abs(p.grad)
        m = math.inf if not np.all(np.isfinite(g)) else float(g.max(initial=0.0))
        if m > worst:
            worst, group = m, p.group
    return group


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass
class TrainResult:
    model: InGraphNet
    history: list[dict]
    start_iteration: int


def new_model(cfg: RunConfig) -> InGraphNet:
    return InGraphNet(cfg.net, np.random.default_rng(cfg.seed))


def train(
    cfg: RunConfig,
    images: list[Image],
    anns: list[Annotation],
    model: InGraphNet | None = None,
    start_iteration: int = 0,
    features: list[FeatureRecord] | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    model = model if model is not None else new_model(cfg)
    items = build_pairs(anns, cfg.num_categories, cfg.pattern_size)
    if not items:
        raise ValidationError("no candidate pairs in the training data")
    source = SampleSource(model, images, anns, features)
    params = trainable_parameters(model, source)
    history = []
    cache: dict = {}
    for it in range(start_iteration, cfg.iterations):
        batch = [items[i] for i in batch_indices(len(items), cfg.batch_size, it, cfg.seed, cache)]
        loss, (l_h, l_o, l_s) = batch_loss(model, source.samples(batch))
        value = loss.item()
        zero_grad(params)
        backward(loss)
        if not math.isfinite(value):
            raise NumericError(
                f"non-finite loss {value} at iteration {it + 1}; "
                f"largest gradient in parameter group {largest_gradient_group(params)!r}"
            )
        if cfg.grad_clip is not None:
            clip_grad_norm(params, cfg.grad_clip)
        sgd_step(params, cfg.optim_at(it))
        record = {"iteration": it + 1, "loss": value, "loss_h": l_h, "loss_o": l_o, "loss_s": l_s}
        history.append(record)
        if log is not None and ((it + 1) % cfg.log_every == 0 or it == start_iteration or it + 1 == cfg.iterations):
            log(record)
    return TrainResult(model, history, start_iteration)


def dataset_loss(model: InGraphNet, images, anns, cfg: RunConfig, features=None) -> float:
    """Mean summed-branch loss over every training pair."""
    items = build_pairs(anns, cfg.num_categories, cfg.pattern_size)
    source = SampleSource(model, images, anns, features)
    total = 0.0
    for start in range(0, len(items), 32):
        chunk = items[start : start + 32]
        for s in source.samples(chunk):
            total += sum(l.item() for l in branch_losses(model(s), s.labels))
    return total / len(items)


# ---------------------------------------------------------------------------
# checkpoints


def sidecar_path(ckpt: str | os.PathLike) -> Path:
    return Path(str(ckpt) + ".json")


def save_model(path: str | os.PathLike, model: InGraphNet, iteration: int) -> None:
    state = {}
    for p in model.parameters():
        state[p.name] = p.data
    for p in model.parameters():
        state[f"momentum.{p.name}"] = p.momentum_buffer.reshape(p.shape)
    checkpoint.save(path, state)
    doc = {"network": model.cfg.to_json(), "iteration": iteration}
    sidecar_path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path: str | os.PathLike, expected: NetConfig | None = None) -> tuple[InGraphNet, int]:
    side = sidecar_path(path)
    if not side.exists():
        raise ValidationError(f"missing network description {side}")
    doc = json.loads(side.read_text())
    net = NetConfig.from_json(doc["network"])
    if expected is not None and net != expected:
        raise ValidationError(
            f"checkpoint network {net.to_json()} does not match configured network {expected.to_json()}"
        )
    model = InGraphNet(net, np.random.default_rng(0))
    state = checkpoint.load(path)
    params = {k: v for k, v in state.items() if not k.startswith("momentum.")}
    model.load_state_dict(params)
    for p in model.parameters():
        buf = state.get(f"momentum.{p.name}")
        if buf is not None:
            p.momentum_buffer = np.array(buf, dtype=np.float64).reshape(-1)
    return model, int(doc.get("iteration", 0))


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(
    model: InGraphNet,
    images: list[Image],
    anns: list[Annotation],
    noise: float = 0.0,
    seed: int = 0,
    features: list[FeatureRecord] | None = None,
) -> list[Detection]:
    """Score every candidate pair and emit one detection per verb."""
    k = model.cfg.num_categories
    items = build_pairs(anns, k, model.cfg.pattern_size, noise=noise, seed=seed)
    source = SampleSource(model, images, anns, features)
    dets: list[Detection] = []
    by_image: dict[int, list[PairItem]] = {}
    for it in items:
        by_image.setdefault(it.image_index, []).append(it)
    for image_index in sorted(by_image, key=lambda i: anns[i].image_id):
        group = by_image[image_index]
        for it, sample in zip(group, source.samples(group)):
            fused = fuse_scores(model(sample), it.s_h_pre, it.s_o_pre)
            for verb in range(k):
                dets.append(
                    Detection(
                        image_id=anns[image_index].image_id,
                        human_box=it.human_box,
                        object_box=it.object_box,
                        object_class=it.object_class,
                        verb=verb,
                        score=float(fused[verb]),
                    )
                )
    return dets


def evaluate(model: InGraphNet, images, anns, noise: float = 0.0, seed: int = 0, features=None):
    dets = predict(model, images, anns, noise=noise, seed=seed, features=features)
    return dets, role_map(dets, gt_pairs(anns))


def write_report(path: str | os.PathLike, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n")
    Path(path).with_suffix(".txt").write_text(report.table() + "\n")


def run_eval(cfg: RunConfig, log: Callable[[str], None] = print) -> EvalReport:
    model, _ = load_model(cfg.checkpoint)
    images, anns = load_dataset(cfg.data_dir)
    features = read_features(cfg.features) if cfg.features else None
    dets, report = evaluate(model, images, anns, noise=cfg.noise, seed=cfg.seed, features=features)
    det_path = cfg.detections or str(Path(cfg.report).with_name("detections.jsonl"))
    write_detections(det_path, dets)
    write_report(cfg.report, report)
    log(report.table())
    return report


def run_train(cfg: RunConfig, log: Callable[[dict], None] | None = None) -> TrainResult:
    images, anns = load_dataset(cfg.data_dir)
    features = read_features(cfg.features) if cfg.features else None
    model, start = None, 0
    if cfg.resume and Path(cfg.checkpoint).exists():
        model, start = load_model(cfg.checkpoint, expected=cfg.net)
    result = train(cfg, images, anns, model=model, start_iteration=start, features=features, log=log)
    save_model(cfg.checkpoint, result.model, max(start, cfg.iterations))
    return result

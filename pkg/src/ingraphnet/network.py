"""in-GraphNet: three scoring branches fed by three in-Graph blocks.

The human-scene and object-scene blocks enrich the human- and object-centric
branches; the human-object block feeds the object-centric branch only. A third
branch scores the two-channel interaction pattern of the box pair.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .features import BoxPx, FeatureExtractor, ValidationError
from .ingraph import InGraph, InGraphConfig, TargetFeature
from .layers import Affine, Module
from .tensor import (
    DimensionError,
    Tensor,
    add,
    avg_pool2x2,
    bce_loss,
    concat,
    global_avg_pool,
    relu,
    sigmoid,
)


@dataclass(frozen=True)
class Ablation:
    """Which in-Graph blocks are active."""

    scene_wide: bool = True
    instance_wide: bool = True
    concat_only: bool = False

    def __post_init__(self):
        if self.concat_only and (self.scene_wide or self.instance_wide):
            raise ValidationError("concat_only excludes scene_wide and instance_wide")

    @property
    def name(self) -> str:
        if self.concat_only:
            return "concat"
        return {
            (False, False): "baseline",
            (True, False): "scene_wide",
            (False, True): "instance_wide",
            (True, True): "full",
        }[(self.scene_wide, self.instance_wide)]


ABLATIONS = {
    "baseline": Ablation(False, False, False),
    "concat": Ablation(False, False, True),
    "scene_wide": Ablation(True, False, False),
    "instance_wide": Ablation(False, True, False),
    "full": Ablation(True, True, False),
}


@dataclass(frozen=True)
class NetConfig:
    ingraph: InGraphConfig = field(default_factory=InGraphConfig)
    num_categories: int = 4
    pattern_size: int = 64
    head_hidden: int = 64
    spatial_dim: int = 16
    stem_dim: int = 16
    roi_size: int = 4
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if self.num_categories < 1:
            raise ValidationError(f"num_categories must be >= 1, got {self.num_categories}")
        if self.pattern_size < 8:
            raise ValidationError(f"pattern_size must be >= 8, got {self.pattern_size}")
        if self.head_hidden < 1 or self.spatial_dim < 1 or self.stem_dim < 1 or self.roi_size < 1:
            raise ValidationError("head_hidden, spatial_dim, stem_dim and roi_size must be positive")

    def to_json(self) -> dict:
        return {
            "D": self.ingraph.feature_dim,
            "C": self.ingraph.reduced_dim,
            "N": self.ingraph.node_count,
            "K": self.num_categories,
            "S": self.pattern_size,
            "head_hidden": self.head_hidden,
            "spatial_dim": self.spatial_dim,
            "stem_dim": self.stem_dim,
            "roi_size": self.roi_size,
            **asdict(self.ablation),
        }

    @classmethod
    def from_json(cls, doc: dict) -> NetConfig:
        known = {"D", "C", "N", "K", "S", "head_hidden", "spatial_dim", "stem_dim", "roi_size",
                 "scene_wide", "instance_wide", "concat_only"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"unknown network keys {unknown}")
        try:
            return cls(
                ingraph=InGraphConfig(int(doc["D"]), int(doc["C"]), int(doc["N"])),
                num_categories=int(doc["K"]),
                pattern_size=int(doc["S"]),
                head_hidden=int(doc["head_hidden"]),
                spatial_dim=int(doc.get("spatial_dim", 16)),
                stem_dim=int(doc.get("stem_dim", 16)),
                roi_size=int(doc.get("roi_size", 4)),
                ablation=Ablation(
                    bool(doc["scene_wide"]), bool(doc["instance_wide"]), bool(doc["concat_only"])
                ),
            )
        except KeyError as exc:
            raise ValidationError(f"network config is missing key {exc.args[0]!r}") from None


@dataclass
class BranchScores:
    S_h: Tensor
    S_o: Tensor
    S_s: Tensor


@dataclass
class HOISample:
    f_s: TargetFeature
    f_h: TargetFeature
    f_o: TargetFeature
    pattern: np.ndarray  # [S, S, 2] binary
    labels: np.ndarray  # [K] binary
    s_h_pre: float = 1.0
    s_o_pre: float = 1.0

    def __post_init__(self):
        if not np.all((self.pattern == 0) | (self.pattern == 1)):
            raise ValidationError("interaction pattern must be binary")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels must be binary")


def interaction_pattern(b_h: BoxPx, b_o: BoxPx, size: int = 64) -> np.ndarray:
    """Rasterise both boxes inside their union box onto an S x S grid.

    A cell is set when its centre falls inside the box (half-open on the far
    edges), which is nearest-neighbour resampling of the full-resolution masks.
    """
    if b_h.area <= 0 or b_o.area <= 0:
        raise ValidationError("interaction_pattern: zero-area box")
    u = b_h.union(b_o)
    ys = u.y1 + (np.arange(size) + 0.5) * (u.height / size)
    xs = u.x1 + (np.arange(size) + 0.5) * (u.width / size)
    out = np.zeros((size, size, 2))
    for ch, b in enumerate((b_h, b_o)):
        rows = (ys >= b.y1) & (ys < b.y2)
        cols = (xs >= b.x1) & (xs < b.x2)
        out[:, :, ch] = np.outer(rows, cols)
    return out


SPATIAL_INPUT_CHANNELS = 10


def _position_weighted(pattern: np.ndarray) -> np.ndarray:
    """Each mask, alone and weighted by y, x, |y| and |x| (cell centres in [-1, 1]).

    A 1x1 stack followed by global pooling cannot see where a mask sits; the
    weighted copies give it the first moments it needs. An empty pattern maps
    to all zeros.
    """
    s = pattern.shape[0]
    c = (np.arange(s) + 0.5) / s * 2.0 - 1.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    chans = []
    for m in (pattern[:, :, 0], pattern[:, :, 1]):
        chans += [m, m * yy, m * xx, m * np.abs(yy), m * np.abs(xx)]
    return np.stack(chans, axis=-1)


class Head(Module):
    """Global average pooling, FC, ReLU, FC, sigmoid."""

    def __init__(self, name: str, din: int, hidden: int, k: int, rng: np.random.Generator):
        self.din = din
        self.fc1 = Affine(f"{name}.fc1", din, hidden, rng, group="heads")
        self.fc2 = Affine(f"{name}.fc2", hidden, k, rng, group="heads")

    def __call__(self, fmap: Tensor) -> Tensor:
        if fmap.shape[2] != self.din:
            raise DimensionError(f"head expects {self.din} channels, got {list(fmap.shape)}")
        return sigmoid(self.fc2.fc(relu(self.fc1.fc(global_avg_pool(fmap)))))


class SpatialBranch(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        width = cfg.spatial_dim
        self.size = cfg.pattern_size
        self.conv1 = Affine("head.spatial.conv1", SPATIAL_INPUT_CHANNELS, width, rng, group="heads")
        self.conv2 = Affine("head.spatial.conv2", width, width, rng, group="heads")
        self.fc = Affine("head.spatial.fc", width, cfg.num_categories, rng, group="heads")

    def __call__(self, pattern: np.ndarray) -> Tensor:
        if pattern.shape != (self.size, self.size, 2):
            raise DimensionError(f"pattern must be [{self.size},{self.size},2], got {list(pattern.shape)}")
        x = Tensor(_position_weighted(pattern))
        x = avg_pool2x2(relu(self.conv1.conv(x)))
        x = relu(self.conv2.conv(x))
        return sigmoid(self.fc.fc(global_avg_pool(x)))


class InGraphNet(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, k, hid = cfg.ingraph.feature_dim, cfg.num_categories, cfg.head_hidden
        ab = cfg.ablation
        self.extractor = FeatureExtractor(d, rng, stem_dim=cfg.stem_dim, roi_size=cfg.roi_size)
        self.graphs: dict[str, InGraph] = {}
        if ab.scene_wide:
            self.graphs["human_scene"] = InGraph("human_scene", cfg.ingraph, rng)
            self.graphs["object_scene"] = InGraph("object_scene", cfg.ingraph, rng)
        if ab.instance_wide:
            self.graphs["human_object"] = InGraph("human_object", cfg.ingraph, rng)
        extra_h = 1 if (ab.scene_wide or ab.concat_only) else 0
        extra_o = extra_h + (1 if (ab.instance_wide or ab.concat_only) else 0)
        self.human_head = Head("head.human", d * (1 + extra_h), hid, k, rng)
        self.object_head = Head("head.object", d * (1 + extra_o), hid, k, rng)
        self.spatial = SpatialBranch(cfg, rng)

    # -- branches -----------------------------------------------------------

    def human_branch(self, f_h: TargetFeature, g_hs: Tensor | None) -> Tensor:
        parts = [f_h.map] if g_hs is None else [f_h.map, g_hs]
        return self.human_head(concat(parts, axis=2))

    def object_branch(self, f_o: TargetFeature, g_os: Tensor | None, g_ho: Tensor | None) -> Tensor:
        parts = [f_o.map] + [g for g in (g_os, g_ho) if g is not None]
        return self.object_head(concat(parts, axis=2))

    def spatial_branch(self, pattern: np.ndarray) -> Tensor:
        return self.spatial(pattern)

    # -- full model ---------------------------------------------------------

    def reason(self, sample: HOISample) -> dict[str, Tensor]:
        """Outputs of the active in-Graphs (or raw features in concat mode)."""
        ab = self.cfg.ablation
        if ab.concat_only:
            return {"g_hs": sample.f_s.map, "g_os": sample.f_s.map, "g_ho": sample.f_h.map}
        out = {}
        if ab.scene_wide:
            out["g_hs"] = self.graphs["human_scene"](sample.f_h, sample.f_s)
            out["g_os"] = self.graphs["object_scene"](sample.f_o, sample.f_s)
        if ab.instance_wide:
            out["g_ho"] = self.graphs["human_object"](sample.f_h, sample.f_o)
        return out

    def forward(self, sample: HOISample, replace: dict[str, Tensor] | None = None) -> BranchScores:
        """Score one candidate pair. ``replace`` swaps named in-Graph outputs (probing hook)."""
        g = self.reason(sample)
        if replace:
            unknown = set(replace) - set(g)
            if unknown:
                raise KeyError(f"no in-Graph output named {sorted(unknown)}")
            g.update(replace)
        return BranchScores(
            S_h=self.human_branch(sample.f_h, g.get("g_hs")),
            S_o=self.object_branch(sample.f_o, g.get("g_os"), g.get("g_ho")),
            S_s=self.spatial_branch(sample.pattern),
        )

    __call__ = forward


def branch_losses(scores: BranchScores, labels) -> tuple[Tensor, Tensor, Tensor]:
    return bce_loss(scores.S_h, labels), bce_loss(scores.S_o, labels), bce_loss(scores.S_s, labels)


def loss(scores: BranchScores, labels) -> Tensor:
    """Sum of the three branches' multi-label BCE losses."""
    l_h, l_o, l_s = branch_losses(scores, labels)
    return add(add(l_h, l_o), l_s)


def fuse_scores(scores: BranchScores, s_h_pre: float, s_o_pre: float) -> np.ndarray:
    """Final per-category score ``s_h_pre * s_o_pre * (S_h + S_o) * S_s``; lies in [0, 2]."""
    s_h, s_o, s_s = (np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
                     for s in (scores.S_h, scores.S_o, scores.S_s))
    return s_h_pre * s_o_pre * (s_h + s_o) * s_s

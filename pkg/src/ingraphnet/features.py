"""Target feature extraction: a small trainable backbone stub plus RoI max pooling.

The stem maps an RGB image to a stride-4 feature map once per image; scene,
human and object targets are RoI-pooled from it to a fixed grid and lifted to
the in-Graph feature depth by a shared 1x1 "C5" head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ingraph import TargetFeature, TargetKind
from .layers import Affine, Module
from .tensor import Tensor, avg_pool2x2, max_pool_bins, relu

STEM_STRIDE = 4
MIN_IMAGE_SIZE = 16


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class BoxPx:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValidationError(f"degenerate box {self.as_list()}")

    @classmethod
    def from_list(cls, xs) -> BoxPx:
        if len(xs) != 4:
            raise ValidationError(f"box needs 4 coordinates, got {list(xs)}")
        return cls(*(float(v) for v in xs))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def clip(self, width: float, height: float) -> BoxPx:
        """Intersect with ``[0, width] x [0, height]``."""
        x1, y1 = max(self.x1, 0.0), max(self.y1, 0.0)
        x2, y2 = min(self.x2, float(width)), min(self.y2, float(height))
        if not (x2 > x1 and y2 > y1):
            raise ValidationError(f"box {self.as_list()} lies outside the {width}x{height} image")
        return BoxPx(x1, y1, x2, y2)

    def union(self, other: BoxPx) -> BoxPx:
        return BoxPx(
            min(self.x1, other.x1), min(self.y1, other.y1), max(self.x2, other.x2), max(self.y2, other.y2)
        )


@dataclass
class Image:
    pixels: np.ndarray  # [H, W, 3] in [0, 1]
    id: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValidationError(f"image {self.id}: expected [H,W,3] pixels, got {self.pixels.shape}")
        h, w, _ = self.pixels.shape
        if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
            raise ValidationError(f"image {self.id}: {h}x{w} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def roi_bins(box: BoxPx, map_hw: tuple[int, int], out_hw: tuple[int, int], stride: int) -> list[tuple[int, int, int, int]]:
    """Integer cell ranges for each output bin, rounded outward so none is empty."""
    hf, wf = map_hw
    x0 = max(math.floor(box.x1 / stride), 0)
    y0 = max(math.floor(box.y1 / stride), 0)
    x1 = min(math.ceil(box.x2 / stride), wf)
    y1 = min(math.ceil(box.y2 / stride), hf)
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"box {box.as_list()} lies outside the {hf}x{wf} feature map (stride {stride})")
    rh, rw = y1 - y0, x1 - x0
    hr, wr = out_hw
    bins = []
    for i in range(hr):
        ya = y0 + (i * rh) // hr
        yb = y0 + -((-(i + 1) * rh) // hr)
        for j in range(wr):
            xa = x0 + (j * rw) // wr
            xb = x0 + -((-(j + 1) * rw) // wr)
            bins.append((ya, max(yb, ya + 1), xa, max(xb, xa + 1)))
    return bins


def roi_pool(featmap: Tensor, box: BoxPx, out: tuple[int, int], stride: int = STEM_STRIDE) -> Tensor:
    """RoI max pooling of a pixel-space box on a stride-``stride`` feature map."""
    hf, wf, _ = featmap.shape
    bins = roi_bins(box, (hf, wf), out, stride)
    return max_pool_bins(featmap, bins, out)


class FeatureExtractor(Module):
    """Backbone stub standing in for the ResNet-50 trunk and its C5 stage."""

    def __init__(self, feature_dim: int, rng: np.random.Generator, stem_dim: int = 16, roi_size: int = 4):
        self.stem_dim = stem_dim
        self.roi_size = roi_size
        self.stage1 = Affine("stem.stage1", 3, stem_dim, rng, group="stem")
        self.stage2 = Affine("stem.stage2", stem_dim, stem_dim, rng, group="stem")
        self.c5 = Affine("stem.c5", stem_dim, feature_dim, rng, group="stem")
        self.stem_calls = 0

    def backbone_stem(self, img: Image) -> Tensor:
        self.stem_calls += 1
        x = Tensor(img.pixels)
        x = avg_pool2x2(relu(self.stage1.conv(x)))
        return avg_pool2x2(relu(self.stage2.conv(x)))

    def pool_target(self, featmap: Tensor, box: BoxPx, kind: TargetKind) -> TargetFeature:
        r = self.roi_size
        return TargetFeature(kind, self.c5.conv(roi_pool(featmap, box, (r, r))))

    def scene_box(self, img: Image) -> BoxPx:
        return BoxPx(0.0, 0.0, float(img.width), float(img.height))

    def extract_targets(self, img: Image, b_h: BoxPx, b_o: BoxPx) -> tuple[TargetFeature, TargetFeature, TargetFeature]:
        return self.extract_pairs(img, [(b_h, b_o)])[0]

    def extract_pairs(
        self, img: Image, pairs: list[tuple[BoxPx, BoxPx]]
    ) -> list[tuple[TargetFeature, TargetFeature, TargetFeature]]:
        """Run the stem once and pool (f_s, f_h, f_o) for every pair of one image."""
        fmap = self.backbone_stem(img)
        f_s = self.pool_target(fmap, self.scene_box(img), TargetKind.SCENE)
        out = []
        for b_h, b_o in pairs:
            f_h = self.pool_target(fmap, b_h.clip(img.width, img.height), TargetKind.HUMAN)
            f_o = self.pool_target(fmap, b_o.clip(img.width, img.height), TargetKind.OBJECT)
            out.append((f_s, f_h, f_o))
        return out

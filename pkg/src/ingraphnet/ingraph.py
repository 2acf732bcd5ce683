"""The in-Graph block.

Two target feature maps are projected into a shared node space (2N nodes with
2C channels each), nodes exchange messages through a learned dense adjacency
with a residual path, and the reasoned nodes are scattered back onto the
spatial grid with the same projection weights, transposed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .layers import Affine, Module
from .tensor import DimensionError, Parameter, Tensor, add, concat, matmul, reshape, transpose


@dataclass(frozen=True)
class InGraphConfig:
    feature_dim: int = 32
    reduced_dim: int = 16
    node_count: int = 8

    def __post_init__(self):
        for field in ("feature_dim", "reduced_dim", "node_count"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1, got {getattr(self, field)}")


class TargetKind(str, Enum):
    SCENE = "scene"
    HUMAN = "human"
    OBJECT = "object"


@dataclass
class TargetFeature:
    kind: TargetKind
    map: Tensor

    def __post_init__(self):
        if self.map.data.ndim != 3 or min(self.map.shape[:2]) < 1:
            raise DimensionError(f"{self.kind} feature must be [H,W,D], got {list(self.map.shape)}")


@dataclass
class ProjectionState:
    V: Tensor  # [2N, 2C]
    B: Tensor  # [2N, L]
    X_r: Tensor  # [L, 2C]
    L: int


class InGraph(Module):
    """Learnable parameters of one in-Graph instance.

    Parameter names follow ``ingraph.<instance>.<group>``.
    """

    def __init__(self, instance: str, cfg: InGraphConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.instance = instance
        prefix = f"ingraph.{instance}"
        d, c, n = cfg.feature_dim, cfg.reduced_dim, cfg.node_count
        self.phi1 = Affine(f"{prefix}.w_phi1", d, c, rng, group="W_phi")
        self.phi2 = Affine(f"{prefix}.w_phi2", d, c, rng, group="W_phi")
        self.theta1 = Affine(f"{prefix}.w_theta1", d, n, rng, group="W_theta")
        self.theta2 = Affine(f"{prefix}.w_theta2", d, n, rng, group="W_theta")
        # zero adjacency: the block starts as pure residual reasoning
        self.A = Parameter(f"{prefix}.A", np.zeros((2 * n, 2 * n)), group="A")
        self.out = Affine(f"{prefix}.w_out", 2 * c, d, rng, group="W_out")

    def __call__(self, x1: TargetFeature, x2: TargetFeature) -> Tensor:
        return in_graph_forward(x1, x2, self)


def _check_pair(x1: TargetFeature, x2: TargetFeature, p: InGraph) -> None:
    if x1.map.shape != x2.map.shape:
        raise DimensionError(
            f"in-Graph targets differ in shape: {x1.kind.value} {list(x1.map.shape)} "
            f"vs {x2.kind.value} {list(x2.map.shape)}"
        )
    if x1.map.shape[2] != p.cfg.feature_dim:
        raise DimensionError(f"feature depth {x1.map.shape[2]} != configured D={p.cfg.feature_dim}")


def project(x1: TargetFeature, x2: TargetFeature, p: InGraph) -> ProjectionState:
    """Feature conversion, weights inference and linear combination ``V = B @ X_r``."""
    _check_pair(x1, x2, p)
    h, w, _ = x1.map.shape
    L = h * w
    c, n = p.cfg.reduced_dim, p.cfg.node_count
    x_r = concat(
        [reshape(p.phi1.conv(x1.map), (L, c)), reshape(p.phi2.conv(x2.map), (L, c))],
        axis=1,
    )
    # conv output is location-major [L, N]; weights are node-major [N, L]
    b1 = transpose(reshape(p.theta1.conv(x1.map), (L, n)))
    b2 = transpose(reshape(p.theta2.conv(x2.map), (L, n)))
    B = concat([b1, b2], axis=0)
    return ProjectionState(V=matmul(B, x_r), B=B, X_r=x_r, L=L)


def message_pass(state: ProjectionState, p: InGraph) -> Tensor:
    """``V' = A @ V + V``; A mixes nodes and is shared by every channel."""
    return add(matmul(p.A, state.V), state.V)


def update(v_prime: Tensor, state: ProjectionState, p: InGraph, out_shape: tuple[int, int]) -> Tensor:
    """Scatter nodes back with ``B^T`` and expand 2C channels to D."""
    h, w = out_shape
    if h * w != state.L:
        raise DimensionError(f"update: out_shape {h}x{w} does not match L={state.L}")
    y = matmul(transpose(state.B), v_prime)
    return p.out.conv(reshape(y, (h, w, y.shape[1])))


def in_graph_forward(x1: TargetFeature, x2: TargetFeature, p: InGraph) -> Tensor:
    state = project(x1, x2, p)
    return update(message_pass(state, p), state, p, x1.map.shape[:2])

"""Central finite-difference checks for every op and for the full network.

Errors are reported per group as ``max |analytic - numeric| / max(|numeric|)``
over the checked coordinates, i.e. relative to the group's gradient scale, so
tiny individual entries do not blow up the ratio.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataset import SynthConfig, generate_synthetic
from .features import BoxPx, roi_bins
from .ingraph import InGraphConfig
from .network import Ablation, InGraphNet, NetConfig, loss as net_loss
from .tensor import Parameter, Tensor
from .training import SampleSource, build_pairs

STEP = 1e-5
TOLERANCE = 1e-4
NETWORK_GROUPS = ("W_phi", "W_theta", "A", "W_out", "heads", "stem")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic, numeric = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(analytic), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_grad(f: Callable[[], float], arr: np.ndarray, coords: Iterable[int], step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. selected flat entries of ``arr`` (modified in place, restored)."""
    if not arr.flags.c_contiguous:
        raise ValueError("numeric_grad needs a C-contiguous array to perturb in place")
    flat = arr.reshape(-1)
    out = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * step))
    return np.array(out)


def check_function(build: Callable[[list[Tensor]], Tensor], inputs: list[Tensor]) -> float:
    """Gradient check of a scalar-valued graph over all entries of ``inputs``."""
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    T.backward(build(inputs))
    worst = 0.0
    for x in inputs:
        analytic = x.grad.reshape(-1).copy()
        numeric = numeric_grad(lambda: build(inputs).item(), x.data, range(x.size))
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)`` touching every output entry."""
    return T.sum_all(T.mul(out, Tensor(weights.reshape(out.shape))))


def op_suite(rng: np.random.Generator) -> dict[str, float]:
    """Max relative error per differentiable op on small random shapes."""
    def r(*shape):
        return Tensor(rng.normal(size=shape))

    def probed(fn, out_shape):
        w = rng.normal(size=out_shape)
        return lambda xs: _probe(fn(xs), w)

    results = {}
    results["matmul"] = check_function(probed(lambda xs: T.matmul(xs[0], xs[1]), (4, 2)), [r(4, 3), r(3, 2)])
    results["transpose"] = check_function(probed(lambda xs: T.transpose(xs[0]), (3, 4)), [r(4, 3)])
    results["conv1x1"] = check_function(
        probed(lambda xs: T.conv1x1(xs[0], xs[1], xs[2]), (2, 3, 2)), [r(2, 3, 3), r(3, 2), r(2)]
    )
    results["fully_connected"] = check_function(
        probed(lambda xs: T.fully_connected(xs[0], xs[1], xs[2]), (2,)), [r(3), r(3, 2), r(2)]
    )
    results["reshape"] = check_function(probed(lambda xs: T.reshape(xs[0], (4, 3)), (4, 3)), [r(2, 2, 3)])
    results["concat"] = check_function(
        probed(lambda xs: T.concat([xs[0], xs[1]], axis=1), (3, 5)), [r(3, 2), r(3, 3)]
    )
    results["take"] = check_function(probed(lambda xs: xs[0][1:3, 0], (2,)), [r(4, 2)])
    results["add"] = check_function(probed(lambda xs: T.add(xs[0], xs[1]), (3, 2)), [r(3, 2), r(3, 2)])
    results["mul"] = check_function(probed(lambda xs: T.mul(xs[0], xs[1]), (3, 2)), [r(3, 2), r(3, 2)])
    results["scale"] = check_function(probed(lambda xs: T.scale(xs[0], 0.3), (3,)), [r(3)])
    # keep pre-activations away from the kink
    x = r(3, 4)
    x.data = np.where(np.abs(x.data) < 0.05, 0.5, x.data)
    results["relu"] = check_function(probed(lambda xs: T.relu(xs[0]), (3, 4)), [x])
    results["sigmoid"] = check_function(probed(lambda xs: T.sigmoid(xs[0]), (3, 4)), [r(3, 4)])
    results["global_avg_pool"] = check_function(probed(lambda xs: T.global_avg_pool(xs[0]), (2,)), [r(3, 3, 2)])
    results["avg_pool2x2"] = check_function(probed(lambda xs: T.avg_pool2x2(xs[0]), (2, 2, 2)), [r(4, 5, 2)])
    fmap = r(6, 6, 2)
    bins = roi_bins(BoxPx(1, 1, 5, 5), (6, 6), (2, 2), stride=1)
    results["max_pool_bins"] = check_function(probed(lambda xs: T.max_pool_bins(xs[0], bins, (2, 2)), (2, 2, 2)), [fmap])
    target = np.array([1.0, 0.0, 1.0, 0.0])
    pred = Tensor(rng.uniform(0.1, 0.9, size=4))
    results["bce_loss"] = check_function(lambda xs: T.bce_loss(xs[0], target), [pred])
    results["sum"] = check_function(lambda xs: T.sum_all(xs[0]), [r(2, 3)])
    return results


def desk_network(seed: int = 0, ablation: Ablation | None = None) -> tuple[InGraphNet, list, SampleSource]:
    """A desk-scale network with a randomised adjacency and two samples with mixed labels."""
    rng = np.random.default_rng(seed)
    cfg = NetConfig(ingraph=InGraphConfig(32, 16, 8), ablation=ablation or Ablation())
    model = InGraphNet(cfg, rng)
    for g in model.graphs.values():
        g.A.data = rng.normal(scale=0.1, size=g.A.shape)
    for p in model.parameters():
        if p.name.endswith(".bias"):
            p.data = rng.normal(scale=0.05, size=p.shape)
    images, anns = generate_synthetic(SynthConfig(num_images=2, seed=seed))
    items = build_pairs(anns, cfg.num_categories, cfg.pattern_size)[:2]
    for it, labels in zip(items, ([1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0])):
        it.labels = np.array(labels)
    return model, items, SampleSource(model, images, anns)


def _same_piece(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class NetworkCheck:
    errors: dict[str, float]
    checked: dict[str, int]
    skipped: dict[str, int]  # coordinates whose +/- step crossed a ReLU or max-pool kink


def network_check(seed: int = 0, per_tensor: int = 6) -> NetworkCheck:
    """Finite-difference check of the summed loss of two samples, per parameter group.

    Every parameter tensor contributes ``per_tensor`` randomly chosen entries
    plus its largest-gradient entry. A central difference is only compared when
    both probes land on the same ReLU/max-pool piece as the base point;
    otherwise it measures the kink, not the gradient, and is counted as skipped.
    """
    model, items, source = desk_network(seed)

    def total_loss() -> Tensor:
        out = None
        for s in source.samples(items):
            term = net_loss(model(s), s.labels)
            out = term if out is None else T.add(out, term)
        return out

    def probe() -> tuple[float, list[np.ndarray]]:
        with T.track_kinks() as kinks:
            value = total_loss().item()
        return value, kinks

    params: list[Parameter] = list(model.parameters())
    T.zero_grad(params)
    with T.track_kinks() as base:
        T.backward(total_loss())
    rng = np.random.default_rng(seed + 1)
    analytic: dict[str, list[float]] = {g: [] for g in NETWORK_GROUPS}
    numeric: dict[str, list[float]] = {g: [] for g in NETWORK_GROUPS}
    skipped = {g: 0 for g in NETWORK_GROUPS}
    for p in params:
        grad = p.grad.reshape(-1).copy()
        coords = set(rng.choice(p.size, size=min(per_tensor, p.size), replace=False).tolist())
        coords.add(int(np.argmax(np.abs(grad))))
        flat = p.data.reshape(-1)
        for i in sorted(coords):
            orig = flat[i]
            flat[i] = orig + STEP
            fp, kp = probe()
            flat[i] = orig - STEP
            fm, km = probe()
            flat[i] = orig
            if not (_same_piece(kp, base) and _same_piece(km, base)):
                skipped[p.group] += 1
                continue
            analytic[p.group].append(grad[i])
            numeric[p.group].append((fp - fm) / (2 * STEP))
    return NetworkCheck(
        errors={g: relative_error(np.array(analytic[g]), np.array(numeric[g])) for g in NETWORK_GROUPS},
        checked={g: len(analytic[g]) for g in NETWORK_GROUPS},
        skipped=skipped,
    )


def run(seed: int = 0, per_tensor: int = 6) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    results = {f"op.{k}": v for k, v in op_suite(rng).items()}
    results.update({f"net.{k}": v for k, v in network_check(seed, per_tensor).errors.items()})
    return results

"""Ablation harness: the five in-Graph configurations and a node-count sweep."""

from __future__ import annotations

import dataclasses
import json
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

from .network import ABLATIONS
from .training import RunConfig, evaluate, load_dataset, new_model, read_features, train

CONFIG_ORDER = ("baseline", "concat", "scene_wide", "instance_wide", "full")


@dataclass
class AblationRow:
    name: str
    node_count: int
    parameters: int
    final_loss: float
    role_map: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AblationReport:
    configurations: list[AblationRow]
    node_sweep: list[AblationRow]

    def to_json(self) -> dict:
        return {
            "configurations": [r.to_json() for r in self.configurations],
            "node_sweep": [r.to_json() for r in self.node_sweep],
        }

    def table(self) -> str:
        head = f"{'configuration':<16} {'N':>3} {'params':>8} {'loss':>8} {'mAP':>8}"
        lines = [head]
        for r in self.configurations:
            lines.append(f"{r.name:<16} {r.node_count:>3} {r.parameters:>8} {r.final_loss:>8.4f} {r.role_map:>8.4f}")
        lines.append("")
        lines.append(head)
        for r in self.node_sweep:
            lines.append(f"{'full N=' + str(r.node_count):<16} {r.node_count:>3} {r.parameters:>8} "
                         f"{r.final_loss:>8.4f} {r.role_map:>8.4f}")
        return "\n".join(lines)


def _run(cfg: RunConfig, name: str, images, anns, features) -> AblationRow:
    model = new_model(cfg)
    result = train(cfg, images, anns, model=model, features=features)
    _, report = evaluate(result.model, images, anns, noise=cfg.noise, seed=cfg.seed, features=features)
    tail = result.history[-min(10, len(result.history)):]
    return AblationRow(
        name=name,
        node_count=cfg.node_count,
        parameters=model.num_parameters(),
        final_loss=sum(r["loss"] for r in tail) / len(tail),
        role_map=report.role_map,
    )


def run_ablation(cfg: RunConfig, log: Callable[[dict], None] | None = None) -> AblationReport:
    """Train and evaluate every configuration on the same data with the same seed."""
    images, anns = load_dataset(cfg.data_dir)
    features = read_features(cfg.features) if cfg.features else None
    rows = []
    for name in CONFIG_ORDER:
        ab = ABLATIONS[name]
        sub = dataclasses.replace(cfg, scene_wide=ab.scene_wide, instance_wide=ab.instance_wide,
                                  concat_only=ab.concat_only)
        rows.append(_run(sub, name, images, anns, features))
        if log:
            log({"configuration": name, **rows[-1].to_json()})
    sweep = []
    for n in cfg.node_sweep:
        sub = dataclasses.replace(cfg, node_count=n, scene_wide=True, instance_wide=True, concat_only=False)
        sweep.append(_run(sub, "full", images, anns, features))
        if log:
            log({"node_sweep": n, **sweep[-1].to_json()})
    return AblationReport(rows, sweep)


def write_ablation(path: str | Path, report: AblationReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n")
    Path(path).with_suffix(".txt").write_text(report.table() + "\n")

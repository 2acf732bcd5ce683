"""Overfit 200 synthetic images and print the loss reduction and role mAP."""

import json
import sys
import time
from pathlib import Path

from ingraphnet.dataset import SynthConfig, generate_synthetic
from ingraphnet.training import RunConfig, dataset_loss, evaluate, train


def main():
    cfg = RunConfig(**json.loads((Path(__file__).with_name("overfit.json")).read_text()))
    images, anns = generate_synthetic(SynthConfig(num_images=200, seed=0, num_verbs=4))
    start = time.perf_counter()
    result = train(cfg, images, anns, log=lambda rec: print(json.dumps(rec), file=sys.stderr))
    initial = result.history[0]["loss"]
    final = dataset_loss(result.model, images, anns, cfg)
    _, report = evaluate(result.model, images, anns)
    print(f"loss {initial:.4f} -> {final:.4f} ({1 - final / initial:.1%} reduction)")
    print(report.table())
    print(f"{time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()

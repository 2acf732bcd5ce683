"""Generate a synthetic set, run the ablation grid and write the table next to it."""

import argparse
import tempfile
from pathlib import Path

from ingraphnet.ablation import run_ablation, write_ablation
from ingraphnet.dataset import SynthConfig, generate_synthetic, write_dataset
from ingraphnet.training import RunConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--images", type=int, default=60)
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--out", default="ablation.json")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        images, anns = generate_synthetic(SynthConfig(num_images=args.images, seed=0, num_verbs=4))
        write_dataset(Path(tmp), images, anns)
        cfg = RunConfig(data_dir=tmp, iterations=args.iterations, learning_rate=0.05, grad_clip=1.0,
                        lr_schedule="cosine", log_every=100)
        report = run_ablation(cfg, log=print)
    write_ablation(Path(args.out), report)
    print(report.table())


if __name__ == "__main__":
    main()

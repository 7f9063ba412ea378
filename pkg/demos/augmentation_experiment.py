"""Augmented vs non-augmented latent diffusion: copy rates over paired seeds.

Both arms share the corpus, the autoencoder and the detector. The augmented
arm trains the denoiser on encodings of all 48 orientations of each training
volume; the other arm sees each volume as stored.

    python demos/augmentation_experiment.py [run_root] [seeds]
"""
import sys
from pathlib import Path

from memaudit import pipeline as pl


def main(root, seeds):
    res = pl.Run(Path(root), pl.make_config()).experiment(seeds)
    print(f"{'seed':<6}{'aug':>8}{'noaug':>8}")
    for row in res["per_seed"]:
        print(f"{row['seed_index']:<6}{row['copy_rate_aug']:>8.3f}{row['copy_rate_noaug']:>8.3f}")
    print(f"{'mean':<6}{res['copy_rate_aug']:>8.3f}{res['copy_rate_noaug']:>8.3f}")
    wins = sum(r["copy_rate_aug"] <= r["copy_rate_noaug"] for r in res["per_seed"])
    print(f"\naugmented arm copies no more than the plain arm in {wins} of {len(res['per_seed'])} pairs")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/experiment",
         int(sys.argv[2]) if len(sys.argv) > 2 else 3)

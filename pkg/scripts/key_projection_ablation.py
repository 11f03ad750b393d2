"""Compare the two key-projection readings of the event loss on the synthetic data.

"own" projects every key onto its own sample's teacher embedding, "query"
projects all keys onto the querying sample's teacher embedding.

    python scripts/key_projection_ablation.py --config configs/synth.cfg --steps 500
"""

import argparse
import logging
from pathlib import Path

from evssl.config import load_config
from evssl.losses import KEY_PROJECTION_MODES
from evssl.study import evaluate_run
from evssl.synth import gen_dataset
from evssl.trainer import Dataset, model_dims, pretrain


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/synth.cfg")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--out", type=Path, default=Path("runs/key_projection"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config).with_overrides(optim={"steps": args.steps})
    if not cfg.manifest_path.is_file():
        gen_dataset(cfg.synth, cfg.manifest_path.parent, "train")
        gen_dataset(cfg.synth, cfg.manifest_path.parent, "val")
    dims = model_dims(cfg)
    train = Dataset.load(cfg.manifest_path, dims.proj_dim)
    val = Dataset.load(cfg.val_manifest_path, dims.proj_dim)
    print(f"{'mode':<8}{'head cos':>10}{'head erank':>12}{'probe top1':>12}")
    for mode in KEY_PROJECTION_MODES:
        run = cfg.with_overrides(loss={"key_projection_mode": mode}, run={"out_dir": str((args.out / mode).resolve())})
        ckpt, _ = pretrain(run, dataset=train)
        r = evaluate_run(run, ckpt, train, val, mode)
        print(f"{mode:<8}{r.head_metrics['mean_pairwise_cos']:>10.4f}{r.head_metrics['effective_rank']:>12.3f}{r.probe_accuracy:>12.4f}")


if __name__ == "__main__":
    main()

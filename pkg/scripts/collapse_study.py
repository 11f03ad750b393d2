"""Matched projection-vs-vanilla pre-training on the synthetic dataset.

Generates the dataset next to the config if it is missing, trains both runs,
prints the comparison table and optionally freezes the observed numbers as the
acceptance fixture.

    python scripts/collapse_study.py --config configs/synth.cfg [--freeze tests/fixtures/collapse_oracle.json]
"""

import argparse
import json
import logging
from pathlib import Path

from evssl.config import load_config
from evssl.study import MODES, StudyResult, collapse_study, evaluate_run, format_table
from evssl.synth import gen_dataset
from evssl.trainer import Dataset, model_dims


def fixture_record(r: StudyResult) -> dict:
    return {
        "head_cos": r.head_metrics["mean_pairwise_cos"],
        "head_erank": r.head_metrics["effective_rank"],
        "feat_cos": r.feature_metrics["mean_pairwise_cos"],
        "feat_erank": r.feature_metrics["effective_rank"],
        "probe": r.probe_accuracy,
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/synth.cfg")
    ap.add_argument("--out", help="run directory (default: [run] out_dir)")
    ap.add_argument("--evaluate-only", action="store_true", help="reuse <out>/<mode>/final.evck instead of training")
    ap.add_argument("--freeze", type=Path, help="write observed metrics to this JSON fixture")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.out_dir
    if not cfg.manifest_path.is_file():
        gen_dataset(cfg.synth, cfg.manifest_path.parent, "train")
        gen_dataset(cfg.synth, cfg.manifest_path.parent, "val")

    if args.evaluate_only:
        dims = model_dims(cfg)
        train = Dataset.load(cfg.manifest_path, dims.proj_dim)
        val = Dataset.load(cfg.val_manifest_path, dims.proj_dim)
        results = {m: evaluate_run(cfg, out / m / "final.evck", train, val, m) for m in MODES}
    else:
        results = collapse_study(cfg, out)
    print(format_table(results))

    if args.freeze:
        record = {m: fixture_record(r) for m, r in results.items()}
        record["config"] = str(args.config)
        args.freeze.write_text(json.dumps(record, indent=2) + "\n")
        print(f"froze {args.freeze}")


if __name__ == "__main__":
    main()

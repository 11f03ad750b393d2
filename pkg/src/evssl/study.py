"""Matched comparison of the projection event loss against vanilla event InfoNCE.

Both runs share every setting and the seed; only ``loss.event_loss`` differs.
Collapse is measured on validation embeddings from the online event head and
from raw encoder features; the linear probe is fitted on frozen training
features and scored on validation features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .evalkit import EmbeddingTable, collapse_metrics, embed_streams, linear_probe
from .model import load_checkpoint
from .trainer import Dataset, model_dims, pretrain

log = logging.getLogger(__name__)

MODES = ("projection", "vanilla")


@dataclass(frozen=True)
class StudyResult:
    mode: str
    checkpoint: Path
    head_metrics: dict[str, float]
    feature_metrics: dict[str, float]
    probe_accuracy: float


def evaluate_run(cfg: RunConfig, checkpoint, train: Dataset, val: Dataset, mode: str) -> StudyResult:
    state = load_checkpoint(checkpoint)
    w, h = cfg.augment.out_width, cfg.augment.out_height
    view = cfg.dims.view
    val_head = embed_streams(state, val.streams, view, w, h, head="evt")
    val_feat = embed_streams(state, val.streams, view, w, h)
    train_feat = embed_streams(state, train.streams, view, w, h)
    acc = linear_probe(
        EmbeddingTable(train_feat, train.labels),
        EmbeddingTable(val_feat, val.labels),
        cfg.probe.epochs,
        cfg.probe.lr,
    )
    return StudyResult(mode, Path(checkpoint), collapse_metrics(val_head), collapse_metrics(val_feat), acc)


def collapse_study(cfg: RunConfig, out_dir: Path | None = None) -> dict[str, StudyResult]:
    out_dir = Path(out_dir) if out_dir is not None else cfg.out_dir
    dims = model_dims(cfg)
    train = Dataset.load(cfg.manifest_path, dims.proj_dim)
    if cfg.val_manifest_path is None:
        raise ValueError("collapse study needs [data] val_manifest")
    val = Dataset.load(cfg.val_manifest_path, dims.proj_dim)
    results = {}
    for mode in MODES:
        run_cfg = cfg.with_overrides(loss={"event_loss": mode}, run={"out_dir": str((out_dir / mode).resolve())})
        log.info("collapse study: training %s run", mode)
        ckpt, _ = pretrain(run_cfg, dataset=train)
        results[mode] = evaluate_run(run_cfg, ckpt, train, val, mode)
    return results


def format_table(results: dict[str, StudyResult]) -> str:
    head = f"{'event loss':<12}{'head cos':>10}{'head erank':>12}{'feat cos':>10}{'feat erank':>12}{'probe top1':>12}"
    lines = [head, "-" * len(head)]
    for mode, r in results.items():
        lines.append(
            f"{mode:<12}{r.head_metrics['mean_pairwise_cos']:>10.4f}{r.head_metrics['effective_rank']:>12.3f}"
            f"{r.feature_metrics['mean_pairwise_cos']:>10.4f}{r.feature_metrics['effective_rank']:>12.3f}"
            f"{r.probe_accuracy:>12.4f}"
        )
    return "\n".join(lines)

"""Command-line entry point: ``evssl <command> [flags]``.

Exit codes: 0 success, 1 domain or I/O error, 2 usage error. Machine-readable
results go to files (or stdout for the summary tables), logs go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import EvsslError
from .evalkit import EmbeddingTable, embed_dataset, linear_probe, load_etab, save_etab
from .events import read_evt1
from .gradcheck import TOLERANCE, run_suite
from .losses import EVENT_LOSSES
from .study import collapse_study, format_table
from .synth import gen_dataset
from .trainer import pretrain
from .viewgen import event_histogram, image_patches, info_quantities, patch_distribution

log = logging.getLogger("evssl")

HIST_HELP = (
    "write the raw two-plane event histogram as a multi-image binary PGM: "
    "page 1 holds positive counts, page 2 negative counts, maxval = largest count (capped at 65535)"
)
PROBS_HELP = "write the patch sampling distribution as CSV with header index,row,col,d,prob (d = L1 norm of the normalized patch)"


def _config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    return cfg if seed is None else cfg.with_overrides(run={"seed": seed}, synth={"seed": seed})


def cmd_synth_gen(args) -> int:
    cfg = _with_seed(_config(args.config), args.seed)
    out = Path(args.out) if args.out else cfg.manifest_path.parent
    train = gen_dataset(cfg.synth, out, "train")
    log.info("wrote %s", train)
    if cfg.synth.val_samples_per_class > 0:
        log.info("wrote %s", gen_dataset(cfg.synth, out, "val"))
    return 0


def _run_overrides(cfg: RunConfig, args) -> RunConfig:
    cfg = _with_seed(cfg, args.seed)
    if args.out:
        cfg = cfg.with_overrides(run={"out_dir": str(Path(args.out).resolve())})
    if args.steps is not None:
        cfg = cfg.with_overrides(optim={"steps": args.steps})
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _run_overrides(_config(args.config), args)
    if args.event_loss:
        cfg = cfg.with_overrides(loss={"event_loss": args.event_loss})
    final, metrics = pretrain(cfg, resume=args.resume)
    print(f"checkpoint\t{final}")
    print(f"metrics\t{metrics}")
    return 0


def cmd_embed(args) -> int:
    cfg = _config(args.config)
    manifest = args.manifest or cfg.manifest_path
    tab = embed_dataset(args.checkpoint, manifest, cfg.dims.view, cfg.augment.out_width, cfg.augment.out_height, head=args.head)
    save_etab(args.out, tab)
    log.info("embedded %d rows of width %d -> %s", *tab.rows.shape, args.out)
    return 0


def cmd_probe(args) -> int:
    train, test = load_etab(args.train), load_etab(args.test)
    if args.shuffle_labels and train.labels is not None:
        rng = np.random.default_rng(args.seed)
        train = EmbeddingTable(train.rows, rng.permutation(train.labels), train.provenance)
    acc = linear_probe(train, test, args.epochs, args.lr)
    print(f"top1\t{acc:.6f}")
    return 0


def _write_pgm(path: Path, planes: np.ndarray) -> None:
    maxval = int(min(max(planes.max(initial=0), 1), 65535))
    dtype = ">u1" if maxval < 256 else ">u2"
    with open(path, "wb") as fh:
        for plane in planes:
            h, w = plane.shape
            fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
            fh.write(np.minimum(plane, maxval).astype(dtype).tobytes())


def cmd_inspect(args) -> int:
    cfg = _config(args.config)
    stream = read_evt1(args.events)
    hist = event_histogram(stream)
    print(f"events\t{len(stream)}")
    print(f"geometry\t{stream.width}x{stream.height}")
    print(f"positive\t{int(hist.values[0].sum())}")
    print(f"negative\t{int(hist.values[1].sum())}")
    if args.dump_hist:
        _write_pgm(Path(args.dump_hist), hist.values)
    if args.dump_probs:
        mat, (gh, gw) = image_patches(stream, cfg.dims.view)
        d = info_quantities(mat)
        prob = patch_distribution(d)
        lines = ["index,row,col,d,prob"]
        lines += [f"{i},{i // gw},{i % gw},{float(d[i])!r},{float(prob[i])!r}" for i in range(gh * gw)]
        Path(args.dump_probs).write_text("\n".join(lines) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    worst = run_suite(args.seed)
    ok = True
    for name, err in worst.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:<16}{err:.3e}\t{'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_collapse_study(args) -> int:
    cfg = _run_overrides(_config(args.config), args)
    results = collapse_study(cfg, cfg.out_dir)
    print(format_table(results))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evssl", description="Event-camera self-supervised pre-training toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    parser.set_defaults(subparsers=sub.choices)

    p = sub.add_parser("synth-gen", help="generate the synthetic paired dataset")
    p.add_argument("--config", help="run config (the [synth] section is used)")
    p.add_argument("--out", help="output directory (default: directory of [data] manifest)")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.set_defaults(func=cmd_synth_gen)

    for name, fn, hlp in (
        ("pretrain", cmd_pretrain, "pre-train from a config"),
        ("collapse-study", cmd_collapse_study, "matched projection vs vanilla pre-training and collapse table"),
    ):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", help="run config file")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="override [run] out_dir")
        p.add_argument("--steps", type=int, help="override [optim] steps")
        if name == "pretrain":
            p.add_argument("--event-loss", choices=EVENT_LOSSES, help="override [loss] event_loss")
            p.add_argument("--resume", help="checkpoint to resume from")
        p.set_defaults(func=fn)

    p = sub.add_parser("embed", help="embed a manifest with a frozen checkpoint into an ETAB file")
    p.add_argument("--config", help="run config (view geometry)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="manifest to embed (default: [data] manifest)")
    p.add_argument("--out", required=True, help="output .etab path")
    p.add_argument("--head", choices=("evt", "img"), help="emit projection-head outputs instead of encoder features")
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; embedding views are deterministic")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", help="linear probe: train on one ETAB, report top-1 on another")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--shuffle-labels", action="store_true", help="permute training labels (chance-level control)")
    p.add_argument("--seed", type=int, default=0, help="seed for --shuffle-labels")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("inspect", help="summarize an EVT1 file and dump its histogram and patch distribution")
    p.add_argument("--events", required=True)
    p.add_argument("--config", help="run config (patch size and clip)")
    p.add_argument("--dump-hist", metavar="PATH", help=HIST_HELP)
    p.add_argument("--dump-probs", metavar="PATH", help=PROBS_HELP)
    p.add_argument("--seed", type=int, help="accepted for symmetry; inspection is deterministic")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss and the encoder")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            # report stray flags against the subcommand so its synopsis is shown
            args.subparsers[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (EvsslError, OSError, ValueError) as e:
        print(f"evssl {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

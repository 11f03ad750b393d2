"""Acceptance criteria, one test per criterion.

Each test appends a ``PASS``/``FAIL`` line that is printed in the pytest
terminal summary (section "acceptance criteria"). Run alone with::

    pytest tests/test_acceptance.py -v
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from evssl import gradcore as gc
from evssl import losses as L
from evssl.config import load_config
from evssl.evalkit import EmbeddingTable, decode_etab, embed_streams, encode_etab, linear_probe
from evssl.events import decode_evt1, encode_evt1
from evssl.gradcheck import TOLERANCE, run_suite
from evssl.model import (
    MOMENTUM_NAMES,
    ModelDims,
    decode_checkpoint,
    decode_tvec,
    encode_batch,
    encode_checkpoint,
    encode_tvec,
    init_model,
    load_checkpoint,
    project_batch,
)
from evssl.study import collapse_study, format_table
from evssl.synth import SynthConfig, gen_dataset
from evssl.trainer import Dataset, batch_indices, make_batch, model_dims, pretrain, train_step
from evssl.viewgen import event_histogram, sample_masks

from .conftest import ACCEPTANCE_LINES, random_stream
from .test_losses import kl_oracle, l_evt_oracle, l_rgb_oracle, nce_oracle, scores_oracle, unit

ROOT = Path(__file__).resolve().parents[1]
FIXTURE = Path(__file__).with_name("fixtures") / "collapse_oracle.json"


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def synth_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_full")
    cfg = SynthConfig()
    return gen_dataset(cfg, root, "train"), gen_dataset(cfg, root, "val")


def experiment_config(train, val, out_dir, steps=None):
    cfg = load_config(ROOT / "configs" / "synth.cfg")
    cfg = cfg.with_overrides(data={"manifest": str(train), "val_manifest": str(val)}, run={"out_dir": str(out_dir)})
    if steps is not None:
        cfg = cfg.with_overrides(optim={"steps": steps})
    return cfg


def test_gradient_correctness():
    t0 = time.perf_counter()
    worst = run_suite(seed=0, instances=20, b=4, e=8, d=16)
    elapsed = time.perf_counter() - t0
    ok = all(v < TOLERANCE for v in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report("gradient correctness", ok, f"{detail}; {elapsed:.1f}s (limit 30s)")


def test_closed_form_losses():
    errs = {}
    for tau in (1.0, 0.2):
        q = gc.constant(np.array([1.0, 0.0]))
        keys = gc.constant(np.eye(2))
        errs[f"nce tau={tau}"] = abs(L.info_nce(q, keys, 0, tau).item() - math.log(1 + math.exp(-1 / tau)))
    kl = L.l_kl(gc.constant(np.array([[0.8, 0.2]])), gc.constant(np.array([[0.5, 0.5]]))).item()
    errs["kl row"] = abs(kl - (0.8 * math.log(1.6) + 0.2 * math.log(0.4)))
    ok = errs["nce tau=1.0"] < 1e-6 and errs["nce tau=0.2"] < 1e-6 and errs["kl row"] < 1e-9

    derived = 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        q, k, qi = (rng.standard_normal((4, 8)) for _ in range(3))
        y = unit(rng.standard_normal((4, 8)))
        b = L.BatchEmbeddings.from_arrays(q, k, qi, y)
        pos = int(rng.integers(0, 8))
        keys = rng.standard_normal((8, 8))
        derived = max(
            derived,
            abs(L.info_nce(gc.constant(q[0]), gc.constant(keys), pos, 0.2).item() - nce_oracle(unit(q[0]), unit(keys), pos, 0.2)),
            abs(L.l_evt(b, 0.2).item() - l_evt_oracle(q, k, y, 0.2)),
            abs(L.l_evt(b, 0.2, "query").item() - l_evt_oracle(q, k, y, 0.2, "query")),
            abs(L.l_rgb(b, 0.2).item() - l_rgb_oracle(qi, y, 0.2)),
            abs(L.l_kl(L.pairwise_scores(gc.constant(qi), 0.2), L.pairwise_scores(gc.constant(y), 0.2)).item() - kl_oracle(scores_oracle(qi, 0.2), scores_oracle(y, 0.2))),
        )
    ok = ok and derived < 1e-10
    detail = ", ".join(f"{k} err={v:.1e}" for k, v in errs.items())
    report("closed-form losses", ok, f"{detail}; derived oracles max err={derived:.1e} (limit 1e-10)")


def test_masking_statistics():
    t0 = time.perf_counter()
    prob = np.array([0.25, 0.25, 0.5])
    draws = sample_masks(prob, 1, np.random.default_rng(0), trials=100_000)[:, 0]
    linf = float(np.max(np.abs(np.bincount(draws, minlength=3) / draws.size - prob)))
    sparse = np.array([0.0, 0.2, 0.0, 0.3, 1e-6, 0.0, 0.5 - 1e-6, 0.0])
    masks = sample_masks(sparse, 2, np.random.default_rng(1), trials=1_000_000)
    zero_hits = int(np.isin(masks, np.flatnonzero(sparse == 0)).sum())
    elapsed = time.perf_counter() - t0
    ok = linf < 0.01 and zero_hits == 0 and elapsed < 10
    report("conditional masking statistics", ok, f"L_inf={linf:.4f} (limit 0.01), zero-prob hits={zero_hits} in 1e6 trials, {elapsed:.1f}s (limit 10s)")


def test_pipeline_conservation_and_determinism(synth_data, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(1000):
        s = random_stream(rng, int(rng.integers(1, 64)), int(rng.integers(1, 64)), int(rng.integers(0, 2000)))
        bad += int(event_histogram(s).values.sum() != len(s))
    train, val = synth_data
    finals = [pretrain(experiment_config(train, val, tmp_path / name, steps=500))[0].read_bytes() for name in ("a", "b")]
    elapsed = time.perf_counter() - t0
    identical = finals[0] == finals[1]
    ok = bad == 0 and identical and elapsed < 300
    report(
        "pipeline conservation and determinism",
        ok,
        f"conservation failures={bad}/1000, 500-step checkpoints identical={identical}, {elapsed:.0f}s (limit 300s)",
    )


def test_ema_exactness(synth_data):
    train, val = synth_data
    cfg = experiment_config(train, val, "unused")
    data = Dataset.load(train, cfg.dims.proj_dim)
    state = init_model(0, model_dims(cfg))
    m = cfg.optim.ema_m
    mismatches = 0
    for step in range(5):
        batch = make_batch(data, batch_indices(cfg.seed, step, cfg.optim.batch_size, len(data)), cfg.augment, cfg.dims.view, cfg.seed, step)
        before = {k: v.copy() for k, v in state.momentum.items()}
        state, _ = train_step(state, batch, cfg)
        for k in MOMENTUM_NAMES:
            # documented order: m * theta_m first, (1 - m) * theta_e second, then the sum
            expect = np.add(np.multiply(m, before[k]), np.multiply(1.0 - m, state.online[k]))
            mismatches += int(np.count_nonzero(state.momentum[k] != expect))
    report("EMA exactness", mismatches == 0, f"{mismatches} mismatching elements over 5 steps")


@pytest.fixture(scope="module")
def collapse_results(synth_data, tmp_path_factory):
    train, val = synth_data
    out = tmp_path_factory.mktemp("collapse")
    cfg = experiment_config(train, val, out)
    t0 = time.perf_counter()
    results = collapse_study(cfg, out)
    elapsed = time.perf_counter() - t0
    print(format_table(results))
    return cfg, results, elapsed, out


def test_collapse_avoidance(collapse_results):
    cfg, results, elapsed, out = collapse_results
    proj, van = results["projection"], results["vanilla"]
    cos_ok = proj.head_metrics["mean_pairwise_cos"] < van.head_metrics["mean_pairwise_cos"]
    rank_ok = proj.head_metrics["effective_rank"] > van.head_metrics["effective_rank"]
    probe_ok = proj.probe_accuracy >= 0.85 and proj.probe_accuracy > van.probe_accuracy

    # oracle cross-check: the first logged loss equals the from-scratch oracle on the same batch
    train = Dataset.load(cfg.manifest_path, cfg.dims.proj_dim)
    state = init_model(cfg.seed, model_dims(cfg))
    batch = make_batch(train, batch_indices(cfg.seed, 0, cfg.optim.batch_size, len(train)), cfg.augment, cfg.dims.view, cfg.seed, 0)
    feats = encode_batch(state.encoder(), batch.x_q, state.dims)
    q = project_batch(state.head("evt"), feats).value
    qi = project_batch(state.head("img"), feats).value
    k = project_batch(state.head("evt", "momentum"), encode_batch(state.encoder("momentum"), batch.x_k, state.dims)).value
    tau, lam = cfg.loss.tau, cfg.loss.lambda1
    oracle = l_evt_oracle(q, k, batch.y, tau) + l_rgb_oracle(qi, batch.y, tau) + lam * kl_oracle(scores_oracle(qi, tau), scores_oracle(batch.y, tau))
    first = float((out / "projection" / "metrics.csv").read_text().splitlines()[1].split(",")[4])
    oracle_ok = abs(first - oracle) < 1e-9

    frozen = json.loads(FIXTURE.read_text())
    drift = max(
        abs(frozen[mode][key] - value)
        for mode, r in results.items()
        for key, value in {
            "head_cos": r.head_metrics["mean_pairwise_cos"],
            "head_erank": r.head_metrics["effective_rank"],
            "feat_cos": r.feature_metrics["mean_pairwise_cos"],
            "feat_erank": r.feature_metrics["effective_rank"],
            "probe": r.probe_accuracy,
        }.items()
    )
    reproduced = drift < 1e-9
    ok = cos_ok and rank_ok and probe_ok and oracle_ok and reproduced and elapsed < 600
    detail = (
        f"(a) head cos proj={proj.head_metrics['mean_pairwise_cos']:.4f} vs vanilla={van.head_metrics['mean_pairwise_cos']:.4f} [{'ok' if cos_ok else 'fail'}]; "
        f"(b) erank proj={proj.head_metrics['effective_rank']:.3f} vs vanilla={van.head_metrics['effective_rank']:.3f} [{'ok' if rank_ok else 'fail'}]; "
        f"(c) probe proj={proj.probe_accuracy:.4f} vs vanilla={van.probe_accuracy:.4f}, floor 0.85 [{'ok' if probe_ok else 'fail'}]; "
        f"loss oracle err={abs(first - oracle):.1e}; fixture drift={drift:.1e}; {elapsed:.0f}s (limit 600s)"
    )
    report("collapse-avoidance experiment", ok, detail)


def test_chance_level_control(collapse_results):
    cfg, results, _, _ = collapse_results
    train = Dataset.load(cfg.manifest_path, cfg.dims.proj_dim)
    val = Dataset.load(cfg.val_manifest_path, cfg.dims.proj_dim)
    state = load_checkpoint(results["projection"].checkpoint)
    w, h = cfg.augment.out_width, cfg.augment.out_height
    tr = embed_streams(state, train.streams, cfg.dims.view, w, h)
    va = embed_streams(state, val.streams, cfg.dims.view, w, h)
    accs = []
    for seed in range(20):
        shuffled = np.random.default_rng(seed).permutation(train.labels)
        accs.append(linear_probe(EmbeddingTable(tr, shuffled), EmbeddingTable(va, val.labels), cfg.probe.epochs, cfg.probe.lr, num_classes=4))
    mean = float(np.mean(accs))
    report("chance-level control", abs(mean - 0.25) <= 0.05, f"mean shuffled-label top-1 over 20 seeds={mean:.4f} (target 0.25 +/- 0.05)")


def test_format_fidelity():
    rng = np.random.default_rng(0)
    failures = {"EVT1": 0, "TVEC": 0, "EVCK": 0, "ETAB": 0}
    for _ in range(100):
        s = random_stream(rng, int(rng.integers(1, 2000)), int(rng.integers(1, 2000)), int(rng.integers(0, 500)), 2**32 - 1)
        data = encode_evt1(s)
        failures["EVT1"] += int(encode_evt1(decode_evt1(data)) != data or decode_evt1(data) != s)

        v = rng.standard_normal(int(rng.integers(1, 128)))
        data = encode_tvec(v / np.linalg.norm(v))
        failures["TVEC"] += int(encode_tvec(decode_tvec(data)) != data)

        dims = ModelDims(*(int(x) for x in rng.integers(1, 5, 2)), *(int(x) for x in rng.integers(1, 9, 2)))
        state = init_model(int(rng.integers(2**31)), dims)
        state.step = int(rng.integers(0, 2**40))
        state.m1 = {k: rng.standard_normal(a.shape) for k, a in state.m1.items()}
        state.m2 = {k: rng.random(a.shape) for k, a in state.m2.items()}
        data = encode_checkpoint(state)
        failures["EVCK"] += int(encode_checkpoint(decode_checkpoint(data)) != data)

        n = int(rng.integers(0, 50))
        labels = rng.integers(0, 1000, n) if rng.random() < 0.5 else None
        data = encode_etab(EmbeddingTable(rng.standard_normal((n, int(rng.integers(1, 20)))), labels))
        failures["ETAB"] += int(encode_etab(decode_etab(data)) != data)
    ok = not any(failures.values())
    report("format fidelity", ok, ", ".join(f"{k} {100 - v}/100 byte-identical" for k, v in failures.items()))

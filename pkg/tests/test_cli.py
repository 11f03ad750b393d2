import numpy as np
import pytest

from evssl.cli import main
from evssl.evalkit import load_etab
from evssl.events import EventStream, write_evt1


def write_cfg(tmp_path, steps=2):
    text = f"""
[data]
manifest = data/train.tsv
val_manifest = data/val.tsv
[synth]
samples_per_class = 4
val_samples_per_class = 2
events_per_sample = 500
[dims]
patch_size = 8
patches_per_view = 4
embed_dim = 8
[augment]
out_width = 32
out_height = 32
[optim]
steps = {steps}
batch_size = 4
[run]
out_dir = runs
checkpoint_every = 0
[probe]
epochs = 50
"""
    (tmp_path / "c.cfg").write_text(text)
    return str(tmp_path / "c.cfg")


def test_unknown_flag_exit_2(capsys):
    assert main(["gradcheck", "--bogus"]) == 2
    assert "usage: evssl gradcheck" in capsys.readouterr().err
    assert main([]) == 2


def test_pipeline(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["synth-gen", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    assert main(["pretrain", "--config", cfg]) == 0
    assert (tmp_path / "runs" / "final.evck").is_file() and (tmp_path / "runs" / "metrics.csv").is_file()
    assert main(["embed", "--config", cfg, "--checkpoint", str(tmp_path / "runs" / "final.evck"), "--out", str(tmp_path / "tr.etab")]) == 0
    assert main(["embed", "--config", cfg, "--checkpoint", str(tmp_path / "runs" / "final.evck"), "--manifest", str(tmp_path / "data" / "val.tsv"), "--out", str(tmp_path / "va.etab")]) == 0
    assert load_etab(tmp_path / "tr.etab").rows.shape == (16, 8)
    capsys.readouterr()
    assert main(["probe", "--train", str(tmp_path / "tr.etab"), "--test", str(tmp_path / "va.etab"), "--epochs", "20"]) == 0
    acc = float(capsys.readouterr().out.split()[-1])
    assert 0.0 <= acc <= 1.0


def test_pretrain_is_repeatable(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["synth-gen", "--config", cfg]) == 0
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5", "--event-loss", "projection"]) == 0
    assert (tmp_path / "a" / "final.evck").read_bytes() == (tmp_path / "b" / "final.evck").read_bytes()


def test_inspect_dumps(tmp_path):
    s = EventStream.from_events(4, 4, [(0, 0, 0, 1), (0, 0, 1, 1), (3, 2, 2, -1)])
    write_evt1(tmp_path / "e.evt1", s)
    (tmp_path / "c.cfg").write_text("[dims]\npatch_size = 2\n")
    args = ["inspect", "--events", str(tmp_path / "e.evt1"), "--config", str(tmp_path / "c.cfg")]
    assert main(args + ["--dump-hist", str(tmp_path / "h.pgm"), "--dump-probs", str(tmp_path / "p.csv")]) == 0
    pgm = (tmp_path / "h.pgm").read_bytes()
    page = b"P5\n4 4\n2\n"
    assert pgm.startswith(page) and pgm.count(page) == 2
    first = np.frombuffer(pgm[len(page) : len(page) + 16], dtype=np.uint8).reshape(4, 4)
    assert first[0, 0] == 2
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "index,row,col,d,prob" and len(rows) == 5
    probs = [float(r.split(",")[4]) for r in rows[1:]]
    assert probs == pytest.approx([0.2 / 0.3, 0.0, 0.0, 0.1 / 0.3])


def test_domain_error_exit_1(tmp_path, capsys):
    (tmp_path / "bad.evt1").write_bytes(b"NOPE")
    assert main(["inspect", "--events", str(tmp_path / "bad.evt1")]) == 1
    assert "BadMagic" in capsys.readouterr().err
    assert main(["probe", "--train", str(tmp_path / "x"), "--test", str(tmp_path / "y")]) == 1


def test_probe_shuffle_labels(tmp_path, capsys):
    from evssl.evalkit import EmbeddingTable, save_etab

    rng = np.random.default_rng(0)
    x = rng.standard_normal((40, 4))
    save_etab(tmp_path / "a.etab", EmbeddingTable(x, np.arange(40) % 4))
    args = ["probe", "--train", str(tmp_path / "a.etab"), "--test", str(tmp_path / "a.etab"), "--shuffle-labels", "--seed", "1"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first


@pytest.mark.slow
def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "L_total" in out and "FAIL" not in out

import json
import os
import subprocess
import sys

import pytest

from latentconv.cli import main
from latentconv.evalbench import read_pgm
from latentconv.synthcorpus import read_utterance

TINY = {"corpus": {"n_train": 8, "n_heldout": 4}}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(cfg), "--seed", "3", "--out", str(root / "data")]) == 0
    models = root / "models"
    assert main(["train-ae", "--config", str(cfg), "--data", str(root / "data"), "--out", str(models),
                 "--epochs", "1"]) == 0
    for kind in ("vg-dpm", "lvg-dpm", "vg-fm", "lvg-fm"):
        assert main(["train-gen", "--config", str(cfg), "--kind", kind, "--data", str(root / "data"),
                     "--out", str(models), "--epochs", "1"]) == 0
    return root, cfg


def listing(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*"))


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_flag_exits_one(capsys):
    assert main(["convert", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["no-such-command"]) == 1


def test_gen_data_layout(work):
    root, _ = work
    files = listing(root / "data")
    assert "spec.json" in files
    assert sum(f.endswith(".lvgu") for f in files) == 12
    meta = json.loads((root / "data" / "spec.json").read_text())
    assert meta["seed"] == 3 and meta["spec"]["n_train"] == 8


def test_training_outputs(work):
    root, _ = work
    files = set(listing(root / "models"))
    assert {"ae.ckpt", "disc.ckpt", "ae_loss.csv", "config.json"} <= files
    for kind, role in (("vg-dpm", "score"), ("lvg-dpm", "score"), ("vg-fm", "vfield"), ("lvg-fm", "vfield")):
        assert {f"{kind}.{role}.ckpt", f"{kind}.speaker-table.ckpt", f"{kind}_loss.csv"} <= files
    assert not any(f.startswith(".") for f in files)


def convert_args(root, cfg, out, *extra):
    return ["convert", "--config", str(cfg), "--kind", "lvg-fm", "--steps", "10", "--noise-frac", "0.7",
            "--target", "2", "--models", str(root / "models"), "--data", str(root / "data"),
            "--utt", "heldout_0000", "--out", str(out), *extra]


def test_convert_is_deterministic(work, tmp_path):
    root, cfg = work
    assert main(convert_args(root, cfg, tmp_path / "a.lvgu")) == 0
    assert main(convert_args(root, cfg, tmp_path / "b.lvgu")) == 0
    a, b = (tmp_path / "a.lvgu").read_bytes(), (tmp_path / "b.lvgu").read_bytes()
    assert a == b
    u = read_utterance(tmp_path / "a.lvgu")
    src = read_utterance(root / "data" / "heldout_0000.lvgu")
    assert u.speaker == 2 and u.features.shape == src.features.shape
    assert main(convert_args(root, cfg, tmp_path / "c.lvgu", "--seed", "9")) == 0
    assert (tmp_path / "c.lvgu").read_bytes() != a


@pytest.mark.parametrize("kind", ["vg-dpm", "lvg-dpm", "vg-fm"])
def test_convert_other_kinds(work, tmp_path, kind):
    root, cfg = work
    args = convert_args(root, cfg, tmp_path / "o.lvgu")
    args[args.index("--kind") + 1] = kind
    assert main(args + ["--lprime", "5"]) == 0


def test_convert_validation_leaves_nothing(work, tmp_path, capsys):
    root, cfg = work
    out = tmp_path / "sub" / "x.lvgu"
    args = convert_args(root, cfg, out)
    args[args.index("--target") + 1] = "7"
    assert main(args) == 1
    assert "target" in capsys.readouterr().err
    assert not out.exists() and not (tmp_path / "sub").exists()
    assert main(convert_args(root, cfg, out, "--noise-frac", "1.5")) == 1
    assert main(convert_args(root, cfg, out, "--lprime", "0")) == 1
    assert not (tmp_path / "sub").exists()


def test_bad_config_rejected_before_work(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"corpus": {"n_train": 8, "mystery": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert not (tmp_path / "d").exists()
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    bad.write_text(json.dumps({"corpus": {"n_speakers": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert listing(tmp_path) == ["bad.json"]


def test_latent_training_requires_autoencoder(work, tmp_path):
    root, cfg = work
    assert main(["train-gen", "--config", str(cfg), "--kind", "lvg-fm", "--data", str(root / "data"),
                 "--out", str(tmp_path / "m"), "--epochs", "1"]) == 1
    assert not (tmp_path / "m").exists()


def test_corrupt_checkpoint_is_runtime_error(work, tmp_path):
    root, cfg = work
    models = tmp_path / "models"
    models.mkdir()
    for f in (root / "models").iterdir():
        (models / f.name).write_bytes(f.read_bytes())
    data = bytearray((models / "vg-fm.vfield.ckpt").read_bytes())
    data[40] ^= 0xFF
    (models / "vg-fm.vfield.ckpt").write_bytes(bytes(data))
    args = convert_args(root, cfg, tmp_path / "x.lvgu")
    args[args.index("--kind") + 1] = "vg-fm"
    args[args.index("--models") + 1] = str(models)
    assert main(args) == 2
    assert not (tmp_path / "x.lvgu").exists()


def test_eval_sweep_bench_outputs(work, tmp_path):
    root, cfg = work
    common = ["--config", str(cfg), "--models", str(root / "models"), "--data", str(root / "data")]
    assert main(["eval", *common, "--kind", "vg-fm", "--out", str(tmp_path / "e.csv")]) == 0
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "name,target,hit,margin,content_acc" and lines[-1].startswith("ALL,")
    assert len(lines) == 2 + 4 * 3

    for axis, n in (("r", 11), ("L", 6)):
        a, b = tmp_path / f"s{axis}1.csv", tmp_path / f"s{axis}2.csv"
        assert main(["sweep", *common, "--kind", "lvg-fm", "--axis", axis, "--out", str(a)]) == 0
        assert main(["sweep", *common, "--kind", "lvg-fm", "--axis", axis, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert len(a.read_text().splitlines()) == 1 + n
    assert main(["sweep", *common, "--kind", "vg-dpm", "--out", str(tmp_path / "no.csv")]) == 1
    assert not (tmp_path / "no.csv").exists()

    assert main(["bench", *common, "--repetitions", "1", "--utterances", "1", "--threads", "1",
                 "--out", str(tmp_path / "b.csv")]) == 0
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert rows[0] == "kind,Lprime_or_L,nfe,ms_per_100_frames,param_count" and len(rows) == 5


def test_snapshot_writes_pgm_per_step(work, tmp_path):
    root, cfg = work
    args = ["snapshot", "--config", str(cfg), "--kind", "vg-fm", "--steps", "4", "--target", "1",
            "--models", str(root / "models"), "--data", str(root / "data"), "--utt", "heldout_0001",
            "--out", str(tmp_path / "snap")]
    assert main(args) == 0
    files = listing(tmp_path / "snap")
    assert files == ["converted.pgm", "source.pgm"] + [f"step_{i:03d}.pgm" for i in range(5)]
    src = read_utterance(root / "data" / "heldout_0001.lvgu")
    assert read_pgm(tmp_path / "snap" / "step_000.pgm").shape == src.features.shape


def test_console_entry_point_and_log_env(tmp_path):
    env = dict(os.environ, LVG_LOG="INFO")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    proc = subprocess.run([sys.executable, "-m", "latentconv.cli", "gen-data", "--config", str(cfg),
                           "--out", str(tmp_path / "d")], env=env, capture_output=True, text=True)
    assert proc.returncode == 0
    assert "INFO" in proc.stderr

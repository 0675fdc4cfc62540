import csv
import json

import numpy as np
import pytest

from pmpnet.cli import decade_radii, main, parse_value, resolve_config
from pmpnet.data import load_dataset, read_cloud
from pmpnet.losses import chamfer
from pmpnet.net import ConfigError

TINY = """\
# small architecture for fast tests
n_points = 32
sa_centers = 16, 8
sa_samples = 4, 4
sa_radii = 0.4, 0.8
sa_mlps = [[4, 4, 8], [8, 8, 8], [8, 8, 16]]
fp_mlps = [[8, 8], [8, 8], [8, 8, 8]]
head_mlp = 8, 4
noise_dim = 2
epochs = 2
batch_size = 4
"""


@pytest.fixture
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--out", str(out), "--count", "5", "--points", "32", "--seed", "3"]) == 0
    return out


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("1e-3") == 0.001
    assert parse_value("1, 0.1") == [1, 0.1]
    assert parse_value("[[1, 2], [3]]") == [[1, 2], [3]]
    assert parse_value("gru") == "gru"
    assert parse_value("True") is True


def test_gen_round_robin(tmp_path):
    out = tmp_path / "d"
    assert main(["gen", "--out", str(out), "--count", "10", "--points", "64", "--seed", "1"]) == 0
    pairs = load_dataset(out)
    cats = sorted(p.category for p in pairs)
    assert len(pairs) == 10 and all(cats.count(c) == 2 for c in set(cats)) and len(set(cats)) == 5
    for p in pairs:
        assert p.partial.shape == p.complete.shape == (64, 3)


def test_gen_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        main(["gen", "--out", str(tmp_path / name), "--count", "4", "--points", "32", "--seed", "9"])
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.xyz"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_falls_back_to_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PMP_SEED", "9")
    main(["gen", "--out", str(tmp_path / "env"), "--count", "2", "--points", "32"])
    main(["gen", "--out", str(tmp_path / "flag"), "--count", "2", "--points", "32", "--seed", "9"])
    a = sorted((tmp_path / "env").rglob("*.xyz"))
    b = sorted((tmp_path / "flag").rglob("*.xyz"))
    assert [x.read_bytes() for x in a] == [x.read_bytes() for x in b]
    assert json.loads((tmp_path / "env" / "manifest.json").read_text())["seed"] == 9


def test_config_precedence(tiny_cfg_file):
    net, tr = resolve_config(None, {})
    assert tr.epochs == 30 and net.noise_dim == 32
    net, tr = resolve_config(tiny_cfg_file, {})
    assert tr.epochs == 2 and net.noise_dim == 2
    net, tr = resolve_config(tiny_cfg_file, {"epochs": 7, "noise_dim": None})
    assert tr.epochs == 7 and net.noise_dim == 2


def test_steps_flag_implies_radius_schedule():
    net, _ = resolve_config(None, {"steps": 1})
    assert net.steps == 1 and net.radii == (1.0,)
    assert decade_radii(3) == [1.0, 0.1, 0.01]
    net, _ = resolve_config(None, {"radii": [1.0, 0.5]})
    assert net.steps == 2


def test_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    with pytest.raises(ConfigError):
        resolve_config(bad, {})


def test_train_complete_eval(tmp_path, dataset, tiny_cfg_file, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(run), "--config", str(tiny_cfg_file),
                 "--no-val", "--seed", "0"]) == 0
    assert (run / "model.ckpt").exists() and (run / "manifest.json").exists()
    assert len(read_rows(run / "metrics.csv")) == 3

    src = next(dataset.rglob("*.partial.xyz"))
    for repeat in (1, 8):
        out = tmp_path / f"dense{repeat}.xyz"
        assert main(["complete", "--checkpoint", str(run / "model.ckpt"), "--in", str(src),
                     "--out", str(out), "--repeat", str(repeat), "--seed", "4", "--trace", str(tmp_path / "tr")]) == 0
        assert read_cloud(out).shape == (32 * repeat, 3)
    # the union is the concatenation of the individual passes
    dense = read_cloud(tmp_path / "dense8.xyz")
    passes = [read_cloud(tmp_path / "tr" / f"pass{r}_step3.xyz") for r in range(8)]
    assert np.array_equal(dense, np.concatenate(passes))
    assert len(list((tmp_path / "tr").glob("pass*_step*.xyz"))) == 8 * 4

    ev = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(dataset),
                 "--metric", "cd-l2", "--out", str(ev)]) == 0
    rows = read_rows(ev)
    assert rows[0] == ["category", "count", "cd_l2_x1e4"]
    assert rows[-1][0] == "average" and len(rows) == 7


def test_eval_perfect_and_identity_predictors(tmp_path, dataset):
    for metric in ("cd-l1", "cd-l2", "emd"):
        out = tmp_path / f"{metric}.csv"
        assert main(["eval", "--data", str(dataset), "--predictor", "complete", "--metric", metric,
                     "--out", str(out)]) == 0
        assert all(float(r[2]) == 0.0 for r in read_rows(out)[1:])
        assert main(["eval", "--data", str(dataset), "--predictor", "partial", "--metric", metric,
                     "--out", str(out)]) == 0
        assert all(float(r[2]) > 0.0 for r in read_rows(out)[1:])


def test_eval_matches_external_recompute(tmp_path, dataset):
    out = tmp_path / "e.csv"
    main(["eval", "--data", str(dataset), "--predictor", "partial", "--metric", "cd-l1", "--out", str(out)])
    table = {r[0]: float(r[2]) for r in read_rows(out)[1:]}
    per_cat = {}
    for part in dataset.rglob("*.partial.xyz"):
        comp = part.with_name(part.name.replace("partial", "complete"))
        per_cat.setdefault(part.parent.name, []).append(chamfer(read_cloud(part), read_cloud(comp)).item())
    for cat, vals in per_cat.items():
        assert abs(table[cat] - np.mean(vals) * 1e3) < 1e-5
    assert abs(table["average"] - np.mean([np.mean(v) for v in per_cat.values()]) * 1e3) < 1e-5


def test_zero_epoch_train_writes_initial_checkpoint(tmp_path, dataset, tiny_cfg_file):
    run = tmp_path / "z"
    assert main(["train", "--data", str(dataset), "--out", str(run), "--config", str(tiny_cfg_file),
                 "--epochs", "0"]) == 0
    assert sorted(p.name for p in run.glob("*.ckpt")) == ["model.ckpt"]
    assert len(read_rows(run / "metrics.csv")) == 1


def test_ablate_single_value(tmp_path, dataset, tiny_cfg_file):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(dataset), "--out", str(out), "--config", str(tiny_cfg_file),
                 "--axis", "radius", "--values", "1,1,1", "--epochs", "1", "--seed", "0"]) == 0
    rows = read_rows(out / "ablation.csv")
    assert rows[0] == ["axis", "value", "cd_l1", "cd_l2"]
    assert rows[1][:2] == ["radius", "1.0,1.0,1.0"] and len(rows) == 2


def test_rerun_reproduces_metrics(tmp_path, dataset, tiny_cfg_file):
    run = tmp_path / "r"
    main(["train", "--data", str(dataset), "--out", str(run), "--config", str(tiny_cfg_file), "--seed", "2"])
    first = (run / "metrics.csv").read_bytes()
    (run / "metrics.csv").unlink()
    assert main(["rerun", str(run / "manifest.json")]) == 0
    assert (run / "metrics.csv").read_bytes() == first


def test_exit_codes(tmp_path, dataset, tiny_cfg_file, capsys):
    assert main(["ablate", "--data", str(dataset), "--out", str(tmp_path / "x"), "--axis", "colour",
                 "--values", "1"]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error\tusage\t") and "\n" not in err
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "y")]) == 1
    assert capsys.readouterr().err.startswith("error\tio\t")
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_checkpoint_architecture_mismatch(tmp_path, dataset, tiny_cfg_file, capsys):
    ckpt = tmp_path / "bad.ckpt"
    ckpt.write_bytes(b"not a checkpoint")
    src = next(dataset.rglob("*.partial.xyz"))
    assert main(["complete", "--checkpoint", str(ckpt), "--in", str(src), "--out", str(tmp_path / "o.xyz")]) == 1
    assert "ConfigError" in capsys.readouterr().err


def test_single_element_lists_in_config_file(tmp_path):
    conf = tmp_path / "one.cfg"
    conf.write_text("head_mlp = 16\nradii = 1.0\n")
    net, _ = resolve_config(conf, {})
    assert net.head_mlp == (16,) and net.radii == (1.0,) and net.steps == 1

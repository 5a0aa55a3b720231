import csv

import numpy as np
import pytest

from parsestack.cli import main
from parsestack.config import ConfigError, from_dict, load_config

SMALL = """
[data]
train_count = 8
val_count = 4
seed = 5

[model]
channels = [4, 6, 8]
downsample = [true, true, false]
taps = [1, 0]
head_channels = 4

[train]
epochs = 2
batch_size = 4
seed = 3
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def read_rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def test_bundled_config_is_valid():
    cfg = load_config(None)
    cfg.validate()
    assert cfg.train.mode == "stack_fc_skip" and cfg.train_count == 200


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="lerning_rate"):
        from_dict({"train": {"lerning_rate": 0.1}})


def test_config_validates_as_a_whole(tmp_path):
    cfg = from_dict({"model": {"taps": [1]}})
    with pytest.raises(ConfigError, match="taps"):
        cfg.validate()
    cfg = from_dict({"data": {"image_size": [60, 60]}})
    with pytest.raises(ConfigError):
        cfg.validate()


def test_resolved_config_reloads(tmp_path, cfg_path):
    cfg = load_config(cfg_path)
    p = tmp_path / "resolved.toml"
    p.write_text(cfg.to_toml())
    assert load_config(p) == cfg


def test_missing_config(tmp_path, capsys):
    assert run("gen", "-c", tmp_path / "nope.toml", "-o", tmp_path / "o") == 1
    assert "does not exist" in capsys.readouterr().err


def test_gen_train_eval_predict(tmp_path, cfg_path, capsys):
    data = tmp_path / "data"
    assert run("gen", "-c", cfg_path, "-o", data) == 0
    assert (data / "train.psds").is_file() and (data / "config.toml").is_file()
    # refuses to overwrite without --force
    assert run("gen", "-c", cfg_path, "-o", data) == 1
    assert "--force" in capsys.readouterr().err
    assert run("gen", "-c", cfg_path, "-o", data, "--force") == 0

    text = cfg_path.read_text().replace("[data]", f'[data]\ndir = "{data}"')
    cfg2 = tmp_path / "files.toml"
    cfg2.write_text(text)
    out = tmp_path / "run"
    assert run("train", "-c", cfg2, "-o", out) == 0
    for name in ("model.psck", "trainlog.csv", "validation.csv", "loss.svg", "config.toml"):
        assert (out / name).is_file(), name
    assert (out / "trainlog.csv").read_text().startswith("# trainlog v1")

    # evaluating the final model on the validation file reproduces the last validation rows
    ev = tmp_path / "eval"
    assert run("eval", out / "model.psck", data / "val.psds", "-o", ev) == 0
    metrics = read_rows(ev / "metrics.csv")
    last = [r for r in read_rows(out / "validation.csv") if r["epoch"] == "1"]
    assert len(metrics) == len(last) == 3
    for m, v in zip(metrics, last):
        for key in ("miou", "accuracy", "fg_accuracy", "avg_f1", "consistency"):
            assert m[key] == v[key], key

    from PIL import Image

    img = tmp_path / "x.png"
    Image.fromarray((np.random.default_rng(0).uniform(0, 255, (64, 64, 3))).astype(np.uint8)).save(img)
    pred = tmp_path / "pred"
    assert run("predict", out / "model.psck", img, "-o", pred) == 0
    for name in ("coarse", "medium", "fine"):
        assert np.asarray(Image.open(pred / f"{name}.png")).shape == (64, 64)


def test_eval_hierarchy_mismatch_exits_2(tmp_path, cfg_path, capsys):
    from parsestack.hierarchy import bundled_hierarchy
    from parsestack.model import read_checkpoint_header

    data = tmp_path / "data"
    assert run("gen", "-c", cfg_path, "-o", data) == 0
    out = tmp_path / "run"
    assert run("train", "-c", cfg_path, "-o", out) == 0
    # a dataset written under a different taxonomy with the same fine classes
    hier = tmp_path / "renamed.hier"
    hier.write_text(bundled_hierarchy("geoscene").to_text().replace("level coarse", "level top"))
    other_cfg = tmp_path / "other.toml"
    other_cfg.write_text(SMALL.replace("[data]", f'[data]\nhierarchy = "{hier}"'))
    other = tmp_path / "other"
    assert run("gen", "-c", other_cfg, "-o", other) == 0
    capsys.readouterr()
    assert run("eval", out / "model.psck", other / "val.psds", "-o", tmp_path / "ev") == 2
    err = capsys.readouterr().err
    want = read_checkpoint_header(out / "model.psck")["hierarchy_hash"]
    assert want in err
    from parsestack.synth import read_dataset_header

    assert read_dataset_header(other / "val.psds")["hierarchy_hash"] in err


def test_eval_missing_paths(tmp_path, capsys):
    assert run("eval", tmp_path / "m.psck", tmp_path / "d.psds", "-o", tmp_path / "e") == 1
    assert "does not exist" in capsys.readouterr().err


def test_train_is_bitwise_reproducible(tmp_path, cfg_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert run("train", "-c", cfg_path, "-o", out) == 0
        outs.append({n: (out / n).read_bytes() for n in ("model.psck", "trainlog.csv", "validation.csv", "loss.svg")})
    assert outs[0] == outs[1]


def test_seed_and_mode_overrides(tmp_path, cfg_path):
    out = tmp_path / "r"
    assert run("train", "-c", cfg_path, "-o", out, "--seed", "11", "--mode", "stack_fc") == 0
    resolved = load_config(out / "config.toml")
    assert resolved.train.seed == 11 and resolved.train.mode == "stack_fc"


def test_levels_keeps_finest(tmp_path, cfg_path):
    data = tmp_path / "data"
    assert run("gen", "-c", cfg_path, "-o", data) == 0
    out = tmp_path / "r"
    assert run("train", "-c", cfg_path, "-o", out, "--levels", "2") == 0
    rows = read_rows(out / "validation.csv")
    assert sorted({r["level"] for r in rows}) == ["0", "1"]
    assert run("eval", out / "model.psck", data / "val.psds", "-o", tmp_path / "ev") == 0
    assert [r["name"] for r in read_rows(tmp_path / "ev" / "metrics.csv")] == ["medium", "fine"]
    assert run("train", "-c", cfg_path, "-o", tmp_path / "bad", "--levels", "4") == 1


def test_ablate_outputs(tmp_path, cfg_path):
    out = tmp_path / "ab"
    assert run("ablate", "-c", cfg_path, "-o", out) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "strategy,coarse_miou,medium_miou,fine_miou"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["standalone", "stack_full", "stack_fc", "stack_fc_skip"]
    svg = (out / "ablation.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<rect") > 12
    assert (out / "consistency.csv").read_text().startswith("strategy,consistency")


def test_f64_env(tmp_path, cfg_path, monkeypatch):
    from parsestack.autodiff import default_dtype, set_precision

    monkeypatch.setenv("PSTK_F64", "1")
    try:
        assert run("gen", "-c", cfg_path, "-o", tmp_path / "d") == 0
        assert default_dtype() == np.float64
    finally:
        set_precision(32)

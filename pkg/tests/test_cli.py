import numpy as np
import pytest

from roiensemble import architectures as A
from roiensemble.cli import experiment_split, main
from roiensemble.config import ConfigError, parse_config
from roiensemble.ensemble import write_prob_csv

TINY = """\
# quick run
data.per_class = 4
data.seed = 1
train.epochs = 2
xception.downsample_modules = 1, 3
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


# ------------------------------------------------------------------ config


def test_parse_config_values():
    cfg = parse_config(TINY + "efficientnet.phi = 0.5\ntrain.learning_rate = 0.01\n")
    assert cfg.data.per_class == 4 and cfg.data.seed == 1
    assert cfg.train.epochs == 2 and cfg.train.learning_rate == 0.01
    assert cfg.specs["xception"].downsample_modules == (1, 3)
    assert cfg.specs["efficientnet"].phi == 0.5
    assert cfg.specs["densenet"] == A.preset("densenet")


def test_parse_config_errors_name_line_and_field():
    with pytest.raises(ConfigError, match=r"line 2, field 'train.epoch'"):
        parse_config("data.seed = 1\ntrain.epoch = 3\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("data.seed = one\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("just some text\n")
    with pytest.raises(ConfigError, match="densenet"):
        parse_config("densenet.growth_rate = 0\n")
    with pytest.raises(ConfigError):
        parse_config("train.epochs = 0\n")
    with pytest.raises(ConfigError):
        parse_config("data.source = directory\n")


def test_seed_override():
    cfg = parse_config(TINY).with_seed(9)
    assert cfg.data.seed == 9 and cfg.train.seed == 9


# -------------------------------------------------------------- commands


def test_train_eval_report(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
    for family in ("densenet", "efficientnet", "xception"):
        assert (out / f"{family}.ckpt").is_file()
    assert (out / "train_log.csv").read_text().splitlines()[0] == "model,epoch,loss,accuracy"

    capsys.readouterr()
    assert main(["eval", "--config", str(tiny_config), "--out", str(out)]) == 0
    table = capsys.readouterr().out
    assert [line.split()[0] for line in table.splitlines()[1:]] == [
        "DenseNet",
        "EfficientNet",
        "XceptionNet",
        "Ensembling",
    ]
    # 4 per class split in half: two test samples per class
    for name in ("densenet", "efficientnet", "xception", "ensemble"):
        counts = np.loadtxt(out / f"confusion_{name}.csv", delimiter=",", dtype=int)
        assert counts.sum(axis=1).tolist() == [2, 2, 2]
    assert main(["report", "--out", str(out)]) == 0
    assert capsys.readouterr().out == table


def test_train_is_byte_identical(tiny_config, tmp_path):
    for run in ("a", "b"):
        assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / run)]) == 0
        assert main(["eval", "--config", str(tiny_config), "--out", str(tmp_path / run)]) == 0
    for name in ("densenet.ckpt", "xception.ckpt", "efficientnet.ckpt", "metrics.csv", "confusion_ensemble.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_malformed_config_exits_2_without_output(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("data.per_class = 4\ntrain.epoch = 2\n")
    out = tmp_path / "never"
    assert main(["train", "--config", str(bad), "--out", str(out)]) == 2
    assert "line 2" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(tmp_path):
    cfg = tmp_path / "nan.cfg"
    cfg.write_text("data.per_class = 4\ntrain.epochs = 1\ntrain.learning_rate = 1e300\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_missing_checkpoint_exits_4(tiny_config, tmp_path):
    assert main(["eval", "--config", str(tiny_config), "--out", str(tmp_path / "nothing")]) == 4


def test_fuse_command(tmp_path, capsys):
    paths = []
    for i, row in enumerate(([0.4, 0.6, 0.0], [0.45, 0.55, 0.0], [0.9, 0.1, 0.0])):
        path = tmp_path / f"m{i}.csv"
        write_prob_csv(path, ["s0"], np.array([row]))
        paths.append(str(path))
    assert main(["fuse", *paths, "--out", str(tmp_path / "f")]) == 0
    assert (tmp_path / "f" / "predictions.csv").read_text() == "sample_id,prediction\ns0,0\n"
    assert main(["fuse", paths[1]]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "s0,1"


def test_fuse_id_mismatch_exits_5(tmp_path, capsys):
    write_prob_csv(tmp_path / "a.csv", ["x1", "x2"], np.full((2, 3), 1 / 3))
    write_prob_csv(tmp_path / "b.csv", ["x1", "x9"], np.full((2, 3), 1 / 3))
    assert main(["fuse", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 5
    assert "x9" in capsys.readouterr().err


def test_synth_data_round_trips_through_directory_source(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth-data", "--seed", "2", "--out", str(out)]) == 0
    assert (out / "dataset.ensd").read_bytes()[:4] == b"ENSD"
    lines = (out / "annotations.csv").read_text().splitlines()
    assert lines[0] == "image,cx,cy,radius,label" and len(lines) == 121
    cfg = parse_config(
        f"data.source = directory\ndata.directory = {out / 'images'}\ndata.annotations = {out / 'annotations.csv'}\n"
    )
    split = experiment_split(cfg)
    assert len(split.train) + len(split.test) == 120
    assert all(s.patch.shape == (1, 16, 16) for s in split.test)

import json

import numpy as np
import pytest

from equiv_assembly.cli import main, parse_overrides
from equiv_assembly.data import read_dataset, read_xyz
from equiv_assembly.errors import ConfigError

SMALL = ["--f", "4", "--k", "4", "--n", "16", "--channels", "4", "--head_width", "16", "--decoder_width", "16", "--disc_points", "32"]


def records(out):
    return [json.loads(line) for line in out.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps({"whole_points": 256, "part_points": 32, "min_part_points": 32, "batch_size": 4, "epochs": 2}))
    return root, config


def test_parse_overrides():
    assert parse_overrides(["--epochs", "3", "--use-correlation", "false", "--shapes=[\"box\"]", "--out_dir", "x"]) == {
        "epochs": 3,
        "use_correlation": False,
        "shapes": ["box"],
        "out_dir": "x",
    }
    with pytest.raises(ConfigError):
        parse_overrides(["epochs", "3"])
    with pytest.raises(ConfigError):
        parse_overrides(["--epochs"])


def test_generate_train_eval(workspace, capsys):
    root, config = workspace
    data, test = str(root / "train"), str(root / "test")
    assert main(["generate", "--config", str(config), "--dataset", data, "--num_samples", "8"]) == 0
    assert main(["generate", "--config", str(config), "--dataset", test, "--num_samples", "4", "--data_seed", "7"]) == 0
    gen = [r for r in records(capsys.readouterr().out) if r["event"] == "generate"]
    assert gen[0]["count"] == 8 and gen[0]["parts_histogram"] == {"2": 8}
    manifest, samples = read_dataset(data)
    assert manifest["count"] == 8 and all(s.num_parts == 2 for s in samples)

    out_dir = root / "run"
    argv = ["train", "--config", str(config), "--dataset", data, "--eval_dataset", test, "--out_dir", str(out_dir), *SMALL]
    assert main(argv) == 0
    out = capsys.readouterr().out
    epochs = [r for r in records(out) if r["event"] == "epoch"]
    assert [r["epoch"] for r in epochs] == [1, 2]
    assert "RMSE(R)" in out
    for name in ("last.eqas", "log.jsonl", "losses.png", "metrics.json", "config.json"):
        assert (out_dir / name).exists()

    export = root / "export"
    argv = ["eval", "--config", str(config), "--dataset", test, "--out_dir", str(out_dir), "--export_dir", str(export), *SMALL]
    assert main(argv) == 0
    out = capsys.readouterr().out
    report = [r for r in records(out) if r["event"] == "eval"][0]
    assert 0.0 <= report["gd"] <= np.pi and 0.0 <= report["pa"] <= 1.0
    assert (out_dir / "geodesic_errors.png").exists()
    files = sorted(export.glob("*.xyz"))
    assert len(files) == 4 and read_xyz(files[0]).shape == (2 * 16, 3)

    # a checkpoint from another architecture is refused with the shapes listed
    assert main(["eval", "--config", str(config), "--dataset", test, "--out_dir", str(out_dir), *SMALL, "--f", "6"]) == 2
    err = capsys.readouterr().err
    assert "expected" in err and "found" in err


def test_check_equivariance_passes_and_fails(capsys):
    small = ["--n", "32", "--k", "8", "--f", "8", "--channels", "6", "--check_rotations", "10", "--check_sets", "2"]
    assert main(["check-equivariance", *small]) == 0
    out = capsys.readouterr().out
    props = [r for r in records(out) if r["event"] == "equivariance"]
    assert len(props) == 7 and all(r["passed"] for r in props)
    assert main(["check-equivariance", *small, "--plain_linear", "true"]) == 1
    props = [r for r in records(capsys.readouterr().out) if r["event"] == "equivariance"]
    assert max(r["max_rel_error"] for r in props) >= 0.1


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["train", "--bogus", "1"]) == 2
    assert main(["train", "--epochs", "0"]) == 2
    assert main(["train", "--dataset", str(tmp_path / "nothing")]) == 2
    err = capsys.readouterr().err
    assert "does not exist" in err and "unknown config keys: bogus" in err and "epochs must be >= 1" in err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad)]) == 2

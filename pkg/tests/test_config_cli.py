import json

import numpy as np
import pytest

from conftest import CONFIGS
from refseg.cli import main
from refseg.config import ConfigError, load_config, loads_config, with_overrides
from refseg.tensor_io import read_tensor, write_tensor


def test_minimal_config_defaults():
    cfg = load_config(CONFIGS / "minimal.yaml")
    assert cfg.method.name == "rpg" and cfg.pool.p == 3
    assert cfg.pool.s == 64 and cfg.pool.k == 7000 and cfg.notes == []
    assert cfg.optimizer.lr == 5e-4


def test_small_images_clamp_s_and_k():
    cfg = loads_config("method: rpg\ndata: {image_size: 32}\n")
    assert cfg.pool.s == 32 and cfg.pool.k == 3 * 32 * 32
    assert len(cfg.notes) == 2


def test_percentage_k_resolves_to_floor():
    cfg = loads_config("method: rpg\npool: {p: 3, s: 7, k: 50%}\n")
    assert cfg.pool.k == (3 * 49) // 2
    assert with_overrides(cfg, {"pool.p": 1}).pool.k == 49 // 2


def test_unknown_key_names_path():
    with pytest.raises(ConfigError) as err:
        loads_config("method: rpg\npoool: {p: 3}\n")
    assert err.value.path == "poool"
    with pytest.raises(ConfigError) as err:
        loads_config("method: rpg\npool: {q: 3}\n")
    assert err.value.path == "pool.q"


def test_parse_error_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        loads_config("method: rpg\npool:\n\tp: 3\n")
    with pytest.raises(ConfigError, match="line 2"):
        loads_config('{"method": "rpg",\n  oops}', "json")


@pytest.mark.parametrize("text, path", [
    ("method: {name: rpg-plus}", "method.tau"),
    ("method: {name: rpg-plus, tau: 0.2}", "method.tau"),
    ("method: {name: rpg, tau: 0.9}", "method.tau"),
    ("method: {name: rpg}\noptimizer: {lr: 0}", "optimizer.lr"),
    ("method: {name: rpg}\noptimizer: {epochs: two}", "optimizer.epochs"),
    ("method: {name: teacher}", "method.name"),
    ("method: rpg\ndata: {task: multi-label, n_classes: 3}\npool: {k: 0%}", "pool"),
])
def test_invalid_values(text, path):
    with pytest.raises(ConfigError) as err:
        loads_config(text)
    assert err.value.path == path


def test_json_config_echoes_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"method": {"name": "rpg-plus", "tau": 0.95}, "pool": {"s": 16}}))
    cfg = load_config(p)
    back = json.loads(cfg.dumps())
    assert back["method"]["tau"] == 0.95 and back["pool"]["s"] == 16
    assert load_config(CONFIGS / "smoke.yaml").dumps().startswith("augmentation:")


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_usage_errors(capsys):
    code, _, err = _run(capsys)
    assert code == 2 and err.count("\n") == 1 and err.startswith("refseg: error[usage]")
    code, _, err = _run(capsys, "train", "--seed", "1")
    assert code == 2 and err.count("\n") == 1


def test_cli_config_error(capsys, tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("method: rpg\npoool: 1\n")
    code, _, err = _run(capsys, "train", "--config", str(p), "--out-dir", str(tmp_path / "o"))
    assert code == 2 and err.strip() == "refseg: error[config]: poool: unknown key 'poool'"


def test_cli_format_and_io_errors(capsys, tmp_path):
    bad = tmp_path / "bad.rgtf"
    bad.write_bytes(b"NOPE" + bytes(20))
    write_tensor(np.zeros((2, 3), np.float32), tmp_path / "r.rgtf")
    write_tensor(np.zeros(2, np.uint8), tmp_path / "l.rgtf")
    code, _, err = _run(capsys, "match", "--features", str(bad), "--refs", str(tmp_path / "r.rgtf"),
                        "--labels", str(tmp_path / "l.rgtf"), "--k", "1", "--out-dir", str(tmp_path))
    assert code == 1 and err.startswith("refseg: error[format]") and err.count("\n") == 1
    code, _, err = _run(capsys, "eval", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path))
    assert code == 1 and err.count("\n") == 1


def test_cli_match_fast_and_oracle_agree(capsys, tmp_path):
    rng = np.random.default_rng(0)
    write_tensor(rng.random((50, 4)).astype(np.float32), tmp_path / "f.rgtf")
    write_tensor(rng.random((30, 4)).astype(np.float32), tmp_path / "r.rgtf")
    write_tensor(rng.integers(3, size=30).astype(np.uint8), tmp_path / "l.rgtf")
    outs = []
    for extra in ([], ["--oracle"]):
        out_dir = tmp_path / ("o" + "".join(extra))
        code, out, _ = _run(capsys, "match", "--features", str(tmp_path / "f.rgtf"), "--refs",
                            str(tmp_path / "r.rgtf"), "--labels", str(tmp_path / "l.rgtf"), "--k", "50%",
                            "--n-classes", "3", "--out-dir", str(out_dir), *extra)
        assert code == 0 and "k=15" in out
        outs.append((read_tensor(out_dir / "labels.rgtf"), read_tensor(out_dir / "weights.rgtf")))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


def test_cli_oracle(capsys):
    code, out, _ = _run(capsys, "oracle", "--cases", "3", "--pixels", "128")
    assert code == 0 and "max_label_mismatches=0" in out


def test_cli_gen_train_eval(capsys, tmp_path):
    smoke = str(CONFIGS / "smoke.yaml")
    code, out, _ = _run(capsys, "gen-data", "--config", smoke, "--seed", "3", "--out-dir", str(tmp_path / "d"))
    assert code == 0 and out.strip().endswith("manifest.txt")
    code, out, _ = _run(capsys, "train", "--config", smoke, "--seed", "3", "--out-dir", str(tmp_path / "r"),
                        "--method", "baseline")
    assert code == 0 and out.startswith("method=baseline n_labeled=3 mean_miou=")
    code, out, _ = _run(capsys, "eval", "--checkpoint", str(tmp_path / "r" / "checkpoints" / "seed-3" / "best"),
                        "--data", str(tmp_path / "d"))
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 5 and lines[-1].startswith("miou=")
    test_row = [line for line in (tmp_path / "r" / "metrics.csv").read_text().splitlines()
                if line.startswith("3,") and ",test,all," in line][0]
    assert float(lines[-1].split("=")[1]) == pytest.approx(float(test_row.split(",")[-1]), abs=1e-6)

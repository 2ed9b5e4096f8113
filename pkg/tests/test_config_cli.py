import json
import os
import subprocess
import sys

import numpy as np
import pytest

from scalimit.cli import main
from scalimit.config import SEED_ENV, from_dict, load_config
from scalimit.errors import ConfigError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


def cfg_doc(name):
    with open(os.path.join(CONFIGS, name)) as fh:
        return json.load(fh)


def dump(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def small_moments(**kw):
    doc = cfg_doc("moments_zero.json")
    doc.update(K_list=[2, 4], n_paths=200, **kw)
    return doc


@pytest.mark.parametrize("name", sorted(os.listdir(CONFIGS)))
def test_shipped_configs_validate(name, capsys):
    assert main(["validate", os.path.join(CONFIGS, name)]) == 0
    out = capsys.readouterr().out.split()
    assert out[0] == "ok" and len(out[2]) == 64


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d.pop("n_paths"), "n_paths"),
    (lambda d: d.update(n_paths=0), "n_paths"),
    (lambda d: d["model"].update(nu=-1), "model/nu"),
    (lambda d: d.update(bogus=1), "bogus"),
    (lambda d: d.update(K_list=[4, 2]), "K_list/1"),
    (lambda d: d.update(seed=-3), "seed"),
    (lambda d: d.update(experiment="nope"), "experiment"),
])
def test_config_error_paths(tmp_path, capsys, mutate, path):
    doc = small_moments()
    mutate(doc)
    assert main(["validate", dump(tmp_path, doc)]) == 2
    assert f"config error: {path}:" in capsys.readouterr().err
    with pytest.raises(ConfigError) as info:
        from_dict(doc)
    assert info.value.path == path


def test_unreadable_and_malformed(tmp_path):
    assert main(["validate", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 2


def test_numeric_failure_exit_3(tmp_path, capsys):
    doc = small_moments(beta=[0.5, 0.0])
    assert main(["run", dump(tmp_path, doc), "--out", str(tmp_path / "o")]) == 3
    assert "numeric error" in capsys.readouterr().err


def test_list_experiments(capsys):
    assert main(["list-experiments"]) == 0
    names = [ln.split("\t")[0] for ln in capsys.readouterr().out.splitlines()]
    assert names == ["figure1", "figure2", "bsde_convergence", "control_convergence", "moments", "verify"]


def test_seed_precedence(tmp_path, monkeypatch):
    path = dump(tmp_path, small_moments(seed=7))
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert load_config(path).seed == 7
    monkeypatch.setenv(SEED_ENV, "11")
    assert load_config(path).seed == 11
    assert load_config(path, seed=13).seed == 13
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.path == SEED_ENV


def test_digest_ignores_workers_and_output(tmp_path):
    a = from_dict(small_moments())
    b = from_dict(small_moments(workers=3, output_dir="elsewhere"))
    c = from_dict(small_moments(), seed=99)
    assert a.digest == b.digest != c.digest


def test_manifest_and_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    path = dump(tmp_path, small_moments(seed=5))
    for run in ("a", "b"):
        assert main(["run", path, "--out", str(tmp_path / run)]) == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == ["manifest.json", "moments.csv", "moments.json", "timing.json"]
    for f in files:
        if f != "timing.json":
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 5 and man["experiment"] == "moments"
    assert set(man["versions"]) == {"scalimit", "numpy", "scipy", "python"}
    assert [a["file"] for a in man["artifacts"]] == ["moments.csv", "moments.json"]
    assert all(a["config_digest"] == man["config_digest"] for a in man["artifacts"])
    table = json.loads((tmp_path / "a" / "moments.json").read_text())
    assert table["config_digest"] == man["config_digest"]
    assert table["columns"]["estimate"] == [1.0, 1.0]
    assert table["columns"]["closed_form"] == [1.0, 1.0]


def test_seed_flag_changes_result(tmp_path):
    doc = small_moments(beta=[0.01, 0.3])
    path = dump(tmp_path, doc)
    main(["run", path, "--out", str(tmp_path / "a")])
    main(["run", path, "--out", str(tmp_path / "b"), "--seed", "123"])
    a = json.loads((tmp_path / "a" / "moments.json").read_text())["columns"]["estimate"]
    b = json.loads((tmp_path / "b" / "moments.json").read_text())["columns"]["estimate"]
    assert a != b


def test_figure1_fast_cli(tmp_path):
    out = tmp_path / "f1"
    assert main(["run", os.path.join(CONFIGS, "figure1_fast.json"), "--out", str(out)]) == 0
    cols = json.loads((out / "figure1.json").read_text())["columns"]
    err = np.array(cols["abs_err"], float)
    assert np.all(np.diff(err) < 0)
    assert cols["K"] == [4, 8, 16, 32, 64, 128, 256]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "scalimit.cli", "validate", os.path.join(CONFIGS, "verify.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("ok verify ")

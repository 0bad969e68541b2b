import csv
import json

import pytest

from cepguide import cli
from cepguide.cli import ConfigError, main, parse_config, parse_config_text
from cepguide.netcore import DivergenceError

TINY_2D = """
kind = "compare2d"
[data]
n = 400
[prior]
steps = 20
batch_size = 64
hidden = [16, 16]
[guidance]
steps = 10
batch_size = 64
group_size = 8
hidden = [16]
[sampler]
steps = 4
n = 64
[compare]
betas = [1.0]
methods = ["NONE", "CEP", "DPS"]
"""


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_gets_defaults():
    cfg = parse_config_text('kind = "sample"')
    assert cfg.kind == "sample"
    assert cfg["sampler"]["steps"] == 25 and cfg["sampler"]["method"] == "solver2"
    assert cfg["guidance"]["group_size"] == 64
    assert cfg["energy"]["beta"] == 1.0
    assert cfg.config_hash() == parse_config_text('kind = "sample"').config_hash()
    assert cfg.config_hash() != parse_config_text('kind = "sample"\nseed = 3').config_hash()


def test_integer_promoted_where_float_expected():
    assert parse_config_text("[energy]\nbeta = 10")["energy"]["beta"] == 10.0


@pytest.mark.parametrize("text, fragment", [
    ("[energy]\nbetaa = 1.0", "energy.betaa"),
    ("[energy]\nbeta = -1.0", "beta"),
    ("kind = \"train\"", "kind"),
    ("[data]\nname = \"spirals\"", "spirals"),
    ("[guidance]\nmethod = \"CFG\"", "CFG"),
    ("[sampler]\nsteps = \"ten\"", "sampler.steps"),
    ("[qgpo]\nmix = 1.5", "mix"),
    ("[energy]\nparams = { slope = 2 }", "energy.params"),
    ("kind = ", "TOML"),
])
def test_bad_configs_name_the_problem(text, fragment):
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
        parse_config_text(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.toml")


def test_exit_codes(tmp_path, monkeypatch, capsys):
    bad = write(tmp_path, "[energy]\nbetaa = 1.0")
    assert main(["compare2d", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "energy.betaa" in capsys.readouterr().err
    assert main(["sample", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "o")]) == 2

    ok = write(tmp_path, TINY_2D, "ok.toml")

    def boom(cfg, out):
        raise DivergenceError("non-finite sample at step 3")

    monkeypatch.setitem(cli.RUNNERS, "compare2d", boom)
    assert main(["compare2d", "--config", str(ok), "--out", str(tmp_path / "o")]) == 3

    def io(cfg, out):
        raise PermissionError("read-only")

    monkeypatch.setitem(cli.RUNNERS, "compare2d", io)
    assert main(["compare2d", "--config", str(ok), "--out", str(tmp_path / "o")]) == 4


def test_sample_without_prior_checkpoint_is_config_error(tmp_path):
    cfg = write(tmp_path, 'kind = "sample"')
    assert main(["sample", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_compare2d_rerun_is_byte_identical(tmp_path):
    cfg = write(tmp_path, TINY_2D)
    for out in ("a", "b"):
        assert main(["compare2d", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
    a = (tmp_path / "a" / "compare2d.csv").read_bytes()
    assert a == (tmp_path / "b" / "compare2d.csv").read_bytes()
    rows = list(csv.DictReader((tmp_path / "a" / "compare2d.csv").open()))
    assert [r["method"] for r in rows] == ["NONE", "CEP", "DPS"]
    assert list(rows[0]) == cli.TABLE_COLUMNS
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config_hash"] == rows[0]["config_hash"]
    assert "compare2d.csv" in manifest["artifacts"]
    ma = {k: v for k, v in manifest.items() if k != "created"}
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma == {k: v for k, v in mb.items() if k != "created"}


def test_seed_override_changes_hash(tmp_path):
    cfg = parse_config_text(TINY_2D)
    seeded = cfg.with_seed(5)
    assert seeded.config_hash() != cfg.config_hash()
    assert seeded["sampler"]["seed"] == 6 and seeded["prior"]["seed"] == 5


def test_train_then_sample_pipeline(tmp_path):
    base = TINY_2D.replace('kind = "compare2d"', "")
    assert main(["train-prior", "--config", str(write(tmp_path, base)), "--out", str(tmp_path / "p")]) == 0
    g_text = base.replace("[guidance]", '[guidance]\nmethod = "CEP_COND"')
    assert main(["train-guidance", "--config", str(write(tmp_path, g_text, "g.toml")),
                 "--out", str(tmp_path / "g")]) == 0
    s_text = (base.replace("[prior]", f'[prior]\ncheckpoint = "{tmp_path / "p" / "prior"}"')
              .replace("[guidance]", f'[guidance]\ncheckpoint = "{tmp_path / "g" / "guidance"}"')
              .replace("[sampler]", "[sampler]\nclass_id = 2"))
    assert main(["sample", "--config", str(write(tmp_path, s_text, "s.toml")), "--out", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "samples.csv").read_text().splitlines()
    assert len(lines) == 65


def test_oracle_grid_columns(tmp_path):
    empty = write(tmp_path, '[data]\nn = 50\n[grid]\nn = 0', "e.toml")
    assert main(["oracle-grid", "--config", str(empty), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "oracle_grid.csv").read_text().splitlines() == ["x1,x2,t,energy,grad1,grad2"]

    small = write(tmp_path, '[data]\nn = 50\n[grid]\nn = 3\ntimes = [0.5]', "s.toml")
    assert main(["oracle-grid", "--config", str(small), "--out", str(tmp_path / "s")]) == 0
    rows = list(csv.DictReader((tmp_path / "s" / "oracle_grid.csv").open()))
    assert len(rows) == 9 and "f_phi" not in rows[0]

    g_text = TINY_2D.replace('kind = "compare2d"', "")
    assert main(["train-guidance", "--config", str(write(tmp_path, g_text, "g.toml")),
                 "--out", str(tmp_path / "g")]) == 0
    with_f = write(tmp_path, f'[data]\nn = 50\n[grid]\nn = 3\ntimes = [0.5]\n'
                             f'[guidance]\ncheckpoint = "{tmp_path / "g" / "guidance"}"', "f.toml")
    assert main(["oracle-grid", "--config", str(with_f), "--out", str(tmp_path / "f")]) == 0
    rows = list(csv.DictReader((tmp_path / "f" / "oracle_grid.csv").open()))
    assert "f_phi" in rows[0]


def test_tiny_qgpo_report(tmp_path):
    text = """
[qgpo]
episodes = 6
K = 4
scales = [2.0]
eval_episodes = 3
eval_steps = 3
[qgpo.behavior]
steps = 10
batch_size = 32
hidden = [8]
[qgpo.q]
steps = 10
batch_size = 32
hidden = [8]
[qgpo.guidance]
steps = 10
batch_size = 8
hidden = [8]
"""
    assert main(["qgpo", "--config", str(write(tmp_path, text)), "--out", str(tmp_path / "q")]) == 0
    rep = json.loads((tmp_path / "q" / "qgpo_report.json").read_text())
    assert rep["phases"] == ["dataset", "behavior", "support", "q", "guidance", "evaluate"]
    assert [r["s"] for r in rep["returns"]] == [0.0, 2.0]
    assert set(rep["seeds"]) >= {"dataset", "behavior", "q", "guidance", "eval"}
    manifest = json.loads((tmp_path / "q" / "manifest.json").read_text())
    assert rep["config_hash"] == manifest["config_hash"]
    assert manifest["kind"] == "qgpo"

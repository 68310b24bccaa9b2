import json

import pytest

from shadowfl import cli
from shadowfl.simulator import ExperimentConfig

TINY = """\
# tiny world for fast CLI tests
n_clients = 40
shard_size = 50
clients_per_round = 10
n_test = 200
hidden = 16
rounds = 2
"""


def write(tmp_path, text, name="cfg.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_takes_defaults(tmp_path):
    assert cli.parse_config(write(tmp_path, "")) == ExperimentConfig()
    cfg = cli.parse_config(write(tmp_path, "alpha = 0.25  # comment\nrelearn_filter = yes\nphase_keep = 0.5, 0.25\n"
                                           "phase_starts = 10, 20\n"))
    assert cfg.alpha == 0.25 and cfg.relearn_filter is True
    assert cfg.phase_keep == (0.5, 0.25) and cfg.phase_starts == (10, 20)


def test_out_of_range_alpha_is_a_validation_error(tmp_path):
    with pytest.raises(cli.ValidationError) as exc:
        cli.parse_config(write(tmp_path, "alpha = 0.6\nrounds = 0\n"))
    assert any("0 <= alpha < 0.5" in p for p in exc.value.problems)
    assert len(exc.value.problems) == 2


def test_unknown_key_gets_a_suggestion(tmp_path):
    with pytest.raises(cli.ParseError) as exc:
        cli.parse_config(write(tmp_path, "seed = 1\nalpha_maxx = 0.3\n"))
    assert exc.value.line == 2 and exc.value.field == "alpha_maxx"
    assert "did you mean 'alpha_max'" in str(exc.value)


@pytest.mark.parametrize("text,fragment", [
    ("alpha 0.2", "key = value"),
    ("seed = 1\nseed = 2", "duplicate"),
    ("alpha = 0.1, 0.2", "only allowed in sweep"),
    ("rounds = many", "invalid literal"),
    ("relearn_filter = maybe", "boolean"),
    ("phase_starts = 1, x", "bad list entry"),
])
def test_parse_errors(tmp_path, text, fragment):
    with pytest.raises(cli.ParseError, match=fragment):
        cli.parse_config(write(tmp_path, text))


def test_sweep_grid_names_and_seeds():
    values = cli.parse_lines("alpha = 0.15, 0.25\ndefense = none, shadow\nseed = 3\n", allow_grid=True)
    grid = cli.sweep_grid(values)
    assert [n for n, _ in grid] == ["alpha-0.15_defense-none", "alpha-0.15_defense-shadow",
                                    "alpha-0.25_defense-none", "alpha-0.25_defense-shadow"]
    assert grid[1][1]["seed"] == 3 and grid[1][1]["defense"] == "shadow"
    a = cli.derived_seed(3, {"alpha": 0.15})
    assert a == cli.derived_seed(3, {"alpha": 0.15}) != cli.derived_seed(3, {"alpha": 0.25})
    assert a != cli.derived_seed(4, {"alpha": 0.15})


def test_worker_count(monkeypatch):
    monkeypatch.delenv("SHADOWFL_THREADS", raising=False)
    assert cli.worker_count(4) == 1
    monkeypatch.setenv("SHADOWFL_THREADS", "3")
    assert cli.worker_count(4) == 3 and cli.worker_count(2) == 2
    monkeypatch.setenv("SHADOWFL_THREADS", "lots")
    assert cli.worker_count(4) == 1


def test_run_and_inspect(tmp_path, capsys):
    cfg = write(tmp_path, TINY)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--rounds", "1", "--quiet"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["rounds"] == 1
    assert (tmp_path / "o" / "rounds.csv").read_text().count("\n") == 2
    assert cli.main(["inspect", "--checkpoint", str(tmp_path / "o" / "backbone.ckpt")]) == 0
    meta = json.loads(capsys.readouterr().out)
    assert meta["header"]["kind"] == "model" and meta["payload_values"] > 0


def test_sweep_over_four_alphas(tmp_path, capsys):
    cfg = write(tmp_path, TINY + "alpha = 0.15, 0.25, 0.35, 0.45\n")
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    names = sorted(p.name for p in out.glob("*.csv"))
    assert names == ["alpha-0.15.csv", "alpha-0.25.csv", "alpha-0.35.csv", "alpha-0.45.csv"]
    index = json.loads((out / "sweep.json").read_text())
    assert sorted(index) == [n[:-4] for n in names]
    assert len({index[k]["seed"] for k in index}) == 4
    first = {n: (out / n).read_bytes() for n in names}
    out2 = tmp_path / "sweep2"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out2)]) == 0
    assert first == {n: (out2 / n).read_bytes() for n in names}
    assert (out / "alpha-0.45" / "backbone.ckpt").read_bytes() == (out2 / "alpha-0.45" / "backbone.ckpt").read_bytes()


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "missing"), "--out", str(tmp_path)]) == cli.EXIT_USAGE
    bad = write(tmp_path, "alpha = 0.6\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert "alpha" in capsys.readouterr().err
    junk = write(tmp_path, "garbage", "junk.ckpt")
    assert cli.main(["inspect", "--checkpoint", str(junk)]) == cli.EXIT_FAILED
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_verify_exit_status_follows_results(tmp_path, monkeypatch, capsys):
    from shadowfl import verification as V

    monkeypatch.setattr(V, "suite", lambda quick=False: [("ok", lambda: V.CheckResult("ok", True)),
                                                         ("logged", lambda: V.CheckResult("logged", None))])
    assert cli.main(["verify", "--out", str(tmp_path), "--quick"]) == 0
    monkeypatch.setattr(V, "suite", lambda quick=False: [("bad", lambda: V.CheckResult("bad", False))])
    assert cli.main(["verify", "--out", str(tmp_path)]) == 1
    assert "FAIL" in capsys.readouterr().out

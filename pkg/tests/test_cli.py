import csv
import json
import math
import subprocess
import sys

import pytest

from sbsrl.cli import CSV_COLUMNS, main, parse_seeds, read_csv
from sbsrl.config import default_config_dir
from sbsrl.loop import ConfigError

SMOKE = str(default_config_dir() / "smoke.toml")
GOLDEN_HEADER = ("seed,episode,j_r_true,j_c_true,max_inst_cost,j_s_planned,beta_n,d_sigma_n,delta_zeta,"
                 "feasible_safe,feasible_explore,terminated,wall_time_s")
BUDGET_HAND = ["budget", "--delta", "0.5", "--zeta", "0.1", "--B", "1", "--d-x", "1",
               "--phi", repr(math.log(2) - 0.5)]


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    code = main(["run", "--config", SMOKE, "--out", str(out)])
    return code, out


def test_golden_header():
    assert ",".join(CSV_COLUMNS) == GOLDEN_HEADER


def test_smoke_row_count_and_header(smoke_run):
    code, out = smoke_run
    assert code == 0
    lines = (out / "episodes.csv").read_bytes().split(b"\n")
    assert lines[0].decode() == GOLDEN_HEADER
    assert lines[-1] == b""
    assert len(lines) - 2 == 2 * 1


def test_csv_fields_finite_and_boolean(smoke_run):
    _, out = smoke_run
    _, rows = read_csv(out / "episodes.csv")
    for r in rows:
        for c in ("feasible_safe", "feasible_explore", "terminated"):
            assert r[c] in ("0", "1")
        for c in CSV_COLUMNS:
            assert math.isfinite(float(r[c]))


def test_summary_matches_csv(smoke_run):
    _, out = smoke_run
    summary = json.loads((out / "summary.json").read_text())
    _, rows = read_csv(out / "episodes.csv")
    d = summary["budget"]
    assert summary["totals"]["rows"] == len(rows)
    assert summary["totals"]["violations"] == sum(float(r["j_c_true"]) > d for r in rows)
    for seed, s in summary["seeds"].items():
        mine = [r for r in rows if r["seed"] == seed]
        assert s["episodes"] == len(mine)
        assert s["max_j_c_true"] == max(float(r["j_c_true"]) for r in mine)
        term = [int(r["episode"]) for r in mine if r["terminated"] == "1"]
        assert s["termination_episode"] == (term[0] if term else None)


def test_rerun_is_byte_identical(smoke_run, tmp_path):
    _, out = smoke_run
    assert main(["run", "--config", SMOKE, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "episodes.csv").read_bytes() == (out / "episodes.csv").read_bytes()
    assert (tmp_path / "summary.json").read_bytes() == (out / "summary.json").read_bytes()


def test_parallel_matches_serial(smoke_run, tmp_path):
    _, out = smoke_run
    assert main(["run", "--config", SMOKE, "--out", str(tmp_path), "--parallelism", "2"]) == 0
    assert (tmp_path / "episodes.csv").read_bytes() == (out / "episodes.csv").read_bytes()


def test_master_seed_changes_results(smoke_run, tmp_path, monkeypatch):
    _, out = smoke_run
    monkeypatch.setenv("SBSRL_SEED", "17")
    assert main(["run", "--config", SMOKE, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "episodes.csv").read_bytes() != (out / "episodes.csv").read_bytes()


def test_bad_master_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("SBSRL_SEED", "abc")
    assert main(["run", "--config", SMOKE, "--out", str(tmp_path)]) == 2


def test_invalid_delta_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(open(SMOKE).read().replace("[algo]", "[algo]\ndelta = 0.9"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "delta" in capsys.readouterr().err


def test_seed_override(tmp_path):
    assert main(["run", "--config", SMOKE, "--out", str(tmp_path), "--seeds", "3"]) == 0
    _, rows = read_csv(tmp_path / "episodes.csv")
    assert {r["seed"] for r in rows} == {"3"}


def test_json_summary(tmp_path, capsys):
    assert main(["run", "--config", SMOKE, "--out", str(tmp_path), "--seeds", "0", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["totals"]["rows"] == 1


def test_budget_exceeded_exits_4_with_partial_output(tmp_path):
    assert main(["run", "--config", SMOKE, "--out", str(tmp_path), "--budget-s", "1e-9"]) == 4
    _, rows = read_csv(tmp_path / "episodes.csv")
    assert len(rows) == 1
    assert (tmp_path / "summary.json").exists()


@pytest.mark.parametrize("text,expected", [("0,1,2", [0, 1, 2]), ("0-3", [0, 1, 2, 3]), ("0-1,7", [0, 1, 7])])
def test_parse_seeds(text, expected):
    assert parse_seeds(text) == expected


@pytest.mark.parametrize("text", ["", "1,1", "a-b"])
def test_parse_seeds_rejects(text):
    with pytest.raises(ConfigError):
        parse_seeds(text)


class TestBudget:
    def test_hand_value(self, capsys):
        assert main(BUDGET_HAND) == 0
        assert capsys.readouterr().out.splitlines()[0] == "M = 1"

    def test_delta_one_floor(self, capsys):
        assert main(["budget", "--delta", "1", "--zeta", "0.1", "--B", "3", "--d-x", "2", "--phi", "2", "--json"]) == 0
        assert json.loads(capsys.readouterr().out)["M"] == 1

    def test_json_keys(self, capsys):
        assert main(BUDGET_HAND + ["--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert {"M", "phi_hat", "zeta", "delta"} <= set(payload)
        assert payload["M"] == 1 and not payload["capped"]

    def test_estimated_exponent(self, capsys):
        args = ["budget", "--delta", "0.1", "--zeta", "0.5", "--B", "1", "--n-draws", "500", "--json"]
        assert main(args) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["phi_hat"] >= 0 and payload["M"] >= 1

    def test_capped(self, capsys):
        assert main(["budget", "--delta", "0.1", "--zeta", "0.1", "--B", "5", "--d-x", "3", "--phi", "1",
                     "--json"]) == 0
        assert json.loads(capsys.readouterr().out)["capped"]

    @pytest.mark.parametrize("bad", [["--delta", "0"], ["--delta", "1.5"], ["--zeta", "-1"]])
    def test_invalid_inputs(self, bad):
        args = dict(zip(BUDGET_HAND[1::2], BUDGET_HAND[2::2]))
        args.update(dict(zip(bad[::2], bad[1::2])))
        assert main(["budget"] + [x for kv in args.items() for x in kv]) == 2


class TestPlot:
    def test_curves(self, smoke_run, tmp_path):
        _, out = smoke_run
        assert main(["plot", "--csv", str(out / "episodes.csv"), "--out", str(tmp_path)]) == 0
        svg = (tmp_path / "curves.svg").read_text()
        assert 'class="budget" data-value="6.0"' in svg

    def test_missing_column(self, tmp_path, capsys):
        p = tmp_path / "x.csv"
        p.write_text("seed,episode,j_r_true\n0,0,1.0\n")
        assert main(["plot", "--csv", str(p), "--out", str(tmp_path)]) == 2
        assert "j_c_true" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["plot", "--csv", str(tmp_path / "none.csv")]) == 2


class TestCompare:
    def test_identical_configs_give_identical_metrics(self, tmp_path):
        assert main(["compare", "--config", SMOKE, SMOKE, "--out", str(tmp_path), "--seeds", "0",
                     "--dsigma"]) == 0
        _, rows = read_csv(tmp_path / "compare.csv")
        groups = {}
        for r in rows:
            groups.setdefault(r["config"], []).append({c: r[c] for c in CSV_COLUMNS})
        assert set(groups) == {"smoke", "smoke:mean-only", "smoke#2", "smoke#2:mean-only"}
        assert groups["smoke"] == groups["smoke#2"]
        assert groups["smoke:mean-only"] == groups["smoke#2:mean-only"]

    def test_ablation_groups(self, tmp_path):
        assert main(["compare", "--config", SMOKE, "--out", str(tmp_path), "--seeds", "0",
                     "--dsigma", "0", "0.4", "0.8"]) == 0
        _, rows = read_csv(tmp_path / "compare.csv")
        names = {r["config"] for r in rows}
        assert {"smoke:dsigma=0", "smoke:dsigma=0.4", "smoke:dsigma=0.8"} <= names
        svg = (tmp_path / "bars.svg").read_text()
        assert svg.count('class="bar reward"') == 5

    def test_budget_exit(self, tmp_path):
        assert main(["compare", "--config", SMOKE, "--out", str(tmp_path), "--budget-s", "1e-9"]) == 4
        assert (tmp_path / "compare.csv").exists()


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "sbsrl.cli", "budget"] + BUDGET_HAND[1:],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.startswith("M = 1")

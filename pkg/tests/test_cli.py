import json

import pytest

from mechmpc.cli import main, read_jsonl


def _strip_stamp(path):
    return [ln for ln in path.read_text().splitlines()
            if not ln.startswith("# timestamp:") and not ln.startswith('{"timestamp":')]


@pytest.fixture(scope="module")
def learned(tmp_path_factory):
    out = tmp_path_factory.mktemp("learn")
    code = main(["learn", "--out", str(out)])
    return code, out


def test_learn_converges(learned, capsys):
    code, out = learned
    assert code == 0
    summary = read_jsonl(out / "summary.jsonl")[0]
    assert summary["converged"] and summary["final_change"] < 1e-6
    assert summary["rounds"] <= 50
    assert len(read_jsonl(out / "rounds.jsonl")) == summary["rounds"]
    assert len(read_jsonl(out / "profile.jsonl")) == 4


def test_every_output_has_provenance_header(learned):
    _, out = learned
    lines = (out / "learning.csv").read_text().splitlines()
    keys = [ln.split(":")[0] for ln in lines[:5]]
    assert keys == ["# tool", "# scenario_sha256", "# seed", "# command", "# timestamp"]
    assert lines[5].startswith("round,status,change,true_cost_1")
    head = json.loads((out / "rounds.jsonl").read_text().splitlines()[0])["header"]
    assert set(head) == {"tool", "scenario_sha256", "seed", "command"}
    assert head["seed"] == 42


def test_csv_uses_17_significant_digits(learned):
    _, out = learned
    row = (out / "learning.csv").read_text().splitlines()[6].split(",")
    assert len(row[2].replace("-", "").replace(".", "").split("e")[0].lstrip("0")) >= 15


def test_learn_decoupled_override(tmp_path):
    code = main(["learn", "--out", str(tmp_path), "--set", "hvac.beta=0", "--set", "hvac.gamma=0",
                 "--set", "hvac.eta=0", "--set", "hvac.nu_heat=0"])
    assert code == 0
    assert read_jsonl(tmp_path / "summary.jsonl")[0]["rounds"] <= 2


def test_learn_is_reproducible(learned, tmp_path):
    _, first = learned
    assert main(["learn", "--out", str(tmp_path), "--jobs", "2"]) == 0
    for name in ("rounds.jsonl", "learning.csv", "profile.jsonl", "summary.jsonl"):
        assert _strip_stamp(first / name) == _strip_stamp(tmp_path / name)


@pytest.mark.parametrize("argv", [
    ["learn", "--set", "learning.rounds=0"],
    ["learn", "--rounds", "0"],
    ["verify", "--seed-truthful", "--samples", "0"],
    ["verify", "--seed-truthful", "--set", "verify.samples=0"],
    ["learn", "--jobs", "0"],
    ["verify"],
    ["learn", "--set", "hvac.alpha=-1"],
])
def test_config_errors_exit_2(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == 2


def test_missing_scenario_names_the_path(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert main(["compare", "--scenario", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_verify_truthful_passes(tmp_path):
    assert main(["verify", "--seed-truthful", "--samples", "8", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "nash.csv").read_text().splitlines()
    assert lines[5] == "agent,base_cost,max_decrease,best_kind,samples,incomparable"
    assert len(lines) == 10


def test_verify_cold_start_round_one_fails(learned, tmp_path):
    _, out = learned
    code = main(["verify", "--profile", str(out / "rounds.jsonl"), "--round", "1",
                 "--samples", "8", "--out", str(tmp_path)])
    assert code == 1
    assert (tmp_path / "nash.csv").exists()


def test_verify_learned_profile_passes(learned, tmp_path):
    _, out = learned
    code = main(["verify", "--profile", str(out / "profile.jsonl"), "--samples", "8",
                 "--out", str(tmp_path)])
    assert code == 0


def test_verify_bad_round_is_config_error(learned, tmp_path):
    _, out = learned
    assert main(["verify", "--profile", str(out / "rounds.jsonl"), "--round", "999",
                 "--out", str(tmp_path)]) == 2


def test_simulate_jsonl(tmp_path):
    code = main(["simulate", "--controller", "P", "--set", "sim_length=5", "--format", "jsonl",
                 "--out", str(tmp_path)])
    assert code == 0
    recs = read_jsonl(tmp_path / "mpc_P.jsonl")
    assert len(recs) == 5 and recs[0]["controller"] == "P"
    assert not (tmp_path / "mpc_P.csv").exists()


def test_simulate_csv_columns(tmp_path):
    assert main(["simulate", "--controller", "A", "--set", "sim_length=3",
                 "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "mpc_A.csv").read_text().splitlines()
    assert lines[5].split(",")[:6] == ["stage", "x1", "x2", "x3", "x4", "u1"]
    assert len(lines) == 6 + 3

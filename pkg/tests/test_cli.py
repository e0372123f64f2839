import json
import re

import pytest

from tscopf.cli import main
from tscopf.network import bundled_case_path


def case_text(name="two_bus", **subs):
    text = open(bundled_case_path(name)).read()
    for old, new in subs.items():
        text = text.replace(old, new)
    return text


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "w.json"
    assert main(["train", "toy9", "--iters", "2", "--per-iter", "20", "--seed", "5", "--out", str(out),
                 "--workers", "1"]) == 0
    return out


def manifest(path):
    return json.loads(path.read_text())


def test_case_validate_bundled(capsys):
    assert main(["case", "validate", "toy9"]) == 0
    assert "ok" in capsys.readouterr().out


def test_case_show_round_trips(tmp_path, capsys):
    assert main(["case", "show", "two_bus"]) == 0
    body = "".join(l + "\n" for l in capsys.readouterr().out.splitlines() if not l.startswith("#"))
    path = tmp_path / "copy.case"
    path.write_text(body)
    assert main(["case", "validate", str(path)]) == 0


def test_parse_error_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.case"
    path.write_text("base_mva 100\nwidget id=1\n")
    assert main(["case", "validate", str(path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_case_is_parse_error():
    assert main(["case", "show", "/nonexistent/nowhere.case"]) == 2


def test_validation_error_exit_code(tmp_path, capsys):
    path = tmp_path / "inverted.case"
    path.write_text(case_text(**{"gmin=0": "gmin=300"}))
    assert main(["case", "validate", str(path)]) == 3
    assert "gmin" in capsys.readouterr().err


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["solve", "toy9", "--mode", "nonsense", "--out", "x"])
    assert exc.value.code == 2


def test_solve_acopf_writes_dispatch_and_manifest(tmp_path, capsys):
    out = tmp_path / "d.txt"
    assert main(["solve", "two_bus", "--out", str(out)]) == 0
    assert "objective=500" in capsys.readouterr().out
    m = manifest(tmp_path / "d.txt.manifest.json")
    assert m["command"] == "solve" and m["case_path"].endswith("two_bus.case")
    assert str(out) in m["outputs"]
    assert set(m) == {"command", "case_path", "seed", "config_digest", "version", "outputs", "wall_time_s"}


def test_infeasible_exit_code(tmp_path):
    path = tmp_path / "tight.case"
    path.write_text(case_text(**{"smax=500": "smax=20"}))
    assert main(["solve", str(path), "--out", str(tmp_path / "d.txt")]) == 5


def test_tscopf_needs_weights(tmp_path):
    assert main(["solve", "toy9", "--mode", "tscopf", "--out", str(tmp_path / "d.txt")]) == 2


def test_bad_threshold_is_rejected(tmp_path, weights):
    assert main(["solve", "toy9", "--mode", "tscopf", "--weights", str(weights), "--c", "1.5",
                 "--out", str(tmp_path / "d.txt")]) == 2


def test_tscopf_writes_prices(tmp_path, weights):
    out = tmp_path / "d.txt"
    assert main(["solve", "toy9", "--mode", "tscopf", "--weights", str(weights), "--c", "0.5", "--load-seed", "3",
                 "--out", str(out)]) == 0
    rows = (tmp_path / "d.txt.prices.csv").read_text().splitlines()
    assert rows[0].startswith("gen_id,bus_id,energy_usd_mwh")
    assert len(rows) == 5
    assert manifest(tmp_path / "d.txt.manifest.json")["seed"] == 3


def test_asopf_mode_solves(tmp_path, weights):
    assert main(["solve", "toy9", "--mode", "asopf", "--weights", str(weights), "--load-seed", "2",
                 "--out", str(tmp_path / "d.txt")]) == 0


def test_simulate_round_trip(tmp_path, capsys):
    disp = tmp_path / "d.txt"
    assert main(["solve", "toy9", "--out", str(disp)]) == 0
    traj = tmp_path / "traj.csv"
    assert main(["simulate", "toy9", "--dispatch", str(disp), "--out", str(traj)]) == 0
    out = capsys.readouterr().out
    assert re.search(r"nadir_hz=\d+\.\d+ label=[01]", out)
    assert traj.read_text().startswith("time_s,bus_id,freq_hz")


def test_dynamics_init_exit_code(tmp_path):
    disp = tmp_path / "d.txt"
    assert main(["solve", "two_bus", "--out", str(disp)]) == 0
    # flatten the angles so the dispatch no longer satisfies the power flow
    disp.write_text(re.sub(r"theta=\S+", "theta=0", disp.read_text()))
    assert main(["simulate", "two_bus", "--dispatch", str(disp), "--out", str(tmp_path / "t.csv")]) == 7


def test_sampling_failure_exit_code(tmp_path):
    path = tmp_path / "tight.case"
    path.write_text(case_text(**{"smax=500": "smax=20"}))
    assert main(["train", str(path), "--iters", "1", "--per-iter", "4", "--out", str(tmp_path / "w.json"),
                 "--workers", "1"]) == 4


def test_train_outputs(weights):
    store = weights.with_name("w.json.store.csv")
    assert store.read_text().startswith("# variant=B")
    m = manifest(weights.with_name("w.json.manifest.json"))
    assert m["seed"] == 5 and len(m["outputs"]) == 3


def test_campaign_outputs_and_digest(tmp_path, weights):
    args = ["campaign", "toy9", "--weights", str(weights), "--c-grid", "0,0.5", "--n", "3", "--seed", "2",
            "--workers", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("campaign.csv", "summary.csv", "price_trend.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ma, mb = manifest(tmp_path / "a" / "manifest.json"), manifest(tmp_path / "b" / "manifest.json")
    assert ma["config_digest"] == mb["config_digest"]
    assert main(args[:-4] + ["--seed", "3", "--workers", "1", "--out", str(tmp_path / "c")]) == 0
    assert manifest(tmp_path / "c" / "manifest.json")["config_digest"] != ma["config_digest"]


def test_bad_grid(tmp_path, weights):
    assert main(["campaign", "toy9", "--weights", str(weights), "--c-grid", "0,x", "--out", str(tmp_path)]) == 2

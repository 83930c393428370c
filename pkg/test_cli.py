# test_cli.py
"""
End-to-end tests of the servekit command line
"""

import io

import pytest

from cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from config import Config


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def keyvalues(text):
    return dict(line.split("=", 1) for line in text.splitlines() if line and not line.startswith("#") and "=" in line)


@pytest.fixture
def table_csv(tmp_path):
    path = tmp_path / "table.csv"
    rows = [f"{s},{b},{0.001 * s + 0.0005 * b!r}" for s in (10, 20, 40) for b in (1, 2, 4)]
    path.write_text("seq_len,batch,latency_s\n" + "\n".join(rows) + "\n")
    return str(path)


@pytest.fixture
def requests_csv(tmp_path):
    path = tmp_path / "requests.csv"
    path.write_text("id,seq_len,arrival\nr1,10,0.0\nr2,20,0.1\nr3,40,0.2\n")
    return str(path)


def test_flops():
    code, out, err = run("--no-header", "flops", "--seq", "40")
    assert code == EXIT_OK
    values = keyvalues(out)
    assert values["flops"] == "6853754880"
    assert float(values["gflops"]) == pytest.approx(6.9, abs=0.06)


def test_header_goes_to_stdout_only(tmp_path):
    code, out, _ = run("flops", "--seq", "40")
    assert code == EXIT_OK
    header = [line for line in out.splitlines() if line.startswith("#")]
    assert "# command=flops" in header
    assert any(line.startswith("# run_at=") for line in header)

    target = tmp_path / "flops.txt"
    code, out, _ = run("--out", str(target), "flops", "--seq", "40")
    assert code == EXIT_OK
    assert out.startswith("# ")
    assert "flops=6853754880" not in out
    assert not target.read_text().startswith("#")
    assert "flops=6853754880" in target.read_text()


def test_bad_flag_is_a_usage_error(capsys):
    code, out, err = run("flops", "--seq", "forty")
    assert code == EXIT_USAGE
    assert "invalid int value" in err
    assert err.startswith("usage: ")
    assert out == ""

    code, _, err = run("no-such-command")
    assert code == EXIT_USAGE
    assert "invalid choice" in err
    assert "unrecognized arguments: --bogus" in run("flops", "--seq", "40", "--bogus")[2]
    assert capsys.readouterr().err == ""


def test_empty_request_file_is_a_usage_error(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    code, out, err = run("schedule", "--requests", str(path))
    assert code == EXIT_USAGE
    assert "no requests" in err
    assert out == ""


def test_missing_file_is_a_runtime_error(tmp_path):
    missing = str(tmp_path / "nope.csv")
    code, _, err = run("schedule", "--requests", missing)
    assert code == EXIT_RUNTIME
    assert err.startswith("error: ")
    assert "nope.csv" in err


def test_malformed_request_file_names_the_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,seq_len,arrival\nr1,ten,0.0\n")
    code, _, err = run("schedule", "--requests", str(path))
    assert code == EXIT_RUNTIME
    assert "bad.csv:2" in err


def test_records_feed_plan_memory(tmp_path):
    records = tmp_path / "records.txt"
    assert run("--out", str(records), "records", "--seq", "64")[0] == EXIT_OK
    assert len(records.read_text().splitlines()) == 12 * 12

    code, out, _ = run("--no-header", "plan-memory", "--records", str(records))
    assert code == EXIT_OK
    plan_csv, summary = out.split("\n\n")
    assert plan_csv.splitlines()[0] == "tensor_id,chunk_id,offset"
    assert len(plan_csv.splitlines()) == 12 * 12 + 1
    values = keyvalues(summary)
    assert values["algo"] == "turbo"
    assert int(values["high_water"]) <= int(values["footprint"])

    for algo in ("gsoc", "caching"):
        code, out, _ = run("--no-header", "--format", "keyvalue", "plan-memory", "--records", str(records),
                           "--algo", algo)
        assert code == EXIT_OK
        assert keyvalues(out)["algo"] == algo


def test_schedule_with_cost_table(table_csv, requests_csv):
    code, out, err = run("--no-header", "schedule", "--requests", requests_csv, "--costs", table_csv,
                         "--interpolate")
    assert code == EXIT_OK, err
    plan_csv, summary = out.split("\n\n")
    assert plan_csv.splitlines()[0] == "batch_idx,request_id,padded_len"
    assert keyvalues(summary)["requests"] == "3"

    code, out, _ = run("--no-header", "--format", "keyvalue", "schedule", "--requests", requests_csv,
                       "--costs", table_csv, "--interpolate", "--algo", "naive")
    assert code == EXIT_OK
    assert keyvalues(out)["batches"] == "1"


def test_schedule_reports_missing_cost(tmp_path, requests_csv):
    table = tmp_path / "sparse.csv"
    table.write_text("seq_len,batch,latency_s\n10,1,0.01\n20,1,0.02\n40,1,0.04\n")
    code, _, err = run("schedule", "--requests", requests_csv, "--costs", str(table), "--algo", "naive")
    assert code == EXIT_RUNTIME
    assert "seq_len=40" in err


def test_cost_sources_are_exclusive(table_csv, requests_csv):
    code, _, err = run("schedule", "--requests", requests_csv, "--costs", table_csv, "--cost-store", "x")
    assert code == EXIT_USAGE
    assert "mutually exclusive" in err


def test_warmup_store_then_schedule(tmp_path, requests_csv):
    db = str(tmp_path / "costs.db")
    code, out, _ = run("--no-header", "warmup", "--grid-seq", "10", "40", "--grid-batch", "1", "2", "4",
                       "--store", "bert", "--db", db)
    assert code == EXIT_OK
    assert out.splitlines()[0] == "seq_len,batch,latency_s"
    assert len(out.splitlines()) == 7

    code, out, err = run("--no-header", "--format", "keyvalue", "schedule", "--requests", requests_csv,
                         "--cost-store", "bert", "--db", db, "--interpolate")
    assert code == EXIT_OK, err
    assert float(keyvalues(out)["predicted_cost"]) > 0

    code, _, err = run("schedule", "--requests", requests_csv, "--cost-store", "other", "--db", db)
    assert code == EXIT_RUNTIME
    assert "other" in err


def test_simulate_is_reproducible(tmp_path):
    first, second = tmp_path / "a.txt", tmp_path / "b.txt"
    trace = tmp_path / "trace.csv"
    argv = ["simulate", "--rate", "200", "--dur", "2", "--trace", str(trace)]
    assert run("--seed", "3", "--out", str(first), *argv)[0] == EXIT_OK
    assert run("--seed", "3", "--out", str(second), *argv)[0] == EXIT_OK
    assert first.read_bytes() == second.read_bytes()

    values = keyvalues(first.read_text())
    assert values["algo"] == "dp"
    assert values["arrivals"] == values["completed"]
    assert trace.read_text().splitlines()[0] == "request_id,seq_len,arrival,start,end"

    run("--seed", "4", "--out", str(second), *argv)
    assert first.read_bytes() != second.read_bytes()


def test_simulate_lazy_csv():
    code, out, _ = run("--no-header", "--format", "csv", "simulate", "--rate", "100", "--dur", "1",
                       "--policy", "lazy", "--timeout", "0.005", "--max-batch", "8")
    assert code == EXIT_OK
    header, row = out.splitlines()
    assert header.startswith("algo,policy,rate")
    assert row.startswith("dp,lazy,100.0")


def test_invalid_workload_is_a_runtime_error():
    code, _, err = run("simulate", "--rate", "10", "--len-lo", "50", "--len-hi", "5")
    assert code == EXIT_RUNTIME
    assert "Invalid workload" in err


def test_critical_point_and_sweep():
    code, out, _ = run("--no-header", "critical-point", "--rate", "100", "--dur", "2", "--algo", "nobatch",
                       "--rel-tol", "0.1")
    assert code == EXIT_OK
    assert float(keyvalues(out)["critical_rate"]) > 0

    code, out, _ = run("--no-header", "sweep", "--rates", "10", "50", "--dur", "2")
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0].startswith("rate,request_throughput,serving_throughput")
    assert len(lines) == 3


def test_footprint():
    code, out, _ = run("--no-header", "footprint", "--lengths", "5", "200", "240", "17")
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0] == "request,seq_len,planner_chunks,planner_held,planner_peak,gsoc,caching"
    assert len(lines) == 5

    code, out, _ = run("--no-header", "footprint", "--count", "6", "--idle-limit", "2")
    assert code == EXIT_OK
    assert len(out.splitlines()) == 7


def test_bench_reductions():
    code, out, _ = run("--no-header", "bench-reductions", "--rows", "4", "--cols", "16")
    assert code == EXIT_OK
    values = keyvalues(out)
    assert values["rows"] == "4"
    assert "softmax_rows_per_sec" not in values

    code, out, _ = run("--no-header", "bench-reductions", "--rows", "4", "--cols", "16", "--timing")
    assert "softmax_rows_per_sec" in keyvalues(out)


def test_invalid_configuration_is_a_runtime_error(monkeypatch):
    monkeypatch.setattr(Config, "MAX_BATCH", 0)
    code, _, err = run("flops", "--seq", "40")
    assert code == EXIT_RUNTIME
    assert "Configuration errors" in err
    assert "MAX_BATCH" in err


def test_global_flags_after_the_subcommand(tmp_path):
    argv = ["simulate", "--rate", "50", "--dur", "1"]
    code, after, err = run(*argv, "--seed", "3", "--no-header")
    assert code == EXIT_OK, err
    assert not after.startswith("#")
    assert after == run("--seed", "3", "--no-header", *argv)[1]
    assert after != run("--seed", "4", "--no-header", *argv)[1]

    code, out, _ = run("bench-reductions", "--rows", "4", "--cols", "16", "--seed", "1", "--no-header")
    assert code == EXIT_OK
    assert keyvalues(out)["seed"] == "1"

    table = tmp_path / "table.csv"
    code, out, _ = run("warmup", "--grid-seq", "10", "40", "--grid-batch", "1", "2", "--out", str(table))
    assert code == EXIT_OK
    assert out.startswith("# ")
    assert table.read_text().splitlines()[0] == "seq_len,batch,latency_s"

    code, out, _ = run("--format", "keyvalue", "flops", "--seq", "40", "--format", "csv", "--no-header")
    assert code == EXIT_OK
    assert out.splitlines()[0].startswith("model,batch,seq_len,flops")


def test_subcommand_flags_override_global_ones():
    code, out, _ = run("--seed", "3", "bench-reductions", "--rows", "4", "--cols", "16", "--seed", "5")
    assert code == EXIT_OK
    assert "# seed=5" in out.splitlines()
    assert keyvalues(out)["seed"] == "5"


def test_schedule_charges_table_cost_as_batch_latency(tmp_path, requests_csv):
    table = tmp_path / "flat.csv"
    table.write_text("seq_len,batch,latency_s\n" + "".join(f"40,{b},0.004\n" for b in (1, 2, 3)))
    code, out, err = run("--no-header", "--format", "keyvalue", "schedule", "--requests", requests_csv,
                         "--costs", str(table), "--algo", "naive")
    assert code == EXIT_OK, err
    assert float(keyvalues(out)["predicted_cost"]) == pytest.approx(0.004)

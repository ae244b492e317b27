"""Scenario files, expected-step matching and the command line."""

import json

import pytest

from hasim import ScenarioError, check_expected_steps, list_builtin, load_scenario, parse_scenario
from hasim.cli import EXIT_DIVERGED, EXIT_INVARIANT, EXIT_OK, EXIT_USAGE, main
from hasim.engine import TraceEntry
from hasim.scenario import BUILTIN_DIR, InjectionKind

HEADER = """\
node node1
node node2
link node1 node2 latency 1ms bandwidth 12500000
config ha configs/ha.cf
config drbd configs/drbd.conf
config cib configs/bootstrap.xml
config cib configs/stonith-power.xml
config cib configs/vms.xml
"""


def parse(body: str):
    return parse_scenario(HEADER + body, "t", BUILTIN_DIR, "t.scn")


def error_of(body: str) -> ScenarioError:
    with pytest.raises(ScenarioError) as info:
        parse(body)
    return info.value


# -- parsing ----------------------------------------------------------------

def test_parse_full_scenario():
    sc = parse("""\
seed 7
set protocol A
workload commits vm=vm1 interval=5ms from=19s until=30s
workload requests vm=vm3
inject 20s power-pull node1 restore=60s jitter=100ms
inject 30s link-partition node1 node2
expect "node2 declares node1 dead"
end 3m
expect "vm1 running on node2"
""")
    assert sc.seed == 7 and sc.nodes == ["node1", "node2"]
    assert sc.settings == {"protocol": "A"}
    w = sc.workloads[0]
    assert (w.kind, w.vm, w.interval, w.start, w.until) == ("commits", "vm1", 5, 19_000, 30_000)
    assert sc.workloads[1].interval == 50
    first, second = sc.timeline
    assert (first.at, first.kind, first.target, first.restore, first.jitter) == \
        (20_000, InjectionKind.POWER_PULL, ("node1",), 60_000, 100)
    assert second.target == ("node1", "node2")
    assert sc.end_at == 180_000
    assert sc.expected == ["node2 declares node1 dead", "vm1 running on node2"]
    assert len(sc.cib_texts) == 3 and sc.drbd_text and sc.ha_text


def test_comments_and_blank_lines():
    sc = parse("# a comment\n\nend 10s  # trailing\n")
    assert sc.end_at == 10_000 and sc.timeline == []


def test_unsorted_timeline_reports_line_and_column():
    e = error_of("inject 30s power-pull node1\ninject 20s power-pull node2\nend 60s\n")
    assert (e.line, e.col) == (10, 8)
    assert "not sorted" in e.message
    assert str(e).startswith("t.scn:10:8:")


def test_unknown_target_points_at_the_target():
    e = error_of("inject 20s power-pull node9\nend 60s\n")
    assert (e.line, e.col) == (9, 23) and "node9" in e.message


def test_missing_end():
    e = error_of("inject 20s power-pull node1\n")
    assert "end" in e.message


def test_end_before_last_injection():
    e = error_of("inject 20s power-pull node1\nend 10s\n")
    assert e.line == 9 and "after the last injection" in e.message


@pytest.mark.parametrize("body,needle", [
    ("frobnicate\nend 1s\n", "unknown directive"),
    ("inject 1s meteor node1\nend 5s\n", "unknown injection kind"),
    ("inject 1s link-partition node1\nend 5s\n", "takes 2 target"),
    ("inject soon power-pull node1\nend 5s\n", "bad duration"),
    ("set warp_factor 9\nend 5s\n", "unknown setting"),
    ("workload batch vm=vm1\nend 5s\n", "commits or requests"),
    ("workload commits interval=5ms\nend 5s\n", "vm="),
    ("workload commits vm=vm1 interval=0ms\nend 5s\n", "positive"),
    ("config cib nowhere.xml\nend 5s\n", "missing config file"),
    ("end 5s\nnode node3\n", "after end"),
    ("node node1\nend 5s\n", "duplicate node"),
    ("inject 1s power-pull node1 restore=never\nend 5s\n", "bad duration"),
])
def test_parse_errors(body, needle):
    assert needle in error_of(body).message


def test_builtins_all_parse():
    names = list_builtin()
    assert {"failed-server-1", "failed-server-2", "split-brain-dual-primary",
            "failback-resync", "crash-during-commits"} <= set(names)
    for name in names:
        assert load_scenario(name).end_at > 0


def test_load_unknown_scenario():
    with pytest.raises(ScenarioError):
        load_scenario("no-such-thing")


def test_shifted_and_with_settings_copy():
    sc = parse("inject 20s power-pull node1\nend 60s\n")
    moved = sc.shifted(0, 21_000).with_settings(protocol="B")
    assert moved.timeline[0].at == 21_000 and moved.settings == {"protocol": "B"}
    assert sc.timeline[0].at == 20_000 and sc.settings == {}


# -- expected steps ---------------------------------------------------------

def entries(*details):
    return [TraceEntry(i, None, "x", "y", d) for i, d in enumerate(details)]


def test_expected_steps_are_an_ordered_subsequence():
    trace = entries("a started", "noise", "b running on node2", "c done")
    assert check_expected_steps(trace, ["a *", "b running on *", "c done"]).matched
    v = check_expected_steps(trace, ["b running on *", "a *"])
    assert not v.matched and v.first_divergence == "a *" and v.consumed == 1


def test_divergence_names_the_nearest_entry():
    v = check_expected_steps(entries("vm1 running on node2"), ["vm1 running on node1"])
    assert v.nearest is not None and "vm1 running on node2" in v.nearest
    assert "Diverged" in str(v)


def test_each_trace_entry_matches_at_most_once():
    assert not check_expected_steps(entries("x"), ["x", "x"]).matched


# -- command line -----------------------------------------------------------

def test_cli_run_json(capsys):
    assert main(["run", "failed-server-1", "--format", "json"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"scenario", "seed", "failover_ms", "downtime_ms", "lost_acked",
                        "lost_unacked", "resync_ms", "verdict", "first_divergence"}
    assert out["verdict"] == "Matched" and out["failover_ms"] == 31_500


def test_cli_diverged_exit_code(capsys):
    assert main(["run", "failed-server-1-sticky"]) == EXIT_DIVERGED
    assert "Diverged" in capsys.readouterr().out


def test_cli_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("node a\ninject 5s power-pull b\nend 10s\n")
    assert main(["run", str(bad)]) == EXIT_USAGE
    assert "2:" in capsys.readouterr().err


def test_cli_invariant_exit_code(monkeypatch, capsys):
    import hasim.cli as cli
    from hasim.cluster import RunReport

    monkeypatch.setattr(cli, "run_scenario", lambda *a, **k: RunReport(
        "x", 0, violations=["vm1 running on node1 and node2"]))
    assert main(["run", "failed-server-1"]) == EXIT_INVARIANT


def test_cli_many_scenarios_and_trace_files(tmp_path, capsys):
    base = tmp_path / "trace.jsonl"
    code = main(["run", "failed-server-1", "failed-server-2", "--format", "json",
                 "--trace", str(base), "--parallel", "2"])
    assert code == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert [p["scenario"] for p in payload] == ["failed-server-1", "failed-server-2"]
    lines = (tmp_path / "trace.failed-server-1.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["t"] == 0
    assert any(json.loads(x)["module"] == "net" for x in lines)


def test_cli_validate_list_and_show(capsys):
    assert main(["validate", "failed-server-1"]) == EXIT_OK
    assert "failed-server-1: ok" in capsys.readouterr().out
    assert main(["list-builtin"]) == EXIT_OK
    listing = capsys.readouterr().out
    assert "failed-server-1" in listing and "split-brain-dual-primary" in listing
    assert main(["show-config", "failed-server-1"]) == EXIT_OK
    shown = capsys.readouterr().out
    assert "deadtime=10000ms" in shown and "protocol=C" in shown


def test_cli_seed_override(capsys):
    assert main(["run", "crash-during-commits", "--seed", "5", "--format", "json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["seed"] == 5


def test_cli_fuzz(capsys):
    assert main(["fuzz", "--runs", "3"]) == EXIT_OK
    assert "3 runs, 0 with invariant violations" in capsys.readouterr().out
    assert main(["fuzz", "--show", "4"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("# fuzz run 4")

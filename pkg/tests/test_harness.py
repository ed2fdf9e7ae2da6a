"""Scenario parsing, replay, trace emission, figures and the CLI."""

import os
from importlib import resources

import pytest

from fleetmesh import cli
from fleetmesh.netsim import NodeMode
from fleetmesh.runner import (
    RunReport,
    SinkUnavailable,
    emit_trace,
    metrics_block,
    run_scenario,
)
from fleetmesh.scenario import (
    ParseError,
    UnresolvedReference,
    load_scenario,
    parse_scenario,
)


def fixture_path(name: str) -> str:
    return str(resources.files("fleetmesh").joinpath("scenarios", f"{name}.scn"))


def fixture(name: str):
    return load_scenario(fixture_path(name))


# ------------------------------------------------------------------ parsing

def test_empty_file_is_a_parse_error():
    with pytest.raises(ParseError):
        parse_scenario("")
    with pytest.raises(ParseError):
        parse_scenario("# only a comment\n")


def test_parse_error_carries_line_number():
    text = "scenario x\n[nodes]\nn1 client\nbogus line here\n"
    with pytest.raises(ParseError) as err:
        parse_scenario(text)
    assert err.value.line == 4


def test_header_required_first():
    with pytest.raises(ParseError):
        parse_scenario("[nodes]\nn1 client\n")


def test_unknown_section_rejected():
    with pytest.raises(ParseError):
        parse_scenario("scenario x\n[wat]\n")


def test_unknown_node_in_link_is_unresolved():
    text = "scenario x\n[nodes]\na router\n[links]\nl1 a ghost latency=5\n"
    with pytest.raises(UnresolvedReference):
        parse_scenario(text)


def test_event_referencing_unknown_node_is_unresolved():
    text = (
        "scenario x\n[nodes]\na router\n"
        "[timeline]\n@10 put ghost /k text:v\n"
    )
    with pytest.raises(UnresolvedReference) as err:
        parse_scenario(text)
    assert err.value.ref_id == "ghost"


def test_timeline_must_be_sorted():
    text = (
        "scenario x\n[nodes]\na router\n"
        "[timeline]\n@20 link_up l1\n@10 link_up l1\n"
    )
    with pytest.raises(ParseError):
        parse_scenario(text)


def test_bad_key_expression_is_a_parse_error():
    text = "scenario x\n[nodes]\na router\n[storages]\ns a not-a-key\n"
    with pytest.raises(ParseError):
        parse_scenario(text)


def test_bad_schema_field_is_a_parse_error():
    text = "scenario x\n[schemas]\nsc /a/** speed:wat\n"
    with pytest.raises(ParseError):
        parse_scenario(text)


def test_unknown_workload_in_run_dag():
    text = (
        "scenario x\n[nodes]\na router\n"
        "[timeline]\n@10 run_dag r ghost sites=\n"
    )
    with pytest.raises(UnresolvedReference):
        parse_scenario(text)


def test_manifest_without_image_is_unresolved():
    text = (
        "scenario x\n[nodes]\na router\n"
        "[manifests]\njob-1 /fleet/** container app 2.0\n"
    )
    with pytest.raises(UnresolvedReference):
        parse_scenario(text)


def test_ota_fleet_fixture_shape():
    sc = fixture("ota_fleet")
    modes = [d.mode for d in sc.nodes.values()]
    assert len(sc.nodes) == 5
    assert modes.count(NodeMode.CLIENT) == 3  # the vehicles
    assert "cloud-1" in sc.nodes and "edge-1" in sc.nodes
    assert sc.fleet is not None and len(sc.fleet.agents) == 3
    assert set(sc.manifests) == {"job-1"}


def test_all_fixtures_parse():
    for name in ("ota_fleet", "coop_driving", "offload_perception"):
        sc = fixture(name)
        assert sc.name == name
        assert sc.expectations


# ------------------------------------------------------------------ running

def test_empty_scenario_runs_to_header_and_metrics(tmp_path):
    report = run_scenario(parse_scenario("scenario bare\n"), seed=3)
    assert report.ok
    assert len(report.trace_lines) == 1  # header only
    path = str(tmp_path / "bare.trace")
    emit_trace(report, path)
    text = open(path).read()
    assert text.startswith("# fleetmesh-trace v1 scenario=bare seed=3")
    assert "[metrics]" in text
    assert "net.deliveries=0" in text


def test_coop_driving_outcomes():
    report = run_scenario(fixture("coop_driving"), seed=0)
    assert report.ok, report.failures
    m = report.metrics
    assert m["sub.ad-app.count"] >= 1
    assert m["get.ops.replies"] == 2
    assert m["get.hello.replies"] == 1
    assert m["twin.twin-1.synced"] == 1


def test_ota_fleet_outcomes():
    report = run_scenario(fixture("ota_fleet"), seed=0)
    assert report.ok, report.failures
    m = report.metrics
    assert m["ota.job-1./fleet/veh-1"] == "COMMITTED"
    assert m["ota.job-1./fleet/veh-2"] == "ROLLED_BACK"
    assert m["ota.job-1./fleet/veh-3"] == "COMMITTED"
    assert any(line.startswith("OTA ") for line in report.trace_lines)


def test_offload_perception_outcomes():
    report = run_scenario(fixture("offload_perception"), seed=0)
    assert report.ok, report.failures
    m = report.metrics
    assert m["dag.edge.makespan"] < m["dag.solo.makespan"]
    assert m["dag.edge.miss_ratio"] < m["dag.solo.miss_ratio"]
    assert m["dag.edge.makespan"] == m["dag.edge.planned"]


def test_same_seed_same_hash_differing_seed_differs():
    a = run_scenario(fixture("ota_fleet"), seed=5)
    b = run_scenario(fixture("ota_fleet"), seed=5)
    c = run_scenario(fixture("ota_fleet"), seed=6)
    assert a.trace_hash == b.trace_hash
    assert a.trace_lines == b.trace_lines
    assert a.trace_hash != c.trace_hash
    assert c.ok


def test_failing_expectation_lists_failure():
    text = (
        "scenario f\n[nodes]\na router\nb client\n"
        "[links]\nl1 a b latency=5\n"
        "[subscriptions]\ns b /x/**\n"
        "[timeline]\n@10 put a /x/1 text:v\n"
        "[expect]\nsub.s.count == 99\n"
    )
    report = run_scenario(parse_scenario(text), seed=0)
    assert not report.ok
    assert len(report.failures) == 1
    assert "sub.s.count" in report.failures[0]


def test_expect_unknown_metric_is_unresolved():
    text = "scenario f\n[expect]\nno.such.metric == 1\n"
    with pytest.raises(UnresolvedReference):
        run_scenario(parse_scenario(text), seed=0)


def test_expect_can_compare_two_metrics():
    text = (
        "scenario f\n[nodes]\na router\nb client\n"
        "[links]\nl1 a b latency=5\n"
        "[subscriptions]\ns b /x/**\n[subscriptions]\n"
        "[timeline]\n@10 put a /x/1 text:v\n"
        "[expect]\nsub.s.count <= net.deliveries\n"
    )
    report = run_scenario(parse_scenario(text), seed=0)
    assert report.ok, report.failures


def test_twin_routed_put_applies_side_rules():
    text = (
        "scenario t\n[nodes]\nhub router\ncar client\nops client\n"
        "[links]\nl1 hub car latency=5\nl2 hub ops latency=5\n"
        "[twins]\ntw device=car-1 cloud=ops device-node=car\n"
        "[timeline]\n@10 put ops /twin/car-1/desired/mode text:eco\n"
        "[expect]\ntwin.tw.synced == 1\ntwin.tw.desired_fields == 1\n"
    )
    report = run_scenario(parse_scenario(text), seed=0)
    assert report.ok, report.failures


def test_schema_enforced_during_run():
    from fleetmesh.infomodel import ValidationFailed
    text = (
        "scenario v\n[nodes]\na router\nb client\n"
        "[links]\nl1 a b latency=5\n"
        "[subscriptions]\ns b /road/**\n"
        "[schemas]\nsense /road/** state:enum=Red,Green\n"
        "[timeline]\n@10 put a /road/x text:Purple\n"
    )
    with pytest.raises(ValidationFailed):
        run_scenario(parse_scenario(text), seed=0)


# ---------------------------------------------------------------- emission

def test_emit_trace_and_metrics_block(tmp_path):
    report = run_scenario(fixture("coop_driving"), seed=1)
    path = str(tmp_path / "out" / "coop.trace")
    emit_trace(report, path)
    assert report.trace_path == path
    text = open(path).read()
    head, _, metrics = text.partition("\n\n[metrics]\n")
    assert head.splitlines()[0].startswith("# fleetmesh-trace v1")
    for line in metrics.strip().splitlines():
        name, _, value = line.partition("=")
        assert name and value != ""
    names = [l.split("=")[0] for l in metrics.strip().splitlines()]
    assert names == sorted(names)


def test_emit_trace_sink_unavailable():
    report = RunReport("x", 0, trace_lines=["# fleetmesh-trace v1"])
    with pytest.raises(SinkUnavailable):
        emit_trace(report, "/proc/definitely/not/writable/x.trace")


def test_fab_lines_present_for_puts():
    report = run_scenario(fixture("coop_driving"), seed=0)
    fab = [l for l in report.trace_lines if l.startswith("FAB ")]
    assert any(" PUT /road/intersection/4/object " in l for l in fab)
    assert any(l.split()[3] == "SUB" for l in fab)


# --------------------------------------------------------------------- CLI

def test_cli_run_ok(tmp_path, capsys):
    trace = str(tmp_path / "t.trace")
    metrics = str(tmp_path / "m.txt")
    code = cli.main(["run", fixture_path("coop_driving"), "--seed", "2",
                     "--trace", trace, "--metrics", metrics])
    out = capsys.readouterr().out
    assert code == 0
    assert os.path.exists(trace) and os.path.exists(metrics)
    assert "all 7 expectations hold" in out
    mtext = open(metrics).read()
    assert mtext.startswith("[metrics]")


def test_cli_bare_fixture_name_resolves(tmp_path):
    code = cli.main(["run", "ota_fleet", "--seed", "0", "--quiet",
                     "--trace", str(tmp_path / "o.trace")])
    assert code == 0


def test_cli_assertion_failure_exits_1(tmp_path):
    bad = tmp_path / "bad.scn"
    bad.write_text(
        "scenario bad\n[nodes]\na router\nb client\n"
        "[links]\nl1 a b latency=5\n"
        "[subscriptions]\ns b /x/**\n"
        "[timeline]\n@10 put a /x/1 text:v\n"
        "[expect]\nsub.s.count == 99\n"
    )
    code = cli.main(["run", str(bad), "--quiet", "--trace", str(tmp_path / "b.trace")])
    assert code == 1


def test_cli_parse_error_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("not a scenario\n")
    code = cli.main(["run", str(bad), "--quiet", "--trace", str(tmp_path / "b.trace")])
    capsys.readouterr()
    assert code == 2
    code = cli.main(["run", str(tmp_path / "missing.scn"), "--quiet"])
    capsys.readouterr()
    assert code == 2


def test_cli_trace_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FLEETMESH_TRACE_DIR", str(tmp_path))
    code = cli.main(["run", "coop_driving", "--seed", "0", "--quiet"])
    assert code == 0
    assert (tmp_path / "coop_driving.trace").exists()


def test_figures_rendered(tmp_path):
    code = cli.main(["run", "offload_perception", "--seed", "0", "--quiet",
                     "--trace", str(tmp_path / "o.trace"),
                     "--figures", str(tmp_path / "figs")])
    assert code == 0
    made = sorted(os.listdir(tmp_path / "figs"))
    assert "offload_perception_traffic.png" in made
    assert "offload_perception_dag_solo.png" in made
    assert "offload_perception_dag_edge.png" in made
    for name in made:
        assert (tmp_path / "figs" / name).stat().st_size > 1000
    code = cli.main(["run", "ota_fleet", "--seed", "0", "--quiet",
                     "--trace", str(tmp_path / "o2.trace"),
                     "--figures", str(tmp_path / "figs")])
    assert code == 0
    assert (tmp_path / "figs" / "ota_fleet_ota_job-1.png").stat().st_size > 1000

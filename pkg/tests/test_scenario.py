"""Tests for the handover scenario, PEP sampling and fault injection."""

import random
from collections import Counter

import pytest

from flow_monitor.conformance import Aligner, windowed_diagnose
from flow_monitor.errors import ScenarioError, ValidationError
from flow_monitor.events import EventLog, Trace, procedures_of
from flow_monitor.scenario import (
    Activity,
    Choice,
    FaultSpec,
    Gateway,
    Parallel,
    PepConfig,
    ScenarioModel,
    anomaly_types_from,
    inject,
    load_scenario,
    pep,
    procedure_table,
    random_walk,
    sample_procedure,
    simulate,
)


def chain_scenario():
    """One activity per component in a straight line."""
    activities = tuple(Activity(f"{c.lower()}_step", c) for c in ("ARBC", "EVC", "HRBC", "RTM"))
    ids = [a.id for a in activities]
    return ScenarioModel(activities, (), tuple(zip(ids, ids[1:])))


class TestScenarioModel:
    """Tests for scenario structure."""

    def test_default_scenario(self, handover_scenario):
        assert handover_scenario.entry == "hrbc_detect_border_approach"
        assert handover_scenario.exit == "evc_confirm_session_end"
        assert handover_scenario.components == ["ARBC", "EVC", "HRBC", "RTM"]
        assert len(handover_scenario.activities) >= 16
        order = handover_scenario.topological_order()
        assert order.index("registration_split") < order.index("registration_join")

    def test_default_scenario_has_choice_and_parallel(self, handover_scenario):
        kinds = {type(child) for child in handover_scenario.tree.children}
        assert Choice in kinds
        assert Parallel in kinds

    def test_every_walk_has_twenty_activities(self, handover_scenario):
        rng = random.Random(0)
        for _ in range(50):
            assert len(random_walk(handover_scenario, rng)) == 20

    def test_file_round_trip(self, tmp_path, handover_scenario):
        path = tmp_path / "scenario.json"
        path.write_text(handover_scenario.to_json())
        assert load_scenario(path) == handover_scenario

    def test_cycle_rejected(self):
        with pytest.raises(ScenarioError):
            ScenarioModel(
                (Activity("a", "ARBC"), Activity("b", "EVC")),
                (),
                (("a", "b"), ("b", "a")),
            )

    def test_split_closed_by_wrong_join(self):
        activities = (Activity("a", "ARBC"), Activity("b", "EVC"), Activity("c", "RTM"), Activity("d", "HRBC"))
        gateways = (Gateway("s", "xor_split"), Gateway("j", "and_join"))
        edges = (("a", "s"), ("s", "b"), ("s", "c"), ("b", "j"), ("c", "j"), ("j", "d"))
        with pytest.raises(ScenarioError):
            ScenarioModel(activities, gateways, edges)

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"activities": [{"id": "a"}]}')
        with pytest.raises(ScenarioError):
            load_scenario(path)


class TestPep:
    """Tests for procedure execution probabilities."""

    @pytest.fixture
    def table(self, handover_scenario):
        return procedure_table(handover_scenario, PepConfig())

    def test_normal_procedure(self, table):
        proc = table["evc_store_accepting_rbc_id"]
        assert pep(proc, proc.normal_index, PepConfig(rho=0.99)) == pytest.approx(0.99)

    def test_other_procedure(self, table):
        proc = table["evc_store_accepting_rbc_id"]
        other = (proc.normal_index + 1) % 10
        assert pep(proc, other, PepConfig(rho=0.99)) == pytest.approx(0.01 / 9)

    def test_two_procedures_rho_zero(self):
        cfg = PepConfig(rho=0.0, procs_per_component=2)
        proc = procedure_table(chain_scenario(), cfg)["rtm_step"]
        assert pep(proc, 1 - proc.normal_index, cfg) == 1.0

    @pytest.mark.parametrize("rho", [0.0, 0.3, 0.99])
    def test_sums_to_one(self, table, rho):
        proc = table["arbc_register_train"]
        assert sum(pep(proc, i, PepConfig(rho=rho)) for i in range(10)) == pytest.approx(1.0)

    def test_index_out_of_range(self, table):
        with pytest.raises(ValidationError):
            pep(table["arbc_register_train"], 10, PepConfig())

    def test_rho_one_rejected(self):
        with pytest.raises(ValidationError):
            PepConfig(rho=1.0)

    def test_normal_procedures_distinct_within_component(self, table):
        for component in ("ARBC", "EVC", "HRBC", "RTM"):
            normals = [p.normal for p in table.values() if p.component == component]
            assert len(set(normals)) == len(normals)

    def test_empirical_frequencies(self):
        """Test 10,000 draws: p_0 within 0.01 of rho, the others within 0.0015."""
        proc = procedure_table(chain_scenario(), PepConfig())["evc_step"]
        rng = random.Random(42)
        counts = Counter(sample_procedure(proc, 0.99, rng) for _ in range(10_000))
        assert abs(counts[proc.normal] / 10_000 - 0.99) <= 0.01
        for label in proc.procedures:
            if label != proc.normal:
                assert abs(counts[label] / 10_000 - 0.01 / 9) <= 0.0015


class TestSimulate:
    """Tests for trace simulation."""

    def test_normal_fraction(self):
        """Test that about rho of 10,000 simulated events use the normal procedure."""
        scn = chain_scenario()
        cfg = PepConfig(rho=0.99)
        table = procedure_table(scn, cfg)
        log = simulate(scn, cfg, 2500, seed=11)
        normals = [table[a.id].normal for a in scn.activities]
        hits = sum(
            1 for trace in log for label, normal in zip(trace.labels, normals) if label == normal
        )
        assert abs(hits / log.total_events - 0.99) <= 0.01

    def test_deterministic(self, handover_scenario):
        a = simulate(handover_scenario, PepConfig(), 20, seed=5)
        b = simulate(handover_scenario, PepConfig(), 20, seed=5)
        assert a == b

    def test_trace_ids_and_components(self, clean_log):
        assert clean_log.traces[0].trace_id == "n0000"
        for trace in clean_log.traces[:10]:
            for event in trace.events:
                assert event.label in procedures_of(event.component)

    def test_rho_near_one_gives_normal_labels(self):
        scn = chain_scenario()
        cfg = PepConfig(rho=0.999999)
        table = procedure_table(scn, cfg)
        (trace,) = simulate(scn, cfg, 1, seed=0).traces
        assert trace.labels == tuple(table[a.id].normal for a in scn.activities)

    def test_zero_traces(self, handover_scenario):
        with pytest.raises(ValidationError):
            simulate(handover_scenario, PepConfig(), 0, seed=0)

    def test_permutation_seed_changes_normals(self, handover_scenario):
        a = procedure_table(handover_scenario, PepConfig(permutation_seed=0))
        b = procedure_table(handover_scenario, PepConfig(permutation_seed=1))
        assert [p.normal for p in a.values()] != [p.normal for p in b.values()]


class TestInject:
    """Tests for fault injection."""

    def test_skip(self):
        """Test that skipping the one target event leaves nine contiguous events."""
        steps = [(f"P{i}", "ARBC") for i in range(3)] + [("P33", "RTM")] + [(f"P{i}", "ARBC") for i in range(3, 9)]
        log = EventLog(traces=(Trace.build("t", steps),))
        (trace,) = inject(log, FaultSpec("RTM", ("skip",), seed=0)).traces
        assert len(trace) == 9
        assert [e.seq for e in trace.events] == list(range(9))
        assert "P33" not in trace.labels
        assert trace.ground_truth == "RTM"

    def test_wrong_procedure_stays_in_component(self):
        log = EventLog(traces=(Trace.build("t", [("P0", "ARBC"), ("P12", "EVC"), ("P1", "ARBC")]),))
        for seed in range(20):
            (trace,) = inject(log, FaultSpec("EVC", ("wrong_procedure",), seed=seed)).traces
            label = trace.labels[1]
            assert label in {f"P{i}" for i in range(10, 20)} - {"P12"}

    def test_wrong_order_swaps_with_successor(self):
        log = EventLog(traces=(Trace.build("t", [("P0", "ARBC"), ("P12", "EVC"), ("P1", "ARBC")]),))
        (trace,) = inject(log, FaultSpec("EVC", ("wrong_order",), seed=0)).traces
        assert trace.labels == ("P0", "P1", "P12")

    def test_other_components_untouched(self, clean_log):
        injected = inject(clean_log, FaultSpec("HRBC", ("skip", "wrong_procedure"), seed=3))
        assert len(injected) == len(clean_log)
        for before, after in zip(clean_log, injected):
            keep = lambda t: [e.label for e in t.events if e.component != "HRBC"]  # noqa: E731
            assert keep(before) == keep(after)
            assert after.labels != before.labels
            assert after.ground_truth == "HRBC"

    def test_low_probability_still_injects(self, clean_log):
        injected = inject(clean_log, FaultSpec("ARBC", injection_probability=0.0, seed=1))
        assert all(a.labels != b.labels for a, b in zip(injected, clean_log))

    def test_trace_without_target_left_alone(self, caplog):
        trace = Trace.build("t", [("P0", "ARBC")])
        (out,) = inject(EventLog(traces=(trace,)), FaultSpec("RTM")).traces
        assert out == trace
        assert out.ground_truth is None
        assert "no RTM events" in caplog.text

    def test_empty_log_rejected(self):
        with pytest.raises(ValidationError):
            inject(EventLog(), FaultSpec("RTM"))

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            FaultSpec("GSM")
        with pytest.raises(ValidationError):
            FaultSpec("RTM", ("teleport",))
        with pytest.raises(ValidationError):
            FaultSpec("RTM", ())
        assert anomaly_types_from("skip, wrong_order") == ("skip", "wrong_order")

    def test_injected_traces_deviate_from_the_clean_model(self, handover_scenario, handover_net):
        base = simulate(handover_scenario, PepConfig(), 100, seed=7, trace_prefix="r")
        injected = inject(base, FaultSpec("RTM", ("wrong_procedure",), seed=2))
        aligner = Aligner(handover_net)
        for trace in injected:
            assert windowed_diagnose(handover_net, trace, 15, aligner=aligner).total >= 1

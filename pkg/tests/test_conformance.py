"""Tests for optimal alignments, windowed chaining and diagnosis matrices."""

import itertools
import random
from functools import lru_cache

import pytest
from conftest import make_log

from flow_monitor.conformance import (
    Aligner,
    DiagnosisMatrix,
    MoveKind,
    align_complete,
    align_window,
    diagnose_log,
    windowed_diagnose,
)
from flow_monitor.discovery import DiscoveryConfig, discover, filter_variants
from flow_monitor.errors import SearchExhaustedError
from flow_monitor.events import EventLog, Trace
from flow_monitor.petri import Marking, WorkflowNet, enabled, fire
from flow_monitor.scenario import Choice, PepConfig, Serial, Step, procedure_table, simulate


def language(net):
    """Visible label sequences of every complete firing sequence (acyclic nets only)."""
    words = set()

    def walk(marking, word):
        if marking == net.final_marking:
            words.add(word)
        for t in enabled(net, marking):
            walk(fire(net, marking, t), word + ((t.label,) if t.label else ()))

    walk(net.initial_marking, ())
    return words


def lcs(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def oracle_cost(net, trace):
    """Minimum log/model moves: |σ| + |ρ| - 2·LCS over every model run ρ."""
    trace = tuple(trace)
    return min(len(trace) + len(w) - 2 * lcs(trace, w) for w in language(net))


def traces_from(seed, alphabet="abcdx", count=40, max_len=6):
    rng = random.Random(seed)
    return ["".join(rng.choice(alphabet) for _ in range(rng.randint(0, max_len))) for _ in range(count)]


def random_block(rng, budget):
    """A random block tree with at most ``budget`` visible activities."""
    if budget <= 1 or rng.random() < 0.3:
        return ("tau",) if rng.random() < 0.15 else ("act", rng.choice("abcde"))
    kind = rng.choice(["seq", "xor", "and"])
    n = rng.randint(2, min(3, budget))
    return (kind, [random_block(rng, budget // n) for _ in range(n)])


def random_net(seed, max_transitions=8):
    """Acyclic block-structured workflow net with at most ``max_transitions`` transitions."""
    rng = random.Random(seed)
    while True:
        places, transitions, arcs = ["source", "sink"], {}, []

        def place():
            places.append(f"p{len(places)}")
            return places[-1]

        def transition(label, pre, post):
            tid = f"t{len(transitions)}"
            transitions[tid] = label
            arcs.extend([(p, tid) for p in pre] + [(tid, p) for p in post])

        def translate(block, entry, exit_):
            kind = block[0]
            if kind in ("act", "tau"):
                transition(block[1] if kind == "act" else None, [entry], [exit_])
            elif kind == "xor":
                for child in block[1]:
                    translate(child, entry, exit_)
            elif kind == "seq":
                cuts = [entry] + [place() for _ in block[1][1:]] + [exit_]
                for child, a, b in zip(block[1], cuts, cuts[1:]):
                    translate(child, a, b)
            else:
                starts = [place() for _ in block[1]]
                ends = [place() for _ in block[1]]
                transition(None, [entry], starts)
                for child, a, b in zip(block[1], starts, ends):
                    translate(child, a, b)
                transition(None, ends, [exit_])

        translate(random_block(rng, 5), "source", "sink")
        if len(transitions) <= max_transitions:
            return WorkflowNet.build(places, transitions, arcs, name=f"random{seed}")


def memo_language(net):
    @lru_cache(maxsize=None)
    def words(marking):
        found = {()} if marking == net.final_marking else set()
        for t in enabled(net, marking):
            head = (t.label,) if t.label else ()
            found |= {head + w for w in words(fire(net, marking, t))}
        return frozenset(found)

    return words(net.initial_marking)


def mutate(rng, word, alphabet="abcdex"):
    """Apply a skip, an insertion or a swap; keep at most six events."""
    word = list(word)
    kind = rng.choice(["skip", "insert", "swap"])
    if kind == "skip" and word:
        del word[rng.randrange(len(word))]
    elif kind == "swap" and len(word) > 1:
        i = rng.randrange(len(word) - 1)
        word[i], word[i + 1] = word[i + 1], word[i]
    else:
        word.insert(rng.randint(0, len(word)), rng.choice(alphabet))
    return tuple(word[:6])


def interleavings(runs):
    runs = [r for r in runs if r]
    if not runs:
        return [[]]
    out = []
    for i, run in enumerate(runs):
        rest = runs[:i] + [run[1:]] + runs[i + 1 :]
        out += [[run[0]] + tail for tail in interleavings(rest)]
    return out


def all_walks(block):
    """Every activity sequence of a scenario block tree."""
    if isinstance(block, Step):
        return [[block.activity]]
    if isinstance(block, Choice):
        return [w for branch in block.branches for w in all_walks(branch)]
    if isinstance(block, Serial):
        walks = [[]]
        for child in block.children:
            walks = [w + tail for w in walks for tail in all_walks(child)]
        return walks
    walks = []
    for combo in itertools.product(*(all_walks(b) for b in block.branches)):
        walks += interleavings(list(combo))
    return walks


class TestAlignComplete:
    """Tests for complete alignments."""

    def test_fitting_trace(self, seq_net):
        alignment = align_complete(seq_net, "abc")
        assert alignment.cost == 0
        assert alignment.complete
        assert all(m.kind is MoveKind.SYNC for m in alignment.moves)

    def test_deleted_event(self, seq_net):
        """Test that a missing b costs one model move on b."""
        alignment = align_complete(seq_net, "ac")
        assert alignment.cost == 1
        assert [(m.kind, m.label) for m in alignment.moves if m.cost] == [(MoveKind.MODEL, "b")]

    def test_inserted_foreign_label(self, seq_net):
        """Test that an unknown label costs one log move."""
        alignment = align_complete(seq_net, "abxc")
        assert alignment.cost == 1
        assert alignment.deviations() == {"x": 1}
        assert alignment.log_projection() == ("a", "b", "x", "c")

    def test_silent_skip(self, choice_net):
        """Test that tau moves are free."""
        alignment = align_complete(choice_net, "ad")
        assert alignment.cost == 0
        assert [m.kind for m in alignment.moves] == [MoveKind.SYNC, MoveKind.TAU, MoveKind.SYNC]

    @pytest.mark.parametrize("net_name", ["seq_net", "and_net", "choice_net"])
    @pytest.mark.parametrize("heuristic", [True, False])
    def test_matches_exhaustive_oracle(self, request, net_name, heuristic):
        """Test optimality against exhaustive enumeration of model runs."""
        net = request.getfixturevalue(net_name)
        aligner = Aligner(net, heuristic=heuristic)
        for trace in traces_from(seed=len(net_name)):
            alignment = aligner.complete(trace)
            assert alignment.cost == oracle_cost(net, trace), trace
            assert alignment.cost == sum(m.cost for m in alignment.moves)
            assert alignment.log_projection() == tuple(trace)
            assert alignment.complete

    def test_random_nets_match_oracle(self):
        """Test 200 random nets with damaged runs against the exhaustive minimum."""
        rng = random.Random(2024)
        for seed in range(200):
            net = random_net(seed)
            runs = sorted(memo_language(net))
            aligner = Aligner(net)
            for _ in range(3):
                trace = mutate(rng, rng.choice(runs))
                expected = min(len(trace) + len(w) - 2 * lcs(trace, w) for w in runs)
                assert aligner.complete(trace).cost == expected, (net.name, trace)

    def test_deterministic(self, and_net):
        """Test that separate aligners agree move for move."""
        assert align_complete(and_net, "adbx") == align_complete(and_net, "adbx")

    def test_node_cap(self, seq_net):
        with pytest.raises(SearchExhaustedError) as excinfo:
            align_complete(seq_net, "abc", node_cap=1)
        assert excinfo.value.node_cap == 1
        assert not excinfo.value.unreachable

    def test_unreachable_final_marking(self):
        """Test that a trap marking reports an unreachable final marking."""
        net = WorkflowNet.build(
            ["source", "p1", "p2", "sink"],
            {"t0": "a", "exit": "b", "trap": "c", "loop": "d"},
            [
                ("source", "t0"),
                ("t0", "p1"),
                ("p1", "exit"),
                ("exit", "sink"),
                ("p1", "trap"),
                ("trap", "p2"),
                ("p2", "loop"),
                ("loop", "p2"),
            ],
        )
        aligner = Aligner(net)
        with pytest.raises(SearchExhaustedError) as excinfo:
            aligner.window([], Marking.of({"p2": 1}), final=True)
        assert excinfo.value.unreachable
        assert "unreachable" in str(excinfo.value)


class TestAlignWindow:
    """Tests for single windows."""

    def test_fitting_prefix(self, seq_net):
        """Test that a window stops after its last event."""
        alignment = align_window(seq_net, "ab")
        assert alignment.cost == 0
        assert alignment.end_marking == Marking.of({"p2": 1})
        assert not alignment.complete

    def test_empty_window(self, seq_net):
        start = Marking.of({"p1": 1})
        alignment = align_window(seq_net, [], start)
        assert alignment.moves == ()
        assert alignment.cost == 0
        assert alignment.end_marking == start

    def test_wrong_procedure(self, seq_net):
        """Test that an unknown label in place of b is one log move."""
        alignment = align_window(seq_net, "x", Marking.of({"p1": 1}))
        assert alignment.cost == 1
        assert alignment.end_marking == Marking.of({"p1": 1})

    def test_substitute_label_elsewhere_enabled(self, seq_net):
        """Test that c in place of b costs one move, skipping or consuming."""
        alignment = align_window(seq_net, "c", Marking.of({"p1": 1}))
        assert alignment.cost == 1

    def test_cache_keeps_recent_results(self, seq_net):
        aligner = Aligner(seq_net, cache_size=2)
        for window in ("a", "ab", "abc"):
            aligner.window(window)
        assert len(aligner._cache) == 2
        assert aligner.window("a").cost == 0
        assert aligner.window("abc", final=True).complete
        assert len(aligner._cache) == 2


class TestWindowed:
    """Tests for chained windows and diagnosis vectors."""

    def test_twenty_events_two_windows(self, handover_net, clean_log):
        trace = clean_log.traces[0]
        assert len(trace) == 20
        assert len(Aligner(handover_net).windowed(trace, 10)) == 2
        assert len(Aligner(handover_net).windowed(trace, 15)) == 2
        assert len(Aligner(handover_net).windowed(trace, 5)) == 4

    def test_wrong_procedure_chain(self, seq_net):
        """Test that w=1 with an unknown label adds a completion model move."""
        trace = Trace.build("t", [("a", "X"), ("x", "X"), ("c", "X")])
        vector = windowed_diagnose(seq_net, trace, 1)
        assert vector.nonzero() == {"b": 1, "x": 1}
        assert vector.total == align_complete(seq_net, trace).cost

    def test_short_trace_completion(self, seq_net):
        """Test that unconsumed mandatory work is charged in the last window."""
        trace = Trace.build("t", [("a", "X")])
        vector = windowed_diagnose(seq_net, trace, 5)
        assert vector.nonzero() == {"b": 1, "c": 1}

    def test_empty_trace(self, seq_net):
        vector = windowed_diagnose(seq_net, Trace("t", ()), 3)
        assert vector.total == 3

    @pytest.mark.parametrize("net_name", ["seq_net", "and_net", "choice_net"])
    def test_windowing_never_underestimates(self, request, net_name):
        """Test window sums against the complete cost, with equality for w >= |σ|."""
        net = request.getfixturevalue(net_name)
        for i, labels in enumerate(traces_from(seed=7)):
            trace = Trace.build(f"t{i}", [(label, "X") for label in labels])
            full = align_complete(net, trace).cost
            for w in (1, 2, 3):
                assert windowed_diagnose(net, trace, w).total >= full
            assert windowed_diagnose(net, trace, max(len(trace), 1)).total == full

    @pytest.mark.parametrize("w", [5, 10, 15])
    def test_frequent_variants_have_zero_diagnosis(self, handover_net, clean_log, w):
        """Test that traces of kept variants align without deviations."""
        kept = set(filter_variants(clean_log, 0.75).variants())
        aligner = Aligner(handover_net)
        for trace in clean_log:
            if trace.labels in kept:
                assert windowed_diagnose(handover_net, trace, w, aligner=aligner).total == 0

    @pytest.mark.parametrize("permutation_seed", range(5))
    def test_every_normal_walk_has_zero_diagnosis(self, handover_scenario, permutation_seed):
        """Test every branch and interleaving of normal procedures against the discovered net."""
        cfg = PepConfig(permutation_seed=permutation_seed)
        log = simulate(handover_scenario, cfg, 100, seed=permutation_seed)
        net = discover(log, DiscoveryConfig("dfg_net", variant_coverage=0.75))
        table = procedure_table(handover_scenario, cfg)
        walks = {tuple(w) for w in all_walks(handover_scenario.tree)}
        assert len(walks) == 12
        aligner = Aligner(net)
        for i, walk in enumerate(sorted(walks)):
            trace = Trace.build(f"n{i}", [(table[a].normal, table[a].component) for a in walk])
            for w in (5, 10, 15):
                assert windowed_diagnose(net, trace, w, aligner=aligner).total == 0, (walk, w)

    def test_skipped_event(self, handover_net, clean_log):
        """Test that a skipped EVC procedure never reduces the deviation count."""
        trace = clean_log.traces[0]
        skip = next(i for i, e in enumerate(trace.events) if e.component == "EVC")
        damaged = Trace.build(
            trace.trace_id, [(e.label, e.component) for j, e in enumerate(trace.events) if j != skip]
        )
        aligner = Aligner(handover_net)
        full = aligner.complete(damaged).cost
        assert windowed_diagnose(handover_net, damaged, 5, aligner=aligner).total >= full
        assert windowed_diagnose(handover_net, damaged, 25, aligner=aligner).total == full

    def test_binary_flags(self, seq_net):
        trace = Trace.build("t", [("x", "X"), ("x", "X"), ("a", "X"), ("b", "X"), ("c", "X")])
        assert windowed_diagnose(seq_net, trace, 5)["x"] == 2
        assert windowed_diagnose(seq_net, trace, 5, binary=True)["x"] == 1


class TestDiagnoseLog:
    """Tests for diagnosis matrices."""

    def test_columns_are_union(self, seq_net):
        log = make_log("abc", "axc")
        matrix = diagnose_log(seq_net, log, 2)
        assert matrix.columns == ("a", "b", "c", "x")
        assert (matrix.k, matrix.m) == (2, 4)
        assert matrix.to_array().sum(axis=1).tolist() == [0.0, 2.0]

    def test_empty_log(self, seq_net):
        matrix = diagnose_log(seq_net, EventLog(), 5)
        assert matrix.k == 0
        assert matrix.m == 3
        assert matrix.to_array().shape == (0, 3)

    @pytest.mark.parametrize("w", [5, 10, 15])
    def test_clean_log_mostly_fits(self, handover_net, clean_log, w):
        matrix = diagnose_log(handover_net, clean_log, w)
        zero_rows = sum(1 for row in matrix.rows if row.total == 0)
        assert zero_rows >= 0.75 * matrix.k
        assert matrix.m <= 40

    def test_csv(self, tmp_path, seq_net):
        """Test that the CSV keeps trace ids, ground truth and counts."""
        log = EventLog(
            traces=(
                Trace.build("n0", [("a", "ARBC"), ("b", "ARBC"), ("c", "ARBC")]),
                Trace.build("r0", [("a", "ARBC"), ("c", "ARBC")], ground_truth="RTM"),
            )
        )
        matrix = diagnose_log(seq_net, log, 5)
        path = tmp_path / "d.csv"
        matrix.write_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "trace_id,ground_truth,a,b,c"
        again = DiagnosisMatrix.read_csv(path)
        assert again == matrix
        assert again.ground_truth == [None, "RTM"]

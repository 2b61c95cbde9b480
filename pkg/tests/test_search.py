import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memsearch.denoiser import UNIT_NAMES, ArchConfig, Mask
from memsearch.errors import ConfigError, EmptyResultError, MaskError, TransferError
from memsearch.metrics import Objectives
from memsearch.search import (
    SearchConfig, TrialLog, TrialRecord, analyze_mask, check_transferable, converged, convergence_trial,
    crowding_distance, dominates, fast_non_dominated_sort, format_analysis, load_mask, merge_fronts,
    pareto_front, propose_offspring, read_trial_log, run_search, save_mask, select_scalarized, select_survivors,
)

from oracles import brute_fronts, brute_pareto

points = st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=25)


def rec(i, point, bits=(0,), status="ok"):
    obj = None if status != "ok" else Objectives(*map(float, point))
    return TrialRecord(i, Mask("toy", tuple(bits)), obj, 0, status)


def toy_mask(code, n):
    return Mask("toy", tuple((code >> (n - 1 - b)) & 1 for b in range(n)))


# ---------------------------------------------------------------- dominance and sorting


@pytest.mark.parametrize("a, b, expected", [
    ((1, 1), (2, 2), True),
    ((1, 2), (1, 3), True),
    ((1, 1), (1, 1), False),
    ((1, 3), (2, 2), False),
    ((2, 2), (1, 1), False),
])
def test_dominates_examples(a, b, expected):
    assert dominates(a, b) is expected
    assert dominates(Objectives(*map(float, a)), Objectives(*map(float, b))) is expected


def test_sort_examples():
    assert fast_non_dominated_sort([(1, 3), (2, 2), (3, 1), (3, 3), (4, 4)]) == [[0, 1, 2], [3], [4]]
    assert fast_non_dominated_sort([(1, 1), (1, 1)]) == [[0, 1]]
    assert fast_non_dominated_sort([]) == []


def test_sort_matches_brute_force_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pts = [tuple(p) for p in rng.integers(0, 8, size=(rng.integers(1, 40), 2))]
        assert fast_non_dominated_sort(pts) == brute_fronts(pts)


@given(points)
def test_sort_partitions_and_orders(pts):
    fronts = fast_non_dominated_sort(pts)
    assert sorted(i for f in fronts for i in f) == list(range(len(pts)))
    for r, front in enumerate(fronts):
        # no member of a front is dominated by a member of the same or a later front
        later = [j for f in fronts[r:] for j in f]
        assert not any(dominates(pts[j], pts[i]) for i in front for j in later)
        if r:
            assert all(any(dominates(pts[j], pts[i]) for j in fronts[r - 1]) for i in front)


# ---------------------------------------------------------------- crowding


def test_crowding_examples():
    assert np.all(np.isinf(crowding_distance([(0, 1), (1, 0)])))
    np.testing.assert_array_equal(crowding_distance([(0, 2), (1, 1), (2, 0)]), [np.inf, 2.0, np.inf])
    d = crowding_distance([(1, 1), (1, 1), (1, 1)])
    assert np.isinf(d[0]) and d[1] == 0.0 and np.isinf(d[2])
    with pytest.raises(ValueError):
        crowding_distance([])


# ---------------------------------------------------------------- fronts and selection


def test_pareto_front_matches_brute_force():
    rng = np.random.default_rng(1)
    pts = [tuple(map(float, p)) for p in rng.integers(0, 10, size=(60, 2))]
    trials = [rec(i, p) for i, p in enumerate(pts)]
    assert [t.trial_id for t in pareto_front(trials)] == brute_pareto(pts)


def test_pareto_front_skips_failed_and_empty():
    trials = [rec(0, None, status="diverged"), rec(1, (2, 2)), rec(2, None, status="error")]
    assert [t.trial_id for t in pareto_front(trials)] == [1]
    with pytest.raises(EmptyResultError):
        pareto_front(trials[:1])


def test_merge_fronts_filters_union():
    a = [rec(0, (1, 3)), rec(1, (3, 1))]
    b = [rec(2, (2, 2)), rec(3, (1, 4))]
    assert sorted(t.trial_id for t in merge_fronts(a, b)) == [0, 1, 2]


def test_select_scalarized_examples():
    assert select_scalarized([rec(0, (1, 3)), rec(1, (2, 1))]).trial_id == 1
    assert select_scalarized([rec(0, (3, 1)), rec(1, (1, 3))]).trial_id == 1
    assert select_scalarized([rec(4, (2, 2)), rec(3, (2, 2))]).trial_id == 3
    with pytest.raises(EmptyResultError):
        select_scalarized([])


def test_select_scalarized_normalised():
    # raw means favour (9, 0); min-max scaling makes the two tie on mean and d_mem decides
    front = [rec(0, (9, 0)), rec(1, (0, 10))]
    assert select_scalarized(front).trial_id == 0
    assert select_scalarized(front, normalize=True).trial_id == 1


# ---------------------------------------------------------------- convergence


def test_converged_example():
    values = [10.0] * 4 + [5.0] * 12 + [1.0] * 20
    assert convergence_trial(values, 12) == 29
    assert not converged(values[:28], 12) and converged(values[:29], 12)


def test_converged_ignores_tiny_gains():
    values = [1.0] + [1.0 - 1e-7 * i for i in range(1, 10)]
    assert converged(values, 9)


def test_converged_never_on_strict_improvement():
    values = [10.0 - i for i in range(30)]
    assert convergence_trial(values, 5) is None


def test_converged_on_records():
    trials = [rec(i, (2, 2)) for i in range(4)]
    assert not converged(trials, 4) and converged(trials, 3)


# ---------------------------------------------------------------- variation


def test_first_generation_random_distinct():
    cfg = SearchConfig(space="toy", n_bits=4, population=6, trial_budget=6)
    masks = propose_offspring([], [], cfg, 6, np.random.default_rng(0))
    assert len({m.bits for m in masks}) == 6


def test_no_variation_copies_parents():
    cfg = SearchConfig(space="toy", n_bits=6, crossover_prob=0.0, mutation_prob=0.0)
    archive = [rec(i, (i, 5 - i), toy_mask(c, 6).bits) for i, c in enumerate([3, 17, 40, 63])]
    # one child per call: siblings are deduplicated against each other
    kids = [propose_offspring(archive, [], cfg, 1, np.random.default_rng(s))[0] for s in range(20)]
    parents = {t.mask.bits for t in archive}
    assert all(k.bits in parents for k in kids)


def test_full_mutation_complements_parents():
    cfg = SearchConfig(space="toy", n_bits=6, crossover_prob=0.0, mutation_prob=1.0)
    archive = [rec(i, (i, 5 - i), toy_mask(c, 6).bits) for i, c in enumerate([3, 17, 40, 63])]
    kids = [propose_offspring(archive, [], cfg, 1, np.random.default_rng(s))[0] for s in range(20)]
    complements = {tuple(1 - b for b in t.mask.bits) for t in archive}
    assert all(k.bits in complements for k in kids)


def test_offspring_avoid_evaluated_masks():
    cfg = SearchConfig(space="toy", n_bits=8)
    archive = [rec(i, (i, 3 - i), toy_mask(c, 8).bits) for i, c in enumerate([1, 2, 4])]
    kids = propose_offspring(archive, [t.mask for t in archive], cfg, 10, np.random.default_rng(3))
    assert not {k.bits for k in kids} & {t.mask.bits for t in archive}


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=20), st.integers(1, 8))
def test_survivors_keep_scalarized_elite(pts, size):
    recs = [rec(i, p) for i, p in enumerate(pts)]
    kept = select_survivors(recs, size)
    assert len(kept) == min(size, len(recs))
    best = min(t.scalarized() for t in recs)
    assert any(t.scalarized() == best for t in kept)


def test_survivors_prefer_first_front():
    recs = [rec(0, (1, 3)), rec(1, (3, 1)), rec(2, (4, 4)), rec(3, None, status="error")]
    assert [t.trial_id for t in select_survivors(recs, 2)] == [0, 1]


# ---------------------------------------------------------------- driver


def stub(mask, seed):
    bits = np.array(mask.bits)
    weights = np.arange(1, len(bits) + 1)
    return Objectives(float(bits @ weights), float((1 - bits) @ weights[::-1]))


@pytest.mark.parametrize("n_bits", [2, 3])
def test_run_search_exhaustive_small_space(n_bits):
    n = 2 ** n_bits
    cfg = SearchConfig(space="toy", n_bits=n_bits, population=n, trial_budget=n, generations=1)
    res = run_search(cfg, stub)
    assert sorted(t.mask.bits for t in res.trials) == sorted(toy_mask(c, n_bits).bits for c in range(n))
    pts = [stub(toy_mask(c, n_bits), 0).as_tuple() for c in range(n)]
    expected = {toy_mask(c, n_bits).bits for c in brute_pareto(pts)}
    assert {t.mask.bits for t in res.front} == expected


def test_run_search_deterministic_and_budgeted():
    cfg = SearchConfig(space="toy", n_bits=10, population=5, trial_budget=23, seed=4)
    a, b = run_search(cfg, stub), run_search(cfg, stub)
    assert len(a.trials) == 23
    assert [(t.mask.bits, t.seed, t.generation) for t in a.trials] == [(t.mask.bits, t.seed, t.generation) for t in b.trials]
    assert [t.trial_id for t in a.trials] == list(range(23))


def test_run_search_front_invariants():
    cfg = SearchConfig(space="toy", n_bits=8, population=6, trial_budget=30, seed=1)
    res = run_search(cfg, stub)
    front = res.front
    assert not any(dominates(a.point(), b.point()) for a in front for b in front)
    assert all(any(dominates(f.point(), t.point()) or f.point() == t.point() for f in front) for t in res.trials)


def test_run_search_survives_failures():
    def flaky(mask, seed):
        if mask.bits[0]:
            raise FloatingPointError("boom")
        return stub(mask, seed)

    cfg = SearchConfig(space="toy", n_bits=3, population=8, trial_budget=8)
    res = run_search(cfg, flaky)
    assert sum(t.status == "diverged" for t in res.trials) == 4
    assert all(t.ok for t in res.front)


def test_duplicate_masks_get_fresh_seeds():
    cfg = SearchConfig(space="toy", n_bits=1, population=2, trial_budget=6, inner_seed=7)
    res = run_search(cfg, stub)
    by_mask = {}
    for t in res.trials:
        by_mask.setdefault(t.mask.bits, []).append(t.seed)
    assert all(len(set(s)) == len(s) and s[0] == 7 for s in by_mask.values())


@pytest.mark.parametrize("kw, field", [
    ({"space": "toy"}, "search.n_bits"),
    ({"space": "bogus"}, "search.space"),
    ({"population": 1}, "search.population"),
    ({"trial_budget": 3}, "search.trial_budget"),
    ({"patience": 0}, "search.patience"),
])
def test_search_config_errors(kw, field):
    with pytest.raises(ConfigError) as exc:
        SearchConfig(**kw)
    assert exc.value.field == field


# ---------------------------------------------------------------- persistence and analysis


def test_trial_log_round_trip(tmp_path):
    cfg = SearchConfig(space="toy", n_bits=3, population=4, trial_budget=8)
    path = tmp_path / "trials.jsonl"
    log = TrialLog(path, cfg)
    res = run_search(cfg, stub, on_trial=log.append)
    header, trials = read_trial_log(path)
    assert header["config"]["trial_budget"] == 8
    assert [(t.mask, t.objectives, t.seed, t.status) for t in trials] == \
        [(t.mask, t.objectives, t.seed, t.status) for t in res.trials]


def test_mask_file_round_trip(tmp_path):
    m = Mask("spectral", tuple(int(i % 3 == 0) for i in range(13)))
    save_mask(tmp_path / "m.json", m, "run-a", 0.25)
    back, meta = load_mask(tmp_path / "m.json")
    assert back == m and meta["source_run"] == "run-a" and meta["scalarized_score"] == 0.25


def test_mask_file_version_checked(tmp_path):
    (tmp_path / "m.json").write_text('{"version": 99, "space": "spectral", "bits": []}')
    with pytest.raises(MaskError):
        load_mask(tmp_path / "m.json")


def test_check_transferable():
    arch = ArchConfig(hidden=8)
    check_transferable(Mask.ones("attention"), arch)
    with pytest.raises(TransferError):
        check_transferable(Mask("toy", (1, 0)), arch)


def test_analyze_mask():
    arch = ArchConfig(hidden=8)
    zero = analyze_mask(Mask.zeros("spectral"), arch)
    assert zero["units"] == [] and zero["trainable"] == 0
    assert analyze_mask(Mask.ones("spectral"), arch)["trainable"] == 13 * 8
    one = analyze_mask(Mask("spectral", tuple(int(i == 12) for i in range(13))), arch)
    assert one["units"] == [UNIT_NAMES[12]] and one["trainable"] == 8
    assert math.isclose(one["fraction"], 8 / one["total"])
    assert "(none)" in format_analysis(zero)

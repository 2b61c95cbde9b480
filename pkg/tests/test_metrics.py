import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from memsearch.denoiser import base_view
from memsearch.diffusion import build_schedule
from memsearch.errors import MatrixError
from memsearch.metrics import (
    AttackReport, FeatureMap, Objectives, amd, attack_images, calibrate_delta, cosine_distance, d_mem,
    d_mem_values, extraction_attack, fid, frechet_distance, greedy_cliques, prompt_fidelity, tile_l2,
    tile_l2_matrix,
)

from oracles import all_maximal_cliques, naive_tile_l2, toy_params

SCHED = build_schedule(3, 1e-3, 0.2)
finite = st.floats(-5, 5, allow_nan=False, allow_subnormal=False)


def test_objectives_validation():
    with pytest.raises(ValueError):
        Objectives(-1.0, 0.0)
    with pytest.raises(ValueError):
        Objectives(float("nan"), 0.0)


# ---------------------------------------------------------------- cosine / amd


def test_cosine_distance_cases():
    a = np.array([1.0, 2.0, -0.5])
    assert cosine_distance(a, a) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1, 0], [0, 3]) == pytest.approx(1.0)
    assert cosine_distance(a, -a) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        cosine_distance([0, 0], [1, 0])


def test_amd_cases():
    x = np.random.default_rng(0).standard_normal((10, 6))
    assert amd(x[:4], x) == pytest.approx(0.0, abs=1e-12)
    assert amd(x, x) == pytest.approx(0.0, abs=1e-12)
    assert amd([[0, 0, 1.0]], [[1.0, 0, 0], [0, 2.0, 0]]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        amd(np.zeros((0, 3)), x[:, :3])


def test_amd_double_loop_oracle():
    rng = np.random.default_rng(1)
    g, t = rng.standard_normal((20, 7)), rng.standard_normal((30, 7))
    total = 0.0
    for a in g:
        best = 2.0
        for b in t:
            best = min(best, 1.0 - float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)))
        total += best
    assert amd(g, t) == pytest.approx(total / 20, abs=1e-12)


@given(arrays(np.float64, (4, 3), elements=st.floats(0.1, 3)), arrays(np.float64, (5, 3), elements=st.floats(0.1, 3)),
       arrays(np.float64, (2, 3), elements=st.floats(0.1, 3)))
def test_amd_adding_candidates_never_increases(x, y, z):
    assert amd(x, np.vstack([y, z])) <= amd(x, y) + 1e-12


# ---------------------------------------------------------------- d_mem


def test_d_mem_zero_for_blind_model():
    p = toy_params()
    p.base["prompt.W"][:] = 0
    ref = np.random.default_rng(0).uniform(-1, 1, 4)
    assert d_mem(base_view(p), np.ones(3), ref, SCHED, 0) == 0.0


def test_d_mem_zero_for_empty_prompt():
    p = toy_params()
    assert d_mem(base_view(p), np.zeros(3), np.zeros(4), SCHED, 0) == 0.0


def test_d_mem_brute_force():
    p = toy_params()
    model = base_view(p)
    emb, ref = np.array([0.3, -1.0, 2.0]), np.array([0.1, 0.2, -0.3, 0.4])
    draws = 3
    eps = np.random.default_rng(9).standard_normal((draws, SCHED.T, 4))
    total = 0.0
    for d in range(draws):
        for k in range(SCHED.T):
            x = np.sqrt(SCHED.alphas_bar[k]) * ref + np.sqrt(1 - SCHED.alphas_bar[k]) * eps[d, k]
            diff = model(x[None], k, emb) - model(x[None], k, np.zeros(3))
            total += np.linalg.norm(diff)
    assert d_mem(model, emb, ref, SCHED, 9, draws) == pytest.approx(total / (draws * SCHED.T), rel=1e-12)
    both = d_mem_values(model, np.stack([emb, emb]), np.stack([ref, ref]), SCHED, 9, draws)
    assert both[0] == both[1]


# ---------------------------------------------------------------- fréchet


def test_frechet_identical_and_shift():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 5))
    cov = a @ a.T
    mu = rng.standard_normal(5)
    assert frechet_distance(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-9)
    v = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
    assert frechet_distance(mu, np.eye(5), mu + v, np.eye(5)) == pytest.approx(v @ v, abs=1e-9)


def test_frechet_diagonal_analytic():
    a, b = np.array([0.5, 2.0, 3.0, 1e-3]), np.array([1.5, 0.25, 3.0, 4.0])
    expected = np.sum(a + b - 2 * np.sqrt(a * b))
    assert frechet_distance(np.zeros(4), np.diag(a), np.zeros(4), np.diag(b)) == pytest.approx(expected, abs=1e-9)


def _mp_frechet(mu1, c1, mu2, c2):
    mpmath.mp.dps = 40
    m1, m2 = mpmath.matrix(c1.tolist()), mpmath.matrix(c2.tolist())
    root = mpmath.sqrtm(m1 * m2)
    tr = sum(root[i, i] for i in range(len(mu1)))
    diff = mu1 - mu2
    value = float(diff @ diff) + sum(c1[i, i] + c2[i, i] for i in range(len(mu1))) - 2 * mpmath.re(tr)
    return float(value)


def test_frechet_against_high_precision_oracle():
    rng = np.random.default_rng(5)
    for _ in range(3):
        a, b = rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
        c1, c2 = a @ a.T + 0.1 * np.eye(6), b @ b.T + 0.1 * np.eye(6)
        mu1, mu2 = rng.standard_normal(6), rng.standard_normal(6)
        assert frechet_distance(mu1, c1, mu2, c2) == pytest.approx(_mp_frechet(mu1, c1, mu2, c2), rel=1e-9, abs=1e-9)


def test_frechet_errors():
    with pytest.raises(MatrixError):
        frechet_distance(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2), np.eye(2))
    with pytest.raises(MatrixError):
        frechet_distance(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))
    # tiny negative eigenvalues are clamped
    assert frechet_distance(np.zeros(2), np.diag([1.0, -1e-12]), np.zeros(2), np.diag([1.0, 0.0])) >= 0.0


@given(st.integers(0, 2**31 - 1))
def test_frechet_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    c1, c2, m1, m2 = a @ a.T, b @ b.T, rng.standard_normal(4), rng.standard_normal(4)
    d12, d21 = frechet_distance(m1, c1, m2, c2), frechet_distance(m2, c2, m1, c1)
    assert d12 == pytest.approx(d21, rel=1e-8, abs=1e-8)
    assert d12 > 0


# ---------------------------------------------------------------- fid


def test_fid_same_set():
    x = np.random.default_rng(0).standard_normal((50, 8))
    assert fid(x, x, FeatureMap("identity")) <= 1e-9
    assert fid(x, x, FeatureMap("random_projection", 4, 1)) <= 1e-9


def test_fid_gaussian_shift():
    rng = np.random.default_rng(1)
    shift = np.array([0.5, -1.0, 0.25, 0.0])
    a, b = rng.standard_normal((5000, 4)), rng.standard_normal((5000, 4)) + shift
    assert fid(a, b, FeatureMap("identity")) == pytest.approx(shift @ shift, rel=0.1)


def test_fid_isometry_invariance():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((40, 6)), rng.standard_normal((40, 6)) * 1.5 + 0.3
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    ident = fid(a, b, FeatureMap("identity"))
    assert fid(a, b, FeatureMap("random_projection", 6, 0, matrix=q)) == pytest.approx(ident, abs=1e-9)
    assert fid(a, b, FeatureMap("random_projection", 6, 3)) == pytest.approx(ident, abs=1e-9)


def test_fid_needs_two_samples():
    with pytest.raises(ValueError):
        fid(np.zeros((1, 3)), np.zeros((4, 3)), FeatureMap("identity"))


# ---------------------------------------------------------------- tiles


def test_tile_l2_cases():
    a = np.random.default_rng(0).standard_normal(64)
    assert tile_l2(a, a, (8, 8), 4) == 0.0
    b = a.copy()
    v = np.arange(16, dtype=float) / 10
    b.reshape(8, 8)[4:8, 0:4] += v.reshape(4, 4)
    assert tile_l2(a, b, (8, 8), 4) == pytest.approx(np.linalg.norm(v))
    with pytest.raises(ValueError):
        tile_l2(a, b, (8, 8), 3)


@given(arrays(np.float64, 64, elements=finite), arrays(np.float64, 64, elements=finite), st.sampled_from([1, 2, 4, 8]))
def test_tile_l2_matches_naive(a, b, tile):
    assert tile_l2(a, b, (8, 8), tile) == pytest.approx(naive_tile_l2(a, b, 8, 8, tile), rel=1e-12, abs=1e-12)


def test_tile_matrix_consistent():
    x = np.random.default_rng(3).standard_normal((5, 16))
    m = tile_l2_matrix(x, (4, 4), 2)
    for i in range(5):
        for j in range(5):
            assert m[i, j] == pytest.approx(tile_l2(x[i], x[j], (4, 4), 2))


def test_calibrate_delta_percentile():
    x = np.random.default_rng(4).standard_normal((30, 16))
    d = calibrate_delta(x, (4, 4), 2, 50.0, n_pairs=20000, seed=1)
    m = tile_l2_matrix(x, (4, 4), 2)
    off = m[~np.eye(30, dtype=bool)]
    assert abs(d - np.median(off)) < 0.05 * np.median(off)


# ---------------------------------------------------------------- cliques / attack


def test_planted_clique_matches_exhaustive():
    adj = np.zeros((6, 6), dtype=bool)
    for a, b in [(1, 3), (1, 4), (3, 4), (0, 2), (2, 5)]:
        adj[a, b] = adj[b, a] = True
    found = greedy_cliques(adj, 3)
    assert found == [[1, 3, 4]]
    assert [c for c in all_maximal_cliques(adj) if len(c) >= 3] == found


@given(st.integers(2, 12), st.floats(0.1, 0.9), st.integers(0, 2**31 - 1), st.integers(2, 4))
def test_greedy_cliques_are_cliques(n, density, seed, k):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < density, 1)
    adj = upper | upper.T
    cliques = greedy_cliques(adj, k)
    seen = set()
    for c in cliques:
        assert len(c) >= k
        assert all(adj[a, b] for a in c for b in c if a != b)
        assert seen.isdisjoint(c)
        seen.update(c)
        # each reported clique is contained in some true maximal clique
        assert any(set(c) <= set(m) for m in all_maximal_cliques(adj))


def test_constant_model_extracts_everything():
    sched = build_schedule(1, 0.5, 0.5)

    # predicts exactly the noise that maps every x_T onto the constant image 0.3
    class Const:
        def __call__(self, x, k, emb):
            ab = sched.alphas_bar[k]
            return (x - np.sqrt(ab) * 0.3) / np.sqrt(1 - ab)

    rep = extraction_attack(Const(), np.eye(3), 8, 0.01, 3, 0, sched, (4, 4), 2)
    assert rep.extracted_count == 3
    assert sorted(len(c) for c in rep.cliques) == [8, 8, 8]
    rep.validate((4, 4), 2)


def test_noise_generator_extracts_nothing():
    rng = np.random.default_rng(0)
    counts = []
    for trial in range(20):
        images = rng.uniform(-1, 1, (5 * 16, 64))
        rep = attack_images(images, 5, 16, (8, 8), 4, 0.5, 3)
        counts.append(rep.extracted_count)
    assert sum(counts) == 0


def test_report_round_trip_and_validation():
    images = np.zeros((8, 16))
    images[4:] = np.random.default_rng(0).uniform(-1, 1, (4, 16)) * 3
    rep = attack_images(images, 2, 4, (4, 4), 2, 0.1, 2)
    assert rep.extracted_prompts() == [0]
    back = AttackReport.from_dict(rep.to_dict())
    assert back.cliques == rep.cliques and back.extracted_count == 1
    back.validate((4, 4), 2)
    bad = AttackReport.from_dict(rep.to_dict())
    bad.images[bad.cliques[0][0]] += 5.0
    with pytest.raises(AssertionError):
        bad.validate((4, 4), 2)


# ---------------------------------------------------------------- fidelity


def test_prompt_fidelity_cases():
    t = np.random.default_rng(0).standard_normal((8, 16))
    ids = np.arange(8)
    assert prompt_fidelity(t, ids, t) == 1.0
    assert prompt_fidelity(t, (ids + 1) % 8, t) == 0.0


def test_prompt_fidelity_chance_level():
    rng = np.random.default_rng(1)
    t = rng.standard_normal((8, 16))
    g = rng.standard_normal((2000, 16))
    ids = rng.integers(8, size=2000)
    p = prompt_fidelity(g, ids, t)
    se = np.sqrt((1 / 8) * (7 / 8) / 2000)
    assert abs(p - 1 / 8) < 3 * se

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidifac.grid import LinkedMatrixGrid
from bidifac.linalg import SvdTriple
from bidifac.penalty import ModuleSpec
from bidifac.simulation import (
    EQ11_R,
    ImputationTable,
    SimConfig,
    align_modules,
    class_rse,
    factor_variance,
    holdout_mask,
    imputation_experiment,
    rng_for,
    rosr,
    rse_per_module,
    rse_values,
    simulate_bidirectional,
    simulate_vertical,
    sparse_design,
    specs_match,
    synthetic_reference,
)
from bidifac.solver import ModuleEstimate


def scaled(mods, c):
    return [ModuleEstimate(m.spec, SvdTriple(m.factors.U, c * m.factors.D, m.factors.V), m.M, m.N) for m in mods]


def test_eq11_design():
    want = np.array([[1, 1, 1, 0, 1, 0, 0], [1, 1, 0, 1, 0, 1, 0], [1, 0, 1, 1, 0, 0, 1]])
    assert np.array_equal(EQ11_R, want)
    cfg = SimConfig.eq11()
    assert cfg.K == 7 and [s.r_incl for s in cfg.specs] == [tuple(c) for c in want.T]


def test_sparse_design():
    R = sparse_design(10)
    for k in range(10):
        assert R[:, k].tolist() == [1] * (k + 1) + [0] * (9 - k)
    g, truth = simulate_vertical(SimConfig.sparse10(block=5, n=6))
    assert len(truth) == 10 and g.I == 10


def test_factor_variance():
    assert factor_variance(0.5) == pytest.approx(np.sqrt(0.5))
    assert factor_variance(1) == 1
    assert factor_variance(10) == pytest.approx(np.sqrt(10))


def test_rank_one_signal_moment():
    norms = []
    for rep in range(40):
        _, truth = simulate_vertical(SimConfig.eq11(s2n=1, seed=5), rep)
        norms += [t.frob2 for t in truth[4:]]  # the three 100 x 100 individual modules
    assert np.mean(norms) == pytest.approx(100 * 100, rel=0.15)


def test_config_validation():
    with pytest.raises(ValueError, match="rank"):
        SimConfig((3, 3), (2,), np.ones((2, 1)), ranks=3)
    with pytest.raises(ValueError, match="rows"):
        SimConfig((3, 3), (2,), np.ones((3, 1)))
    with pytest.raises(ValueError, match="one rank"):
        SimConfig((3, 3), (2,), np.ones((2, 2)), ranks=[1])


def test_generators_are_seed_deterministic():
    a, ta = simulate_vertical(SimConfig.eq11(seed=3, block=20, n=10), rep=2)
    b, tb = simulate_vertical(SimConfig.eq11(seed=3, block=20, n=10), rep=2)
    c, _ = simulate_vertical(SimConfig.eq11(seed=3, block=20, n=10), rep=3)
    assert np.array_equal(a.data, b.data) and not np.array_equal(a.data, c.data)
    assert np.array_equal(ta[0].expand(), tb[0].expand())
    assert rng_for(1, 2).random() == rng_for(1, 2).random()


def test_noise_has_unit_variance():
    cfg = SimConfig.eq11(s2n=1, seed=0)
    g, truth = simulate_vertical(cfg)
    E = g.data - sum(t.expand() for t in truth)
    assert np.std(E) == pytest.approx(1, abs=0.01)


def test_synthetic_reference_shape():
    ref = synthetic_reference(seed=1)
    assert len(ref) == 20 and len({m.spec.key for m in ref}) == 20
    assert all(1 <= m.rank <= 3 for m in ref)
    assert ref[0].M == (60,) * 4 and ref[0].N == (60,) * 6
    with pytest.raises(ValueError):
        synthetic_reference(I=1, J=1, K=2)


@pytest.mark.parametrize("target", [0.2, 0.5, 5.0])
def test_bidirectional_hits_target(target):
    ref = synthetic_reference(seed=2, block=20)
    g, truth, alpha = simulate_bidirectional(ref, s2n=target, seed=4)
    signal = sum(t.expand() for t in truth)
    ratio = np.var(signal) / np.var(g.data - signal)
    assert 0.99 * target <= ratio <= 1.01 * target


def test_bidirectional_alpha_homogeneity():
    ref = synthetic_reference(seed=3, block=15)
    g0, t0, _ = simulate_bidirectional(ref, alpha=0.0, seed=1)
    g1, t1, _ = simulate_bidirectional(ref, alpha=1.5, seed=1)
    g2, t2, _ = simulate_bidirectional(ref, alpha=3.0, seed=1)
    noise = g0.data
    assert np.allclose(noise, g1.data - sum(t.expand() for t in t1))
    v1 = np.var(g1.data - noise)
    v2 = np.var(g2.data - noise)
    assert v2 == pytest.approx(4 * v1, rel=1e-12)
    assert sum(t.frob2 for t in t0) == 0


def test_bidirectional_errors():
    ref = synthetic_reference(seed=3, block=5)
    with pytest.raises(ValueError):
        simulate_bidirectional(ref)
    with pytest.raises(ValueError):
        simulate_bidirectional([])
    zero = [ModuleEstimate.zero(m.spec, m.M, m.N) for m in ref]
    with pytest.raises(ValueError, match="zero"):
        simulate_bidirectional(zero, s2n=1.0)


def test_rse_trivial_values():
    _, truth = simulate_vertical(SimConfig.eq11(block=10, n=8))
    assert rse_per_module(truth, truth) == 0
    zeros = [ModuleEstimate.zero(t.spec, t.M, t.N) for t in truth]
    assert rse_per_module(truth, zeros) == pytest.approx(1.0)
    assert rosr(truth, truth) == 0
    assert rosr(truth, scaled(truth, 2.0)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rse_values(truth, truth[:3])


@given(st.permutations(range(7)))
@settings(max_examples=20, deadline=None)
def test_rse_permutation_invariant(perm):
    _, truth = simulate_vertical(SimConfig.eq11(block=6, n=5, seed=1))
    _, other = simulate_vertical(SimConfig.eq11(block=6, n=5, seed=2))
    base = rse_per_module(truth, other)
    permuted = rse_per_module([truth[p] for p in perm], [other[p] for p in perm])
    assert permuted == pytest.approx(base, rel=1e-12)
    assert rse_per_module([truth[p] for p in perm], other, "align") == pytest.approx(base, rel=1e-12)


def test_alignment_rules():
    _, truth = simulate_vertical(SimConfig.eq11(block=6, n=5, seed=1))
    small = scaled([truth[0]], 0.1)[0]
    fitted = [small, truth[0], truth[2]]
    got = align_modules(truth, fitted)
    assert got[0] is truth[0] and got[1] is None and got[2] is truth[2]
    vals = rse_values(truth, fitted, "align")
    assert vals[0] == 0 and vals[1] == 1 and vals[2] == 0
    with pytest.raises(ValueError):
        rse_values(truth, fitted, "nearest")


def test_zero_truth_module_excluded():
    _, truth = simulate_vertical(SimConfig.eq11(block=6, n=5))
    truth = list(truth)
    truth[1] = ModuleEstimate.zero(truth[1].spec, truth[1].M, truth[1].N)
    with pytest.warns(UserWarning, match="excluded"):
        vals = rse_values(truth, truth)
    assert np.isnan(vals[1]) and np.nansum(vals) == 0


def test_specs_match():
    _, truth = simulate_vertical(SimConfig.eq11(block=6, n=5))
    extra = ModuleEstimate.zero(ModuleSpec((1, 0, 0), (1,), 1.0), truth[0].M, truth[0].N)
    assert specs_match(truth, list(truth) + [extra])
    assert not specs_match(truth, truth[:-1])


def test_holdout_mask_counts():
    g = LinkedMatrixGrid(np.zeros((20, 30)), (10, 10), (12, 18))
    mask = holdout_mask(g, rows=2, cols=3, entries=5, rng=np.random.default_rng(0))
    cls = mask.classify()
    for i in range(2):
        for j in range(2):
            blk = lambda a: a[g.row_slice(i), g.col_slice(j)]
            assert blk(cls["both"]).sum() == 2 * 3
            assert blk(cls["entry"]).sum() == 5
            assert blk(cls["row"]).sum() == 2 * (g.N[j] - 3)
    with pytest.raises(ValueError, match="exhausts"):
        holdout_mask(g, rows=10)
    with pytest.raises(ValueError, match="cells left"):
        holdout_mask(g, entries=1000)


def test_class_rse_and_table():
    g = LinkedMatrixGrid(np.random.default_rng(0).standard_normal((10, 10)), (5, 5), (5, 5))
    mask = holdout_mask(g, rows=1, cols=1, entries=2, rng=np.random.default_rng(1))
    res = class_rse(g.data, np.zeros_like(g.data), mask)
    assert all(v == pytest.approx(1.0) for v in res.values())
    assert class_rse(g.data, g.data, mask)["entry"] == 0
    table = ImputationTable(["zero"], {"zero": res})
    assert table.format().splitlines()[1].startswith("zero\t1.000")


def test_imputation_experiment_runs():
    cfg = SimConfig((20, 20), (15, 15), np.ones((2, 1)), C=np.ones((2, 1)), s2n=5, seed=0)
    g, _ = simulate_vertical(cfg)
    table = imputation_experiment(g, rows=1, cols=1, entries=10, methods=("bidifac", "soft-separate"))
    sep = table.rse["soft-separate"]
    assert sep["row"] == 1.0 and sep["col"] == 1.0 and sep["both"] == 1.0
    assert table.rse["bidifac"]["row"] < 1.0

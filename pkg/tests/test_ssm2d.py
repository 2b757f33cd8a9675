import numpy as np
import pytest

from laplamba import ops
from laplamba.errors import ContractError, DimensionError
from laplamba.gradcheck import check_gradients, weighted_sum_loss
from laplamba.ssm2d import (VSSM, ScanParams, direction_permutations, expand_4dir, merge_4dir,
                            selective_scan_1d)
from laplamba.tensor import Tensor


def recurrence_oracle(u, A, B, C, delta, Dk):
    """Step-by-step loop over t for an (L, D) sequence."""
    L, D = u.shape
    h = np.zeros((D, A.shape[1]))
    y = np.zeros((L, D))
    for t in range(L):
        for d in range(D):
            for s in range(A.shape[1]):
                h[d, s] = np.exp(delta[t, d] * A[d, s]) * h[d, s] + delta[t, d] * B[t, s] * u[t, d]
            y[t, d] = sum(C[t, s] * h[d, s] for s in range(A.shape[1])) + Dk[d] * u[t, d]
    return y


def random_case(rng, L, D, ns):
    return dict(
        u=rng.standard_normal((L, D)),
        A=-rng.uniform(0.1, 3.0, (D, ns)),
        B=rng.standard_normal((L, ns)),
        C=rng.standard_normal((L, ns)),
        delta=rng.uniform(0.01, 1.0, (L, D)),
        Dk=rng.standard_normal(D),
    )


def run(case, requires_grad=False):
    t = {k: Tensor(v, requires_grad=requires_grad) for k, v in case.items()}
    p = ScanParams(t["A"], t["B"], t["C"], t["delta"], t["Dk"])
    return selective_scan_1d(t["u"], p), t


def test_matches_recurrence_oracle():
    case = random_case(np.random.default_rng(0), 16, 4, 8)
    y, _ = run(case)
    assert np.max(np.abs(y.data - recurrence_oracle(**case))) <= 1e-10


def test_single_step_closed_form():
    case = random_case(np.random.default_rng(1), 1, 3, 5)
    y, _ = run(case)
    ref = (case["C"][0] @ case["B"][0]) * case["delta"][0] * case["u"][0] + case["Dk"] * case["u"][0]
    np.testing.assert_allclose(y.data[0], ref, rtol=1e-14)


def test_zero_input_and_linearity():
    rng = np.random.default_rng(2)
    case = random_case(rng, 12, 3, 4)
    zero = dict(case, u=np.zeros_like(case["u"]))
    np.testing.assert_array_equal(run(zero)[0].data, 0.0)
    scaled = dict(case, u=2.5 * case["u"])
    np.testing.assert_allclose(run(scaled)[0].data, 2.5 * run(case)[0].data, rtol=1e-12, atol=1e-14)


def test_state_decays_when_input_stops():
    rng = np.random.default_rng(3)
    case = random_case(rng, 40, 2, 4)
    case["u"][1:] = 0.0
    case["Dk"][:] = 0.0
    case["C"][:] = 1.0
    # with C = 1 and h >= 0 from a positive pulse the readout shrinks monotonically
    case["u"][0] = np.abs(case["u"][0])
    case["B"][0] = np.abs(case["B"][0])
    mags = run(case)[0].data[:, 0]
    assert np.all(np.diff(mags) <= 0)


def test_contract_and_shape_errors():
    case = random_case(np.random.default_rng(4), 5, 2, 3)
    bad = dict(case, delta=-case["delta"])
    with pytest.raises(ContractError):
        run(bad)
    with pytest.raises(DimensionError):
        run(dict(case, B=case["B"][:, :2]))


def test_scan_gradients():
    case = random_case(np.random.default_rng(5), 9, 3, 4)
    t = {k: Tensor(v, requires_grad=True) for k, v in case.items()}
    p = ScanParams(t["A"], t["B"], t["C"], t["delta"], t["Dk"])
    res = check_gradients(lambda: weighted_sum_loss(selective_scan_1d(t["u"], p)), list(t.items()))
    assert res.passed, res.worst


def test_four_paths_on_2x2():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
    seqs = expand_4dir(x).seqs.data[0, :, 0]
    np.testing.assert_array_equal(seqs, [[1, 2, 3, 4], [4, 3, 2, 1], [1, 3, 2, 4], [4, 2, 3, 1]])


def test_single_pixel_paths():
    seqs = expand_4dir(Tensor(np.full((1, 2, 1, 1), 3.0))).seqs.data
    np.testing.assert_array_equal(seqs, 3.0)


def test_permutations_invert():
    perms = direction_permutations(3, 5)
    grid = np.random.default_rng(6).standard_normal(15)
    for p in perms:
        back = np.empty(15)
        back[p] = grid[p]
        assert sorted(p) == list(range(15))
        assert back.tobytes() == grid.tobytes()


def test_merge_identities():
    x = Tensor(np.random.default_rng(7).standard_normal((2, 3, 3, 5)))
    ds = expand_4dir(x)
    np.testing.assert_allclose(merge_4dir(ds).data, 4 * x.data, rtol=1e-15)
    np.testing.assert_allclose(merge_4dir(ds, "mean").data, x.data, rtol=1e-15)
    only_first = ds.seqs.data.copy()
    only_first[:, 1:] = 0.0
    ds.seqs = Tensor(only_first)
    np.testing.assert_array_equal(merge_4dir(ds).data, x.data)
    ds.seqs = Tensor(np.zeros_like(only_first))
    np.testing.assert_array_equal(merge_4dir(ds).data, 0.0)
    ds.seqs = Tensor(np.zeros((2, 4, 3, 14)))
    with pytest.raises(DimensionError):
        merge_4dir(ds)


def test_vssm_shape_and_zero_input():
    rng = np.random.default_rng(8)
    m = VSSM(rng, 16)
    assert m(Tensor(rng.standard_normal((2, 16, 8, 8)))).shape == (2, 16, 8, 8)
    m.out_proj.bias.data[...] = 0.0
    np.testing.assert_array_equal(m(Tensor(np.zeros((1, 16, 4, 4)))).data, 0.0)
    with pytest.raises(DimensionError):
        m(Tensor(np.zeros((1, 8, 4, 4))))


def test_vssm_input_gradient_of_mean():
    rng = np.random.default_rng(9)
    m = VSSM(rng, 4, nstate=4)
    x = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    res = check_gradients(lambda: ops.mean(m(x)), [("x", x)])
    assert res.passed, res.worst


def test_vssm_expanded_inner_width():
    rng = np.random.default_rng(11)
    m = VSSM(rng, 4, nstate=4, expand=2, merge="mean")
    assert m.inner == 8
    x = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    assert m(x).shape == x.shape
    res = check_gradients(lambda: weighted_sum_loss(m(x)), [("x", x)] + list(m.named_parameters()),
                          max_coords=16)
    assert res.passed, res.worst


def test_vssm_initialization():
    m = VSSM(np.random.default_rng(10), 8, nstate=6)
    A = -np.exp(m.A_log.data)
    np.testing.assert_allclose(A[0, 0], -np.arange(1, 7))
    dt = np.log1p(np.exp(m.dt_bias.data))
    assert dt.min() >= 1e-3 - 1e-12 and dt.max() <= 1e-1 + 1e-12

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from unlearn_audit.audit import compute_feature_stats, hungarian, steer_codes
from unlearn_audit.container import decode, encode
from unlearn_audit.numerics import topk_mask

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def matrix_and_k(draw):
    rows, cols = draw(st.integers(1, 6)), draw(st.integers(1, 12))
    x = draw(arrays(np.float64, (rows, cols), elements=st.integers(-4, 4).map(float) | finite))
    return x, draw(st.integers(0, cols))


@given(matrix_and_k())
def test_topk_keeps_exactly_the_k_largest(case):
    x, k = case
    out = topk_mask(x, k)
    kept = out != 0
    for row, keep_row, out_row in zip(x, kept, out):
        order = np.argsort(-row, kind="stable")[:k]
        mask = np.zeros(len(row), dtype=bool)
        mask[order] = True
        assert np.array_equal(out_row[mask], row[mask])
        assert (out_row[~mask] == 0).all()


@st.composite
def square_costs(draw):
    n = draw(st.integers(1, 9))
    return draw(arrays(np.float64, (n, n), elements=st.floats(-100, 100, allow_nan=False)))


@settings(max_examples=200)
@given(square_costs())
def test_hungarian_is_optimal(cost):
    perm, total = hungarian(cost)
    assert sorted(perm.tolist()) == list(range(len(cost)))
    rows, cols = linear_sum_assignment(cost)
    assert np.isclose(total, cost[rows, cols].sum(), rtol=1e-12, atol=1e-9)


@st.composite
def codes(draw):
    n, m, k = draw(st.integers(1, 40)), draw(st.integers(1, 10)), draw(st.integers(1, 4))
    code = draw(arrays(np.float64, (n, m), elements=st.sampled_from([0.0, 0.0, 0.5, 2.0])))
    labels = draw(arrays(np.int64, n, elements=st.integers(0, k - 1)))
    return code, labels, k


@given(codes())
def test_feature_stats_invariants(case):
    code, labels, k = case
    s = compute_feature_stats(code, labels, k)
    assert (s.co_activation.sum(axis=1) == s.activation_count).all()
    assert s.class_count.sum() == len(labels)
    f1 = s.f1
    assert ((f1 >= 0) & (f1 <= 1)).all()
    # the harmonic mean lies between its two components
    defined = ~np.isnan(s.precision) & ~np.isnan(s.recall)
    assert (f1[defined] >= np.minimum(s.precision, s.recall)[defined] - 1e-12).all()
    assert (f1[defined] <= np.maximum(s.precision, s.recall)[defined] + 1e-12).all()


@st.composite
def steering_case(draw):
    n, m = draw(st.integers(1, 5)), draw(st.integers(1, 10))
    c_orig = draw(arrays(np.float64, (n, m), elements=st.floats(0, 10)))
    c_unl = draw(arrays(np.float64, (n, m), elements=st.floats(0, 10)))
    perm = np.array(draw(st.permutations(range(m))))
    experts = draw(st.lists(st.integers(0, m - 1), unique=True, max_size=m))
    alpha = draw(st.floats(-20, 20))
    return c_orig, c_unl, experts, perm, alpha


@given(steering_case())
def test_steering_touches_only_mapped_experts(case):
    c_orig, c_unl, experts, perm, alpha = case
    out = steer_codes(c_orig, c_unl, experts, perm, alpha)
    outside = np.setdiff1d(np.arange(c_unl.shape[1]), perm[np.array(experts, dtype=int)])
    assert np.array_equal(out[:, outside], c_unl[:, outside])
    assert np.array_equal(steer_codes(c_orig, c_unl, experts, perm, 0.0), c_unl)


@given(
    arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(0, 4)), elements=finite),
    arrays(np.int64, st.integers(0, 6), elements=st.integers(-5, 5)),
    st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=3),
)
def test_container_round_trip(a, b, meta):
    kind, meta_back, arrays_back = decode(encode("probe", meta, {"a": a, "b": b}))
    assert kind == "probe" and meta_back == meta
    assert np.array_equal(arrays_back["a"], a) and arrays_back["a"].dtype == np.float64
    assert np.array_equal(arrays_back["b"], b)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opselect.fingerprints import (
    ActionFingerprint,
    ActionKind,
    DistanceMatrix,
    KernelParams,
    ProbeStateSet,
    action_distance,
    distance_matrix,
    kernel_matrix,
    load_fingerprints,
    normalize_fingerprints,
    policy_distance,
    read_distance_csv,
    save_fingerprints,
    stabilize,
    subsample_probe_states,
    write_distance_csv,
)

from oracles import pairwise_fingerprint_distance


def _random_fingerprints(rng, k, states=6, dim=3, kind=ActionKind.CONTINUOUS):
    out = []
    for i in range(k):
        if kind is ActionKind.CONTINUOUS:
            a = rng.normal(size=(states, dim))
        else:
            a = rng.integers(0, 4, size=(states, dim)).astype(float)
        out.append(ActionFingerprint(i, a, kind))
    return out


def test_action_distance_continuous_is_euclidean():
    a = np.array([1.0, 2.0, 2.0])
    b = np.array([1.0, 0.0, 2.0])
    assert action_distance(a, b, ActionKind.CONTINUOUS) == pytest.approx(2.0)


def test_action_distance_discrete_counts_mismatches():
    a = np.array([0.0, 1.0, 2.0, 3.0])
    b = np.array([0.0, 1.0, 0.0, 0.0])
    assert action_distance(a, b, ActionKind.DISCRETE) == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([ActionKind.CONTINUOUS, ActionKind.DISCRETE]))
def test_policy_distance_matches_naive_loop(seed, kind):
    rng = np.random.default_rng(seed)
    fa, fb = _random_fingerprints(rng, 2, states=5, dim=2, kind=kind)
    want = pairwise_fingerprint_distance(fa.actions, fb.actions, kind.value)
    assert policy_distance(fa, fb) == pytest.approx(want, abs=1e-12)


def test_distance_matrix_agrees_with_pairwise_calls():
    rng = np.random.default_rng(3)
    fps = _random_fingerprints(rng, 7)
    dm = distance_matrix(fps)
    assert dm.values.shape == (7, 7)
    assert np.all(np.diag(dm.values) == 0.0)
    assert np.array_equal(dm.values, dm.values.T)
    for i in range(7):
        for j in range(7):
            assert dm.values[i, j] == pytest.approx(policy_distance(fps[i], fps[j]), abs=1e-12)


def test_submatrix_is_bitwise_stable():
    # selecting a subset must reproduce exactly what recomputing from the
    # subset's fingerprints gives, or paired subsampling experiments drift
    rng = np.random.default_rng(11)
    fps = _random_fingerprints(rng, 12)
    dm = distance_matrix(fps)
    rows = np.array([0, 3, 4, 9, 11])
    sub = dm.submatrix(rows)
    redo = distance_matrix([fps[i] for i in rows])
    assert np.array_equal(sub.values, redo.values)
    assert sub.policy_ids == redo.policy_ids


def test_distance_matrix_rejects_mixed_kinds():
    rng = np.random.default_rng(0)
    a = _random_fingerprints(rng, 1, kind=ActionKind.CONTINUOUS)[0]
    b = ActionFingerprint(1, np.zeros((6, 3)), ActionKind.DISCRETE)
    with pytest.raises(ValueError, match="kind"):
        distance_matrix([a, b])


def test_kernel_matrix_formula():
    d = np.array([[0.0, 2.0], [2.0, 0.0]])
    p = KernelParams(variance=1.5, constant_variance=0.25, length_scale=4.0)
    k = kernel_matrix(d, p)
    assert k[0, 0] == 1.75  # exact on the diagonal
    assert k[0, 1] == pytest.approx(1.5 * np.exp(-0.5) + 0.25)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 10_000),
    st.integers(2, 24),
    st.sampled_from([ActionKind.CONTINUOUS, ActionKind.DISCRETE]),
    st.floats(0.05, 20.0),
)
def test_kernel_matrix_is_psd(seed, k, kind, length_scale):
    rng = np.random.default_rng(seed)
    fps = _random_fingerprints(rng, k, states=4, dim=2, kind=kind)
    dm = distance_matrix(fps)
    cov = kernel_matrix(dm, KernelParams(1.0, 0.25, length_scale))
    eigs = np.linalg.eigvalsh(cov)
    assert eigs.min() >= -1e-8 * np.trace(cov)


def test_stabilize_adds_relative_jitter():
    cov = np.diag([2.0, 4.0])
    out = stabilize(cov)
    assert out[0, 0] == pytest.approx(2.0 + 1e-8 * 3.0)
    assert out[0, 1] == 0.0


def test_subsample_probe_states():
    rng = np.random.default_rng(5)
    ps = subsample_probe_states(100, 10, rng)
    assert ps.count == 10
    assert ps.dataset_size == 100
    assert len(set(ps.indices.tolist())) == 10
    with pytest.raises(ValueError):
        subsample_probe_states(5, 6, rng)


def test_normalize_fingerprints_unit_variance():
    rng = np.random.default_rng(8)
    fps = _random_fingerprints(rng, 5, states=20, dim=3)
    normed = normalize_fingerprints(fps)
    stack = np.stack([f.actions for f in normed]).reshape(-1, 3)
    assert np.allclose(stack.std(axis=0), 1.0)


def test_normalize_leaves_constant_dimension_alone():
    a = ActionFingerprint(0, np.column_stack([np.ones(4), np.arange(4.0)]))
    b = ActionFingerprint(1, np.column_stack([np.ones(4), np.arange(4.0) * 2]))
    out = normalize_fingerprints([a, b])
    assert np.all(out[0].actions[:, 0] == 1.0)


def test_normalize_discrete_is_identity():
    fps = [ActionFingerprint(0, np.ones((3, 1)), ActionKind.DISCRETE)]
    assert normalize_fingerprints(fps)[0] is fps[0]


def test_fingerprint_validation():
    with pytest.raises(ValueError, match="2-d"):
        ActionFingerprint(0, np.zeros(4))
    with pytest.raises(ValueError, match="non-finite"):
        ActionFingerprint(0, np.array([[np.nan]]))


def test_kernel_params_validation():
    with pytest.raises(ValueError):
        KernelParams(variance=0.0)
    with pytest.raises(ValueError):
        KernelParams(length_scale=-1.0)


def test_probe_state_set_validation():
    with pytest.raises(ValueError, match="distinct"):
        ProbeStateSet(np.array([1, 1]), 10)
    with pytest.raises(ValueError, match="range"):
        ProbeStateSet(np.array([10]), 10)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    fps = _random_fingerprints(rng, 4)
    path = tmp_path / "fp.json"
    save_fingerprints(path, fps)
    back = load_fingerprints(path)
    assert len(back) == 4
    for orig, c in zip(fps, back):
        assert c.policy_id == orig.policy_id
        assert c.kind is orig.kind
        assert np.array_equal(c.actions, orig.actions)


def test_load_rejects_malformed(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ValueError, match="malformed"):
        load_fingerprints(p)
    p.write_text('{"action_kind": "continuous"}')
    with pytest.raises(ValueError, match="missing field"):
        load_fingerprints(p)
    p.write_text(
        '{"action_kind": "continuous", "num_probe_states": 2, "action_dim": 1,'
        ' "policies": [{"id": 0, "actions": [[1.0]]}]}'
    )
    with pytest.raises(ValueError, match="shape"):
        load_fingerprints(p)


def test_distance_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    dm = distance_matrix(_random_fingerprints(rng, 5))
    path = tmp_path / "d.csv"
    write_distance_csv(path, dm)
    back = read_distance_csv(path)
    assert back.policy_ids == dm.policy_ids
    assert np.array_equal(back.values, dm.values)  # repr round-trips exactly

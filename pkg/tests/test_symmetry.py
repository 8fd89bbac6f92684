import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from penguin import envs as E
from penguin.graph import DECOY, LANDMARK, SELF, TEAMMATE, GraphState, random_graph
from penguin.layers import PenguinNetwork
from penguin.symmetry import (
    GroupElement,
    apply_action,
    approximate_equivariance_check,
    equivariance_error,
    featurewise_equivariance_check,
    grid_points,
    probe_graph,
    random_orthogonal,
    read_grid_csv,
    regional_equivariance_map,
    subgroup_equivariance_check,
    write_grid_csv,
)

seeds = st.integers(0, 2**32 - 1)


def net_fn(net):
    from penguin.graph import GraphBatch

    def f(g):
        out = net.forward(GraphBatch.stack([g]))
        return out.policy_mean.data, out.value.data

    return f


# group elements ----------------------------------------------------------------------
def test_o1_elements():
    seen = {float(random_orthogonal(1, s).Q[0, 0]) for s in range(40)}
    assert seen == {1.0, -1.0}


def test_orthogonality_over_1000_samples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        Q = random_orthogonal(n, rng).Q
        assert np.max(np.abs(Q.T @ Q - np.eye(n))) < 1e-10
        assert abs(abs(np.linalg.det(Q)) - 1.0) < 1e-10


def test_reflections_appear_about_half_the_time():
    rng = np.random.default_rng(1)
    dets = np.array([random_orthogonal(3, rng).det for _ in range(2000)])
    assert 0.45 < np.mean(dets < 0) < 0.55
    assert all(random_orthogonal(3, rng, reflections=False).det > 0 for _ in range(200))


def test_haar_first_column_is_uniform_on_the_circle():
    rng = np.random.default_rng(2)
    angles = np.array([np.arctan2(*random_orthogonal(2, rng).Q[::-1, 0]) for _ in range(4000)])
    hist, _ = np.histogram(angles, bins=8, range=(-np.pi, np.pi))
    assert hist.min() > 400 and hist.max() < 600


def test_non_orthogonal_rejected():
    with pytest.raises(ValueError):
        GroupElement(np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        random_orthogonal(0)


# apply_action ----------------------------------------------------------------------------
def test_identity_action():
    g = random_graph(4, 3, 2, np.random.default_rng(0), velocity=True)
    out = apply_action(GroupElement.identity(2), g)
    assert np.array_equal(out.u, g.u) and np.array_equal(out.v, g.v) and np.array_equal(out.h, g.h)


def test_quarter_turn():
    g = GraphState(np.zeros((1, 1)), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(apply_action(GroupElement.rotation(np.pi / 2), g).u, [[0.0, 1.0]], atol=1e-16)


@settings(max_examples=50, deadline=None)
@given(seed=seeds, n=st.integers(1, 4))
def test_action_then_inverse(seed, n):
    rng = np.random.default_rng(seed)
    g = random_graph(5, 2, n, rng, velocity=True)
    e = GroupElement(random_orthogonal(n, rng).Q, rng.normal(size=n))
    back = apply_action(e.inverse(), apply_action(e, g))
    assert np.max(np.abs(back.u - g.u)) < 1e-12
    assert np.max(np.abs(back.v - g.v)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=seeds, n=st.integers(1, 4))
def test_action_is_an_isometry(seed, n):
    rng = np.random.default_rng(seed)
    g = random_graph(6, 3, n, rng)
    e = GroupElement(random_orthogonal(n, rng).Q, rng.normal(size=n))
    out = apply_action(e, g)
    d0 = np.linalg.norm(g.u[:, None] - g.u[None], axis=-1)
    d1 = np.linalg.norm(out.u[:, None] - out.u[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) < 1e-12
    assert np.array_equal(out.h, g.h)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        apply_action(GroupElement.identity(3), random_graph(3, 1, 2))


# equivariance_error ------------------------------------------------------------------------
def test_identity_map_has_zero_error():
    rng = np.random.default_rng(0)
    g = random_graph(4, 2, 2, rng)
    assert equivariance_error(lambda s: (s.u, s.h), GroupElement.identity(2), g) == 0.0
    assert equivariance_error(lambda s: (s.u, s.h), random_orthogonal(2, rng), g) < 1e-15


def test_constant_offset_closed_form():
    c = np.array([0.3, 0.0])
    g = GraphState(np.zeros((1, 1)), np.array([[0.4, -0.2]]))
    q = GroupElement.rotation(1.1)
    f = lambda s: (s.u + c, np.zeros(1))
    assert equivariance_error(f, q, g) == pytest.approx(np.linalg.norm(q.Q @ c - c), abs=1e-15)


def test_e2gn2_network_error_is_tiny():
    net = PenguinNetwork(3, 2, "e2gn2", seed=0)
    rng = np.random.default_rng(1)
    g = random_graph(4, 3, 2, rng, velocity=True)
    for _ in range(20):
        assert equivariance_error(net_fn(net), random_orthogonal(2, rng), g) < 1e-8


# checks ---------------------------------------------------------------------------------
def chiral(g: GraphState):
    """Rotation equivariant, flips under reflections: J u with J a quarter turn."""
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    return g.u @ J.T, np.zeros(1)


def test_subgroup_identity_passes():
    g = random_graph(3, 1, 2, np.random.default_rng(0))
    report = subgroup_equivariance_check(lambda s: (s.u ** 2, s.h), [GroupElement.identity(2)], [g])
    assert report.max == 0.0 and report.verdict == "equivariant"


def test_subgroup_rotations_vs_full_group():
    rng = np.random.default_rng(3)
    xs = [random_graph(3, 1, 2, rng) for _ in range(5)]
    so2 = [random_orthogonal(2, rng, reflections=False) for _ in range(20)]
    o2 = [random_orthogonal(2, rng) for _ in range(20)]
    assert subgroup_equivariance_check(chiral, so2, xs).equivariant
    assert not approximate_equivariance_check(chiral, o2, xs).equivariant


def test_full_group_on_alpha_one_network():
    net = PenguinNetwork(3, 2, "penguin", "fixed=1", seed=2)
    rng = np.random.default_rng(4)
    xs = [random_graph(4, 3, 2, rng, velocity=True) for _ in range(5)]
    rep = subgroup_equivariance_check(net_fn(net), [random_orthogonal(2, rng) for _ in range(20)], xs)
    assert rep.equivariant and np.all(rep.errors >= 0)


def test_report_summary_and_csv(tmp_path):
    rng = np.random.default_rng(0)
    xs = [random_graph(3, 1, 2, rng) for _ in range(2)]
    rep = approximate_equivariance_check(chiral, [random_orthogonal(2, rng) for _ in range(3)], xs)
    s = rep.summary()
    assert s["samples"] == 6 and s["max_error"] == rep.max
    rep.write_csv(tmp_path / "e.csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "group_index,sample_index,error" and len(rows) == 7


def test_featurewise_full_mask_reduces_to_plain_error():
    net = PenguinNetwork(3, 2, "gnn", seed=0)
    rng = np.random.default_rng(5)
    xs = [random_graph(4, 3, 2, rng, velocity=True)]
    group = [random_orthogonal(2, rng) for _ in range(5)]
    full = featurewise_equivariance_check(net_fn(net), np.ones(4, bool), group, xs)
    plain = approximate_equivariance_check(net_fn(net), group, xs)
    np.testing.assert_array_equal(full.errors, plain.errors)


def test_featurewise_identity_and_empty_mask():
    g = random_graph(3, 1, 2, np.random.default_rng(0))
    rep = featurewise_equivariance_check(chiral, np.array([True, False, False]), [GroupElement.identity(2)], [g])
    assert rep.max == 0.0
    with pytest.raises(ValueError):
        featurewise_equivariance_check(chiral, np.zeros(3, bool), [GroupElement.identity(2)], [g])


def test_featurewise_isolates_the_decoy_pathway():
    """An equivariant network sees a defect only when the static decoy is held fixed."""
    net = PenguinNetwork(E.NUM_FEATURES, 2, "penguin", "fixed=1", seed=1)
    rng = np.random.default_rng(6)
    cfg = E.ScenarioConfig("tag", "decoy")
    xs = [E.observe(E.reset(cfg, rng), 0) for _ in range(4)]
    group = [random_orthogonal(2, rng) for _ in range(10)]
    f = net_fn(net)
    full = featurewise_equivariance_check(f, lambda g: np.ones(g.num_nodes, bool), group, xs)
    agents_only = featurewise_equivariance_check(f, lambda g: g.node_type != DECOY, group, xs)
    assert full.max < 1e-8
    assert agents_only.max > 1e-6


# regional ------------------------------------------------------------------------------------
ROLES = np.array([SELF, TEAMMATE, LANDMARK])


def test_grid_is_row_major_2500_cells(tmp_path):
    xs, ys = grid_points()
    assert len(xs) == 2500
    assert xs[0] == -1.5 and ys[0] == -1.5 and xs[1] > xs[0] and ys[1] == ys[0]
    write_grid_csv(tmp_path / "g.csv", xs, ys, np.zeros(2500))
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "x,y,value"
    x2, y2, v2 = read_grid_csv(tmp_path / "g.csv")
    assert np.array_equal(x2, xs) and np.array_equal(y2, ys) and len(v2) == 2500


def test_regional_map_of_equivariant_function_is_zero():
    net = PenguinNetwork(3, 2, "e2gn2", seed=0)
    rng = np.random.default_rng(0)
    xs, ys = grid_points(resolution=5)
    states = [probe_graph((x, y), np.ones(3), node_type=ROLES) for x, y in zip(xs, ys)]
    eps = regional_equivariance_map(net_fn(net), states, [random_orthogonal(2, rng) for _ in range(4)])
    assert eps.shape == (25,) and eps.max() < 1e-8


def test_regional_map_of_hand_alpha_network_is_region_dependent():
    net = PenguinNetwork(3, 2, "penguin", "hand", seed=3)
    rng = np.random.default_rng(1)
    xs, ys = grid_points(resolution=10)
    # a tight probe so whole graphs sit inside or outside the quadrant
    offsets = np.array([[0.0, 0.0], [0.05, 0.02], [-0.03, 0.04]])
    states = [probe_graph((x, y), np.ones(3), offsets, ROLES) for x, y in zip(xs, ys)]
    group = [GroupElement.identity(2)] + [GroupElement(np.diag([-1.0, 1.0]))]
    eps = regional_equivariance_map(net_fn(net), states, group)
    inside = (xs > 0.1) & (ys > 0.1)
    assert eps[inside].mean() > eps[~inside].mean()

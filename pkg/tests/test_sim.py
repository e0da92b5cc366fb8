import numpy as np
import pytest

from drape.diagnostics import Diagnostics
from drape.mesh import MeshError, TriMesh
from drape.scenes import grid, icosphere, quad
from drape.sim import (BEND, STRETCH, CollisionBody, SimParams, SimState, SimulationError,
                       build_constraints, initial_state, resolve_collisions, scale_rest_lengths,
                       simulate_sequence, step)

import simcases as sc
from oracles import convex_signed_distance


def ground(size=5.0):
    return quad([[-size, -size, 0], [size, -size, 0], [size, size, 0], [-size, size, 0]])


def test_free_fall_velocity():
    v = sc.free_fall_velocity()
    assert abs(v[2] + 0.98) < 1e-9 and v[0] == 0 and v[1] == 0


def test_symmetric_projection():
    before, after = sc.symmetric_projection(0.3)
    np.testing.assert_allclose(after - before, [[0.15, 0, 0], [-0.15, 0, 0]], atol=1e-9)
    assert abs(np.linalg.norm(after[1] - after[0]) - 0.3) < 1e-9


def test_equilibrium_fixed_point():
    g = grid(8, 8, 0.5)
    st = initial_state(g)
    out = step(st, build_constraints(g), None, SimParams(gravity=(0, 0, 0)))
    assert np.abs(out.positions - g.vertices).max() < 1e-9


def test_step_does_not_modify_input():
    g, top = sc.vertical_strip(5)
    st = initial_state(g, top)
    before = st.positions.copy()
    step(st, build_constraints(g), None, SimParams())
    np.testing.assert_array_equal(st.positions, before)


def test_constraint_counts_single_and_pair():
    one = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    c = build_constraints(one)
    assert (c.n_stretch, c.n_bend) == (3, 0)
    two = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    c = build_constraints(two)
    assert (c.n_stretch, c.n_bend) == (5, 1)
    assert sorted(c.pairs[c.kind == BEND][0].tolist()) == [1, 3]


def test_constraint_counts_grid_against_enumeration():
    g = grid(10, 10)
    c = build_constraints(g)
    edges = set()
    for a, b, d in g.triangles.tolist():
        for i, j in ((a, b), (b, d), (d, a)):
            edges.add((min(i, j), max(i, j)))
    assert c.n_stretch == len(edges) == 10 * 11 * 2 + 100
    got = {tuple(p) for p in c.pairs[c.kind == STRETCH].tolist()}
    assert got == edges
    # one bend per interior edge (every grid diagonal pair is a distinct non-edge)
    interior = sum(1 for f in g.edge_faces.values() if len(f) == 2)
    assert c.n_bend <= interior


def test_non_manifold_edge_rejected():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]],
                [[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    with pytest.raises(MeshError, match=r"\(0, 1\)"):
        build_constraints(m)


def test_coloring_is_independent():
    c = build_constraints(grid(12, 12))
    for k in range(c.n_colors):
        members = c.order[c.color_offsets[k]:c.color_offsets[k + 1]]
        verts = c.pairs[members].ravel()
        assert len(np.unique(verts)) == len(verts)
    assert sorted(c.order.tolist()) == list(range(len(c)))


def test_hanging_cloth_rest_residual():
    res, st, _, _ = sc.hanging_residual()
    assert res < 1e-3


def test_more_substeps_never_increase_residual():
    r = [sc.hanging_residual(s, 1, frames=60, n=10)[0] for s in (5, 10, 20, 40)]
    assert all(b <= a for a, b in zip(r, r[1:])), r


def test_momentum_conserved_on_free_system():
    assert sc.momentum_drift() < 1e-8


def test_pins_immobile():
    assert sc.pinned_stay()


def test_equilibrium_matches_energy_minimizer():
    assert sc.energy_oracle_deviation() < 0.02


def test_non_finite_state_reported():
    c = build_constraints(TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]))
    bad = SimState([[0, 0, np.nan], [1, 0, 0], [0, 1, 0]], np.zeros((3, 3)), [1, 1, 1])
    with pytest.raises(SimulationError, match="particle 0"):
        step(bad, c, None, SimParams(substeps=2))


def test_ground_plane_projection():
    col = CollisionBody(ground(), thickness=0.02, friction=0.0)
    st = SimState([[0.1, 0.2, -0.01], [0.3, 0.1, 0.05]], np.zeros((2, 3)), [1, 1])
    out = resolve_collisions(st, col)
    np.testing.assert_allclose(out.positions[0], [0.1, 0.2, 0.02], atol=1e-15)
    np.testing.assert_array_equal(out.positions[1], st.positions[1])


def test_sphere_drape_no_penetration():
    st, body = sc.sphere_drape()
    assert sc.penetration(st.positions, body) < 1e-4
    assert np.isfinite(st.positions).all()
    # the cloth actually rests on the sphere
    assert convex_signed_distance(st.positions, body).min() < 0.01


def test_scale_rest_lengths():
    c = build_constraints(grid(4, 4))
    same = scale_rest_lengths(c, 1.0)
    np.testing.assert_array_equal(same.rest_lengths, c.rest_lengths)
    np.testing.assert_array_equal(same.pairs, c.pairs)
    np.testing.assert_array_equal(same.compliance, c.compliance)
    big = scale_rest_lengths(c, 1.2)
    np.testing.assert_array_equal(big.rest_lengths, c.rest_lengths * 1.2)
    for bad in (0.0, -1.0, np.inf, np.nan):
        with pytest.raises(ValueError):
            scale_rest_lengths(c, bad)


def test_static_body_steady_state():
    cloth = grid(8, 8, 0.6, z=0.005, origin=(-0.3, -0.3))
    body = ground()
    frames = simulate_sequence(cloth, [body] * 5, SimParams(), build_constraints(cloth),
                               ramp_frames=5)
    for f in frames:
        assert np.abs(f.positions - frames[0].positions).max() < 1e-6


def test_topology_change_rejected():
    cloth = grid(3, 3, 0.2, z=1.0)
    with pytest.raises(SimulationError, match="topology"):
        simulate_sequence(cloth, [icosphere(1), icosphere(2)], SimParams(),
                          build_constraints(cloth), ramp_frames=0)


def test_deterministic_rerun():
    cloth = grid(10, 10, 1.2, z=0.55, origin=(-0.6, -0.6))
    body = icosphere(2, 0.5)
    frames = [body.with_vertices(body.vertices + [0.01 * k, 0, 0]) for k in range(5)]
    run = [simulate_sequence(cloth, frames, SimParams(), build_constraints(cloth), ramp_frames=5)
           for _ in range(2)]
    for a, b in zip(*run):
        np.testing.assert_array_equal(a.positions, b.positions)


def hem_width(scale):
    template = grid(16, 16, 1.2, z=0.55, origin=(-0.6, -0.6))
    cloth = template.with_vertices(template.vertices * scale)
    body = icosphere(3, 0.5)
    body = body.with_vertices(body.vertices * scale)
    c = scale_rest_lengths(build_constraints(template), scale)
    states = simulate_sequence(cloth, [body] * 3, SimParams(), c, ramp_frames=60)
    x = states[-1].positions
    return x[:, 0].max() - x[:, 0].min()


def test_scale_covariance_of_drape():
    w1, w12 = hem_width(1.0), hem_width(1.2)
    assert abs(w12 / (1.2 * w1) - 1) < 0.05


def test_simulate_records_and_diagnostics():
    cloth = grid(10, 10, 1.2, z=0.55, origin=(-0.6, -0.6))
    body = icosphere(2, 0.5)
    rec, diag = [], Diagnostics()
    simulate_sequence(cloth, [body] * 3, SimParams(), build_constraints(cloth), ramp_frames=30,
                      records=rec, diagnostics=diag)
    assert [r["frame"] for r in rec] == [0, 1, 2]
    assert all(r["contacts"] > 0 for r in rec)
    assert {"max_stretch_residual", "collision_rescues", "solver_ms"} <= set(rec[0])


def test_attachments_follow_body():
    body = icosphere(2, 0.3, (0, 0, 1.0))
    cloth = grid(6, 6, 0.4, z=1.32, origin=(-0.2, -0.2))
    attach = np.arange(7)
    frames = [body.with_vertices(body.vertices + [0.02 * k, 0, 0]) for k in range(4)]
    states = simulate_sequence(cloth, frames, SimParams(), build_constraints(cloth),
                               attach=attach, ramp_frames=0)
    shift = states[-1].positions[attach] - states[0].positions[attach]
    np.testing.assert_allclose(shift, np.tile([0.06, 0, 0], (7, 1)), atol=1e-9)


def test_param_validation():
    with pytest.raises(ValueError):
        SimParams(dt=0)
    with pytest.raises(ValueError):
        SimParams(substeps=0)
    with pytest.raises(ValueError):
        CollisionBody(ground(), thickness=0)

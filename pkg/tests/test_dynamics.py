"""Dynamics model: featurization, Gaussian head, integrator, symmetry checks."""

import numpy as np
import pytest

from cgroll import tensornet as tn
from cgroll.cgmap import pool_beads
from cgroll.dynamics import (KIND_CG_BOND, KIND_RADIUS, DynamicsConfig,
                             DynamicsModel, DynState, NormStats,
                             compute_norm_stats, euler_step, finite_diff_accel,
                             finite_diff_velocities, radius_edges_for,
                             rotation_diagnostic)
from cgroll.errors import ShapeError
from cgroll.graphcore import FineTopology, minimum_image, wrap_positions

CFG = DynamicsConfig(k=2, dt_multiple=10, connectivity_radius=2.0,
                     type_emb_dim=3, kind_emb_dim=2, emb_dim=3, emb_hidden=5,
                     hidden=6, n_mp_layers=2, n_mlp_hidden_layers=1)


def fine_chain(n=7):
    types = np.arange(n, dtype=np.int64) % 4
    bonds = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    return FineTopology(atom_type_ids=types,
                        atom_weights=np.ones(n) + 0.1 * types,
                        bonds=bonds,
                        bond_type_ids=np.zeros(n - 1, dtype=np.int64))


def quantized(rng, shape, scale=4.0):
    """Positions on the 2^-20 grid with magnitude < 32, so that adding an
    exactly representable shift keeps every pairwise difference bit-exact."""
    x = rng.uniform(-scale, scale, size=shape)
    return np.round(x * 2.0**20) / 2.0**20


def model_and_graph(seed=5, with_score=False, rg_head=False):
    cfg = DynamicsConfig(**{**CFG.__dict__, "rg_head": rg_head})
    model = DynamicsModel(cfg, n_atom_types=4, n_bond_types=1, seed=seed,
                          with_score=with_score)
    fine = fine_chain()
    assignment = np.array([0, 0, 0, 1, 1, 2, 2])
    ct = pool_beads(fine, np.zeros((7, 2)), assignment)
    with tn.no_grad():
        emb = model.pool_embeddings(model.embed_atoms(fine), assignment)
    return model, ct, emb


def chain_state(rng, m=3, k=2, dt=0.5):
    base = quantized(rng, (m, 3), scale=2.0)
    base[:, 0] += 1.25 * np.arange(m)  # stretch along x, stays on the grid
    vel = rng.normal(size=(k, m, 3))
    return DynState(positions=base, velocities=vel, dt=dt)


# ------------------------------------------------------- translation symmetry


def test_translation_invariance_bit_exact():
    rng = np.random.default_rng(31)
    model, ct, emb = model_and_graph()
    norm = NormStats.identity()
    state = chain_state(rng)
    shift = np.array([16.25, -8.5, 4.125])  # exactly representable doubles

    def predictions(positions):
        st = DynState(positions=positions, velocities=state.velocities,
                      dt=state.dt)
        redges = radius_edges_for(positions, None, model.cfg.connectivity_radius)
        feats = model.featurize(emb, ct, st, redges, None, norm)
        with tn.no_grad():
            mu, logvar, _ = model.predict(feats)
        return mu.data, logvar.data

    mu_a, lv_a = predictions(state.positions)
    mu_b, lv_b = predictions(state.positions + shift)
    assert np.array_equal(mu_a, mu_b)
    assert np.array_equal(lv_a, lv_b)


def test_translated_rollout_step_displacement_identical():
    rng = np.random.default_rng(32)
    model, ct, emb = model_and_graph()
    norm = NormStats.identity()
    state = chain_state(rng)
    shift = np.array([16.25, -8.5, 4.125])

    def step_disp(positions, seed=77):
        st = DynState(positions=positions, velocities=state.velocities,
                      dt=state.dt)
        redges = radius_edges_for(positions, None, model.cfg.connectivity_radius)
        feats = model.featurize(emb, ct, st, redges, None, norm)
        with tn.no_grad():
            mu, logvar, _ = model.predict(feats)
        accel = model.sample_accel(mu.data, logvar.data, norm,
                                   rng=np.random.default_rng(seed))
        _, disp = euler_step(st, accel)
        return disp

    assert np.array_equal(step_disp(state.positions),
                          step_disp(state.positions + shift))


# --------------------------------------------------------- rotation diagnostic


def diag_windows(rng, model, ct, emb, n=2):
    windows = []
    for _ in range(n):
        st = chain_state(rng)
        target = rng.normal(size=(ct.n_beads, 3))
        windows.append((emb, ct, st, target))
    return windows


def test_identity_rotation_gap_exactly_zero():
    rng = np.random.default_rng(33)
    model, ct, emb = model_and_graph()
    windows = diag_windows(rng, model, ct, emb)
    gap = rotation_diagnostic(model, NormStats.identity(), windows,
                              rotations=[np.eye(3)])
    assert gap == 0.0


def test_random_rotation_gap_reported_positive():
    rng = np.random.default_rng(34)
    model, ct, emb = model_and_graph()
    windows = diag_windows(rng, model, ct, emb)
    gap = rotation_diagnostic(model, NormStats.identity(), windows,
                              n_rotations=3, seed=1)
    assert np.isfinite(gap) and gap > 0.0
    again = rotation_diagnostic(model, NormStats.identity(), windows,
                                n_rotations=3, seed=1)
    assert gap == again  # seeded rotation set


# ----------------------------------------------------------------- gaussians


def test_nll_closed_form():
    model, _, _ = model_and_graph()
    mu = np.array([[0.5, -1.0, 2.0]])
    logvar = np.array([[0.2, -0.3, 0.0]])
    target = np.array([[0.0, -1.5, 2.5]])
    want = np.mean(0.5 * (np.log(2 * np.pi) + logvar
                          + (target - mu) ** 2 * np.exp(-logvar)))
    got = model.nll(tn.as_tensor(mu), tn.as_tensor(logvar), target)
    assert got.item() == pytest.approx(want, rel=1e-12)


def test_sample_accel_modes():
    model, _, _ = model_and_graph()
    norm = NormStats(vel_mean=np.zeros(3), vel_std=np.ones(3),
                     acc_mean=np.array([1.0, -2.0, 0.5]),
                     acc_std=np.array([2.0, 0.5, 1.5]), pos_std=np.ones(3))
    mu = np.array([[0.4, 0.0, -0.2]])
    logvar = np.full((1, 3), -40.0)  # essentially zero variance
    det = model.sample_accel(mu, logvar, norm, deterministic=True)
    assert np.array_equal(det, mu * norm.acc_std + norm.acc_mean)
    with pytest.raises(ShapeError, match="requires an rng"):
        model.sample_accel(mu, logvar, norm)
    s1 = model.sample_accel(mu, logvar, norm, rng=np.random.default_rng(3))
    s2 = model.sample_accel(mu, logvar, norm, rng=np.random.default_rng(3))
    assert np.array_equal(s1, s2)
    assert np.allclose(s1, det, atol=1e-6)  # tiny variance collapses to mean
    wide = model.sample_accel(mu, np.zeros((1, 3)), norm,
                              rng=np.random.default_rng(4))
    assert not np.allclose(wide, det, atol=1e-3)


def test_predict_logvar_clamped():
    rng = np.random.default_rng(35)
    model, ct, emb = model_and_graph()
    state = chain_state(rng)
    redges = radius_edges_for(state.positions, None, model.cfg.connectivity_radius)
    feats = model.featurize(emb, ct, state, redges, None, NormStats.identity())
    with tn.no_grad():
        mu, logvar, hidden = model.predict(feats)
    assert mu.shape == (3, 3)
    assert logvar.shape == (3, 3)
    assert np.all(logvar.data >= model.cfg.logvar_min)
    assert np.all(logvar.data <= model.cfg.logvar_max)
    assert hidden.shape == (3, model.cfg.hidden)


# ----------------------------------------------------------------- integrator


def test_euler_step_semantics():
    v0 = np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 0.0]])
    v1 = np.array([[0.5, 0.5, 0.5], [0.25, 0.25, 0.25]])
    state = DynState(positions=np.zeros((2, 3)),
                     velocities=np.stack([v0, v1]), dt=0.5, step_index=4)
    accel = np.array([[2.0, 0.0, 0.0], [0.0, -4.0, 0.0]])
    new, disp = euler_step(state, accel)
    want_v = v0 + accel * 0.5
    assert np.array_equal(new.velocities[0], want_v)
    assert np.array_equal(new.velocities[1], v0)       # history shifted
    assert new.velocities.shape == (2, 2, 3)
    assert np.array_equal(disp, want_v * 0.5)
    assert np.array_equal(new.positions, disp)          # started at origin
    assert new.step_index == 5
    assert new.dt == 0.5


def test_euler_step_wraps_but_reports_prewrap_displacement():
    box = np.array([2.0, 2.0, 2.0])
    state = DynState(positions=np.array([[1.9, 0.5, 0.5]]),
                     velocities=np.zeros((1, 1, 3)), dt=1.0)
    accel = np.array([[0.3, 0.0, 0.0]])
    new, disp = euler_step(state, accel, box=box)
    assert np.allclose(disp, [[0.3, 0.0, 0.0]])
    assert np.allclose(new.positions, [[0.2, 0.5, 0.5]])  # 2.2 wrapped
    assert np.all(new.positions >= 0) and np.all(new.positions < 2.0)


def test_euler_step_requires_velocity():
    state = DynState(positions=np.zeros((2, 3)),
                     velocities=np.zeros((0, 2, 3)), dt=0.1)
    with pytest.raises(ShapeError, match="at least one velocity"):
        euler_step(state, np.zeros((2, 3)))


# ------------------------------------------------------------ finite windows


def test_finite_diff_velocities_oracle():
    rng = np.random.default_rng(36)
    series = rng.normal(size=(6, 4, 3))
    out = finite_diff_velocities(series, i=3, k=2, dt=0.5)
    assert np.array_equal(out[0], (series[3] - series[2]) / 0.5)
    assert np.array_equal(out[1], (series[2] - series[1]) / 0.5)
    with pytest.raises(ShapeError, match="history"):
        finite_diff_velocities(series, i=1, k=2, dt=0.5)


def test_finite_diff_velocities_periodic_recovers_true_motion():
    box = np.array([4.0, 4.0, 4.0])
    true = np.array([[[3.8, 1.0, 1.0]], [[0.1, 1.0, 1.0]]])  # crossed the face
    wrapped = wrap_positions(true, box)
    out = finite_diff_velocities(wrapped, i=1, k=1, dt=1.0, box=box)
    assert np.allclose(out[0], [[0.3, 0.0, 0.0]])


def test_finite_diff_accel_oracle():
    rng = np.random.default_rng(37)
    series = rng.normal(size=(5, 3, 3))
    got = finite_diff_accel(series, i=2, dt=0.5)
    want = (series[3] - 2 * series[2] + series[1]) / 0.25
    assert np.allclose(got, want, atol=1e-12)


def test_compute_norm_stats_oracle():
    rng = np.random.default_rng(38)
    series = rng.normal(size=(10, 4, 3))
    dt = 0.5
    stats = compute_norm_stats([series], dt, [None])
    v = ((series[1:] - series[:-1]) / dt).reshape(-1, 3)
    a = ((v.reshape(9, 4, 3)[1:] - v.reshape(9, 4, 3)[:-1]) / dt).reshape(-1, 3)
    centered = (series - series.mean(axis=1, keepdims=True)).reshape(-1, 3)
    assert np.allclose(stats.vel_mean, v.mean(axis=0), atol=1e-12)
    assert np.allclose(stats.vel_std, v.std(axis=0), atol=1e-12)
    assert np.allclose(stats.acc_mean, a.mean(axis=0), atol=1e-12)
    assert np.allclose(stats.acc_std, a.std(axis=0), atol=1e-12)
    assert np.allclose(stats.pos_std, centered.std(axis=0), atol=1e-12)


def test_compute_norm_stats_floors_degenerate_std():
    series = np.zeros((8, 2, 3))
    stats = compute_norm_stats([series], 0.1, [None])
    assert np.all(stats.vel_std == 1e-8)
    assert np.all(stats.acc_std == 1e-8)
    assert np.all(stats.pos_std == 1e-8)


def test_compute_norm_stats_periodic_uses_minimum_image():
    box = np.array([4.0, 4.0, 4.0])
    # steady drift +0.3 per frame along x, wrapped into the box
    true = np.zeros((6, 1, 3))
    true[:, 0, 0] = 1.0 + 0.3 * np.arange(6)
    stats = compute_norm_stats([wrap_positions(true, box)], 1.0, [box])
    assert stats.vel_mean[0] == pytest.approx(0.3, abs=1e-12)
    assert stats.vel_std[0] == pytest.approx(0.0, abs=1e-7)


# -------------------------------------------------------------- featurization


def test_featurize_rejects_bad_history():
    rng = np.random.default_rng(39)
    model, ct, emb = model_and_graph()
    state = chain_state(rng)
    short = DynState(positions=state.positions,
                     velocities=state.velocities[:1], dt=0.5)
    redges = radius_edges_for(state.positions, None, 2.0)
    with pytest.raises(ShapeError, match="velocity history shape"):
        model.featurize(emb, ct, short, redges, None, NormStats.identity())


def test_combine_edges_cg_bond_kind_wins():
    rng = np.random.default_rng(40)
    model, ct, emb = model_and_graph()
    # beads 0.9 apart: every pair within radius 2.0 of its neighbor
    pos = np.array([[0.0, 0.0, 0.0], [0.9, 0.0, 0.0], [1.8, 0.0, 0.0]])
    redges = radius_edges_for(pos, None, 2.0)
    pairs, kinds, disp = model.combine_edges(ct, pos, redges, None)
    as_set = {tuple(p): k for p, k in zip(pairs.tolist(), kinds.tolist())}
    assert as_set[(0, 1)] == KIND_CG_BOND
    assert as_set[(1, 2)] == KIND_CG_BOND
    assert as_set[(0, 2)] == KIND_RADIUS
    assert len(as_set) == 3
    i01 = next(i for i, p in enumerate(pairs.tolist()) if p == [0, 1])
    assert np.allclose(disp[i01], [-0.9, 0.0, 0.0])


def test_pool_embeddings_is_group_mean():
    model, ct, emb = model_and_graph()
    fine = fine_chain()
    assignment = np.array([0, 0, 0, 1, 1, 2, 2])
    with tn.no_grad():
        atom_emb = model.embed_atoms(fine)
        pooled = model.pool_embeddings(atom_emb, assignment)
    for g in range(3):
        rows = atom_emb.data[assignment == g]
        assert np.allclose(pooled.data[g], rows.mean(axis=0), atol=1e-12)


def test_rg_correction_requires_head():
    model, ct, emb = model_and_graph(rg_head=False)
    with pytest.raises(ShapeError, match="residual Rg head"):
        model.rg_correction(tn.as_tensor(np.zeros((3, 6))))
    model_rg, ct, emb = model_and_graph(rg_head=True)
    with tn.no_grad():
        out = model_rg.rg_correction(tn.as_tensor(np.zeros((3, 6))))
    assert out.shape == (1, 1)

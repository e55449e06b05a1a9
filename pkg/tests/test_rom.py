"""Feature bases, the linear model parameterization and its derivatives."""

import numpy as np
import pytest

from conftest import fd_jacobian
from romsynth import dynamics as dyn
from romsynth import rom
from romsynth.dynamics import Leg


@pytest.fixture(scope="module")
def lip(params):
    return rom.init_lip(params)


@pytest.fixture(scope="module")
def lip4(params):
    return rom.init_lip_with_foot(params)


def walking_pose(rng):
    q = rng.normal(scale=0.3, size=7)
    q[1] = 0.95 + 0.05 * rng.standard_normal()
    return q


# ---------------------------------------------------------------------------
# basis construction

def test_phi_e_size_and_constant(params):
    basis = rom.build_phi_e_five_link(params)
    assert basis.size == 72  # 6 kinematic + 11*12/2 quadratic monomials
    assert basis.descriptors.count("1*1") == 1
    q = np.array([0.2, 0.9, 0.1, 0.3, -0.5, -0.2, -0.4])
    vals = basis.eval(q)
    assert vals[basis.descriptors.index("1*1")] == 1.0


def test_phi_e_symmetric_pose_com_feature(params):
    basis = rom.build_phi_e_five_link(params)
    q = np.array([0.4, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])  # stacked standing pose
    vals = basis.eval(q)
    assert vals[0] == pytest.approx(0.0, abs=1e-12)  # COM above stance foot


def test_phi_d_sizes(params):
    assert rom.build_phi_d(2, params).size == 16   # 15 monomials + pendulum
    assert rom.build_phi_d(4, params).size == 46   # 45 monomials + pendulum
    basis = rom.build_phi_d(2, params)
    s = np.array([0.1, 1.0, 0.0, 0.0])
    vals = basis.eval(s)
    assert vals[0] == pytest.approx(0.981, abs=1e-15)
    assert vals[basis.descriptors.index("1*1")] == 1.0


def test_phi_d_singularity_guard(params):
    basis = rom.build_phi_d(2, params)
    with pytest.raises(rom.FeatureSingularityError):
        basis.eval(np.array([0.1, 1e-8, 0.0, 0.0]))


def test_phi_gradients_match_fd(params, rng):
    basis = rom.build_phi_e_five_link(params)
    q = walking_pose(rng)
    J = basis.jac(q)
    J_fd = fd_jacobian(basis.eval, q)
    assert np.abs(J - J_fd).max() <= 1e-6

    basis_d = rom.build_phi_d(2, params)
    s = np.array([0.15, 0.95, 0.3, -0.2])
    Jd = basis_d.jac(s)
    Jd_fd = fd_jacobian(basis_d.eval, s)
    assert np.abs(Jd - Jd_fd).max() <= 1e-6


def test_phi_e_vel_jac_matches_fd(params, rng):
    basis = rom.build_phi_e_five_link(params)
    q = walking_pose(rng)
    qd = rng.normal(size=7)
    V = basis.vel_jac(q, qd)
    V_fd = fd_jacobian(lambda qq: basis.jac(qq) @ qd, q)
    assert np.abs(V - V_fd).max() <= 1e-5


# ---------------------------------------------------------------------------
# embedding / dynamics evaluation

def test_lip_embedding_is_com_rel_stance(params, lip, rng):
    q = walking_pose(rng)
    y = rom.eval_embedding(q, lip)
    expected = dyn.com_position(q, params) - dyn.foot_position(q, Leg.LEFT,
                                                               params)
    assert np.allclose(y, expected, atol=1e-12)


def test_zero_theta_gives_zero_embedding(params, rng):
    model = rom.build_rom(params, n_y=2, n_tau=0)
    assert np.allclose(rom.eval_embedding(walking_pose(rng), model), 0.0)
    assert np.allclose(rom.embedding_jacobian(walking_pose(rng), model), 0.0)


def test_embedding_matches_dense_oracle(params, rng):
    model = rom.build_rom(params, n_y=3, n_tau=0)
    theta_e = rng.normal(size=(3, model.phi_e.size))
    model = model.with_params(rom.RomParams(
        theta_e=theta_e, theta_d=np.zeros((3, model.phi_d.size)),
        B=np.zeros((3, 0))))
    q = walking_pose(rng)
    y = rom.eval_embedding(q, model)
    assert np.abs(y - theta_e @ model.phi_e.eval(q)).max() <= 1e-12


def test_embedding_jacobian_vs_fd_and_lip_structure(params, lip, rng):
    q = walking_pose(rng)
    J = rom.embedding_jacobian(q, lip)
    J_fd = fd_jacobian(lambda qq: rom.eval_embedding(qq, lip), q)
    assert np.abs(J - J_fd).max() <= 1e-6
    expected = dyn.com_jacobian(q, params) - dyn.foot_jacobian(q, Leg.LEFT,
                                                               params)
    assert np.allclose(J, expected, atol=1e-12)


def test_lip_dynamics_value(lip):
    ydd = rom.eval_rom_dynamics(np.array([0.1, 1.0]), np.zeros(2),
                                np.zeros(0), lip)
    assert ydd[0] == pytest.approx(0.981, abs=1e-15)
    assert ydd[1] == 0.0


def test_lip_with_foot_b_matrix(lip4, rng):
    tau = rng.normal(size=2)
    y = np.array([0.1, 0.95, -0.2, -0.8])
    ydd = rom.eval_rom_dynamics(y, np.zeros(4), tau, lip4)
    assert ydd[2] == pytest.approx(tau[0], abs=1e-15)
    assert ydd[3] == pytest.approx(tau[1], abs=1e-15)
    # full Eq.-of-motion reproduction on random states
    yd = rng.normal(size=4)
    ydd = rom.eval_rom_dynamics(y, yd, tau, lip4)
    expected = np.array([9.81 * y[0] / y[1], 0.0, tau[0], tau[1]])
    assert np.allclose(ydd, expected, atol=1e-14)


def test_zero_dynamics_weights(params, rng):
    model = rom.build_rom(params, n_y=2, n_tau=0)
    assert np.allclose(
        rom.eval_rom_dynamics(np.array([0.1, 1.0]), rng.normal(size=2),
                              np.zeros(0), model), 0.0)


def test_sparsity_of_initializations(lip, lip4):
    assert np.count_nonzero(lip.params.theta_e) == 2
    assert np.count_nonzero(lip.params.theta_d) == 1
    assert np.count_nonzero(lip4.params.theta_e) == 4
    assert np.count_nonzero(lip4.params.theta_d) == 1


# ---------------------------------------------------------------------------
# parameter jacobians and linearity

def test_param_jacobians_match_fd(params, lip, rng):
    q = walking_pose(rng)
    y, yd = np.array([0.12, 0.97]), np.array([0.4, -0.1])
    Je, Jd = rom.rom_param_jacobians(q, y, yd, lip)

    def embed_of_theta(th_e):
        m = lip.with_params(rom.RomParams(
            theta_e=th_e.reshape(lip.params.theta_e.shape),
            theta_d=lip.params.theta_d, B=lip.params.B))
        return rom.eval_embedding(q, m)

    Je_fd = fd_jacobian(embed_of_theta, lip.params.theta_e.ravel().copy(),
                        eps=1e-5)
    assert np.abs(Je - Je_fd).max() <= 1e-7

    def dyn_of_theta(th_d):
        m = lip.with_params(rom.RomParams(
            theta_e=lip.params.theta_e,
            theta_d=th_d.reshape(lip.params.theta_d.shape), B=lip.params.B))
        return rom.eval_rom_dynamics(y, yd, np.zeros(0), m)

    Jd_fd = fd_jacobian(dyn_of_theta, lip.params.theta_d.ravel().copy(),
                        eps=1e-5)
    assert np.abs(Jd - Jd_fd).max() <= 1e-7

    # constant in theta: same jacobian at a different theta
    other = lip.with_flat_theta(rng.normal(size=lip.n_theta))
    Je2, Jd2 = rom.rom_param_jacobians(q, y, yd, other)
    assert np.array_equal(Je, Je2) and np.array_equal(Jd, Jd2)


def test_linearity_in_theta(params, rng):
    model = rom.build_rom(params, n_y=2, n_tau=0)
    ta = rng.normal(size=model.n_theta)
    tb = rng.normal(size=model.n_theta)
    q = walking_pose(rng)
    y, yd = np.array([0.1, 0.9]), np.array([0.2, 0.1])
    ya = rom.eval_embedding(q, model.with_flat_theta(ta))
    yb = rom.eval_embedding(q, model.with_flat_theta(tb))
    yab = rom.eval_embedding(q, model.with_flat_theta(ta + tb))
    assert np.allclose(yab, ya + yb, atol=1e-12)
    ga = rom.eval_rom_dynamics(y, yd, np.zeros(0), model.with_flat_theta(ta))
    gb = rom.eval_rom_dynamics(y, yd, np.zeros(0), model.with_flat_theta(tb))
    gab = rom.eval_rom_dynamics(y, yd, np.zeros(0),
                                model.with_flat_theta(ta + tb))
    assert np.allclose(gab, ga + gb, atol=1e-12)


# ---------------------------------------------------------------------------
# serialization

def test_serialization_bit_exact_roundtrip(tmp_path, params, lip4, rng):
    model = lip4.with_flat_theta(rng.normal(size=lip4.n_theta))
    path = tmp_path / "model.json"
    rom.save_model(model, path)
    loaded = rom.load_model(path)
    q = walking_pose(rng)
    assert np.array_equal(rom.eval_embedding(q, model),
                          rom.eval_embedding(q, loaded))
    s_y, s_yd = np.array([0.1, 0.9, 0.0, -0.4]), rng.normal(size=4)
    tau = rng.normal(size=2)
    assert np.array_equal(rom.eval_rom_dynamics(s_y, s_yd, tau, model),
                          rom.eval_rom_dynamics(s_y, s_yd, tau, loaded))
    # double round-trip preserves bytes
    path2 = tmp_path / "model2.json"
    rom.save_model(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_corrupted_descriptors(tmp_path, params, lip):
    path = tmp_path / "model.json"
    rom.save_model(lip, path)
    text = path.read_text().replace("com_rel_stance_x", "bogus_feature")
    path.write_text(text)
    with pytest.raises(ValueError):
        rom.load_model(path)

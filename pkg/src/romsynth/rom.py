"""Reduced-order models: feature bases, linear weights and evaluation.

A model is the pair (r, g): an embedding y = r(q) = Theta_e * phi_e(q) from
the full configuration into n_y reduced coordinates, and reduced dynamics
ydd = g(y, yd, tau) = Theta_d * phi_d(y, yd) + B * tau. Both maps are linear
in their weights, which is what makes the synthesis gradients cheap.

Feature ordering is canonical and stable: named kinematic features first,
then quadratic monomials of the trig/state element set in lexicographic
index order. Serialized models reload to bit-identical evaluations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .dynamics import Leg, PlanarWalkerParams
from .nlp import EvaluationError

FORMAT_VERSION = 1

# q indices whose cos/sin enter the quadratic embedding features
_ANGLE_IDX = (2, 3, 4, 5, 6)


class FeatureSingularityError(EvaluationError, ValueError):
    """A rational feature was evaluated at a singular point (COM height ~ 0)."""


def _monomial_pairs(n_elements: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n_elements) for b in range(a, n_elements)]


@dataclass(frozen=True)
class FeatureBasis:
    """An ordered, differentiable feature vector.

    kind 'embedding_q': features over the full configuration q (arity 7),
    built from walker kinematics plus quadratic trig monomials; needs robot
    parameters. kind 'rom_state': features over (y, yd) (arity 2*n_y),
    the pendulum term plus quadratic state monomials.
    """

    kind: str
    descriptors: tuple[str, ...]
    arity: int
    robot: PlanarWalkerParams | None = None
    n_y: int = 0

    @property
    def size(self) -> int:
        return len(self.descriptors)

    # -- embedding-basis evaluation (batched: q is (7,) or (7, N)) ----------

    def _trig_elements(self, q):
        angles = np.asarray(q, dtype=float)[list(_ANGLE_IDX)]
        ones = np.ones_like(angles[:1])
        elems = [ones[0]]
        for k in range(len(_ANGLE_IDX)):
            elems.append(np.cos(angles[k]))
            elems.append(np.sin(angles[k]))
        return np.stack(elems)  # (11, ...) order: 1, cos, sin per angle

    def _trig_element_grads(self, q):
        """d(elements)/dq as (11, 7, ...) sparse-by-construction array."""
        q = np.asarray(q, dtype=float)
        batch = q.shape[1:]
        grads = np.zeros((11, 7) + batch)
        angles = q[list(_ANGLE_IDX)]
        for k, qi in enumerate(_ANGLE_IDX):
            grads[1 + 2 * k, qi] = -np.sin(angles[k])
            grads[2 + 2 * k, qi] = np.cos(angles[k])
        return grads

    def _kinematic_terms(self, q, qdot=None):
        """Values, Jacobians and (optionally) d(J qd)/dq of the 6 kinematic
        features: COM rel stance foot, swing foot rel COM, base position."""
        q = np.asarray(q, dtype=float)
        batch = q.shape[1:]
        qd = np.zeros_like(q) if qdot is None else np.asarray(qdot, float)
        kin = dyn.kin_terms(q, qd, self.robot)
        vals = np.concatenate([
            kin["com"] - kin["foot_l"],
            kin["foot_r"] - kin["com"],
            q[:2],
        ])
        base_jac = np.zeros((2, 7) + batch)
        base_jac[0, 0] = 1.0
        base_jac[1, 1] = 1.0
        jacs = np.concatenate([
            kin["J_com"] - kin["J_l"],
            kin["J_r"] - kin["J_com"],
            base_jac,
        ])
        if qdot is None:
            return vals, jacs, None
        vel_jacs = np.concatenate([
            kin["dvcom_dq"] - kin["dvl_dq"],
            kin["dvr_dq"] - kin["dvcom_dq"],
            np.zeros((2, 7) + batch),
        ])
        return vals, jacs, vel_jacs

    def eval(self, x) -> np.ndarray:
        """Feature values, shape (size,) or (size, N)."""
        if self.kind == "embedding_q":
            kin_vals, _, _ = self._kinematic_terms(x)
            e = self._trig_elements(x)
            pairs = _monomial_pairs(11)
            monos = np.stack([e[a] * e[b] for a, b in pairs])
            return np.concatenate([kin_vals, monos])
        return self._eval_rom_state(x)

    def jac(self, x) -> np.ndarray:
        """Exact feature Jacobian, shape (size, arity) (+ batch)."""
        if self.kind == "embedding_q":
            _, kin_jacs, _ = self._kinematic_terms(x)
            e = self._trig_elements(x)
            de = self._trig_element_grads(x)
            pairs = _monomial_pairs(11)
            monos = np.stack([
                e[a][None] * de[b] + e[b][None] * de[a] for a, b in pairs
            ])
            return np.concatenate([kin_jacs, monos])
        return self._jac_rom_state(x)

    def vel_jac(self, q, qdot) -> np.ndarray:
        """d(jac(q) @ qdot)/dq for the embedding chain, (size, 7) (+ batch)."""
        assert self.kind == "embedding_q"
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qdot, dtype=float)
        _, _, kin_vel = self._kinematic_terms(q, qd)
        e = self._trig_elements(q)
        de = self._trig_element_grads(q)
        # element velocities edot = de @ qd and their q-gradients
        edot = np.einsum("ij...,j...->i...", de, qd)
        dedot_dq = np.zeros_like(de)
        angles = q[list(_ANGLE_IDX)]
        for k, qi in enumerate(_ANGLE_IDX):
            dedot_dq[1 + 2 * k, qi] = -np.cos(angles[k]) * qd[qi]
            dedot_dq[2 + 2 * k, qi] = -np.sin(angles[k]) * qd[qi]
        pairs = _monomial_pairs(11)
        out = np.stack([
            edot[b][None] * de[a] + e[b][None] * dedot_dq[a]
            + edot[a][None] * de[b] + e[a][None] * dedot_dq[b]
            for a, b in pairs
        ])
        return np.concatenate([kin_vel, out])

    # -- rom-state basis (features over (y, yd)) ----------------------------

    def _split_state(self, s):
        s = np.asarray(s, dtype=float)
        return s[:self.n_y], s[self.n_y:]

    def _state_elements(self, s):
        s = np.asarray(s, dtype=float)
        ones = np.ones_like(s[:1])
        return np.concatenate([ones, s])  # (1 + 2 n_y, ...)

    def _eval_rom_state(self, s):
        s = np.asarray(s, dtype=float)
        y2 = s[1]
        if np.any(np.abs(y2) < 1e-6):
            raise FeatureSingularityError(
                "pendulum feature needs |y_2| >= 1e-6 (COM height near zero)")
        cg = self.robot.gravity_accel
        pend = cg * s[0] / y2
        e = self._state_elements(s)
        pairs = _monomial_pairs(1 + 2 * self.n_y)
        monos = np.stack([e[a] * e[b] for a, b in pairs])
        return np.concatenate([pend[None], monos])

    def _jac_rom_state(self, s):
        s = np.asarray(s, dtype=float)
        batch = s.shape[1:]
        y2 = s[1]
        if np.any(np.abs(y2) < 1e-6):
            raise FeatureSingularityError(
                "pendulum feature needs |y_2| >= 1e-6 (COM height near zero)")
        cg = self.robot.gravity_accel
        m = 2 * self.n_y
        pend = np.zeros((1, m) + batch)
        pend[0, 0] = cg / y2
        pend[0, 1] = -cg * s[0] / y2**2
        n_el = 1 + m
        de = np.zeros((n_el, m) + batch)
        for i in range(m):
            de[1 + i, i] = 1.0
        e = self._state_elements(s)
        pairs = _monomial_pairs(n_el)
        monos = np.stack([
            e[a][None] * de[b] + e[b][None] * de[a] for a, b in pairs
        ])
        return np.concatenate([pend, monos])


def _element_names_q() -> list[str]:
    names = ["1"]
    for qi in _ANGLE_IDX:
        names.append(f"cos(q{qi})")
        names.append(f"sin(q{qi})")
    return names


def _element_names_state(n_y: int) -> list[str]:
    return ["1"] + [f"y{i + 1}" for i in range(n_y)] \
        + [f"yd{i + 1}" for i in range(n_y)]


def build_phi_e_five_link(params: PlanarWalkerParams) -> FeatureBasis:
    """Embedding features of the five-link walker: 6 kinematic terms plus
    the 66 quadratic monomials of {1, cos/sin of the 5 angle coordinates}."""
    kin = ["com_rel_stance_x", "com_rel_stance_z",
           "swing_rel_com_x", "swing_rel_com_z", "base_x", "base_z"]
    el = _element_names_q()
    monos = [f"{el[a]}*{el[b]}" for a, b in _monomial_pairs(len(el))]
    return FeatureBasis(kind="embedding_q",
                        descriptors=tuple(kin + monos), arity=7,
                        robot=params)


def build_phi_d(n_y: int, params: PlanarWalkerParams) -> FeatureBasis:
    """Reduced-dynamics features: the inverted-pendulum term c_g*y1/y2 plus
    quadratic monomials of {1, y, yd}. Size 16 for n_y=2, 46 for n_y=4."""
    el = _element_names_state(n_y)
    monos = [f"{el[a]}*{el[b]}" for a, b in _monomial_pairs(len(el))]
    return FeatureBasis(kind="rom_state",
                        descriptors=tuple(["cg*y1/y2"] + monos),
                        arity=2 * n_y, robot=params, n_y=n_y)


@dataclass(frozen=True)
class RomParams:
    """Weights of a reduced-order model: Theta_e, Theta_d and input matrix B.

    theta = [theta_e, theta_d] stacked row-major is the flat parameter vector
    the synthesis loop optimizes; B stays fixed.
    """

    theta_e: np.ndarray  # (n_y, n_e)
    theta_d: np.ndarray  # (n_y, n_d)
    B: np.ndarray        # (n_y, n_tau)

    def __post_init__(self):
        for name in ("theta_e", "theta_d", "B"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.theta_e.shape[0] != self.theta_d.shape[0] \
                or self.B.shape[0] != self.theta_e.shape[0]:
            raise ValueError("inconsistent row counts across theta_e/theta_d/B")

    @property
    def n_theta(self) -> int:
        return self.theta_e.size + self.theta_d.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta_e.ravel(), self.theta_d.ravel()])

    def with_flat(self, theta: np.ndarray) -> "RomParams":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_theta:
            raise ValueError("theta size mismatch")
        ne = self.theta_e.size
        return RomParams(
            theta_e=theta[:ne].reshape(self.theta_e.shape),
            theta_d=theta[ne:].reshape(self.theta_d.shape),
            B=self.B)


@dataclass(frozen=True)
class ReducedOrderModel:
    """A parameterized reduced-order model tied to the five-link walker."""

    n_y: int
    n_tau: int
    phi_e: FeatureBasis
    phi_d: FeatureBasis
    params: RomParams
    robot: PlanarWalkerParams

    def __post_init__(self):
        if not self.n_y < dyn.NQ:
            raise ValueError("reduced dimension must satisfy n_y < dim q")
        if not self.n_tau <= dyn.NU:
            raise ValueError("reduced input must satisfy n_tau <= dim u")
        if self.params.theta_e.shape != (self.n_y, self.phi_e.size):
            raise ValueError("theta_e shape mismatch")
        if self.params.theta_d.shape != (self.n_y, self.phi_d.size):
            raise ValueError("theta_d shape mismatch")
        if self.params.B.shape != (self.n_y, self.n_tau):
            raise ValueError("B shape mismatch")

    @property
    def n_theta(self) -> int:
        return self.params.n_theta

    def with_params(self, params: RomParams) -> "ReducedOrderModel":
        return replace(self, params=params)

    def with_flat_theta(self, theta: np.ndarray) -> "ReducedOrderModel":
        return self.with_params(self.params.with_flat(theta))


def build_rom(robot: PlanarWalkerParams, n_y: int, n_tau: int,
              params: RomParams | None = None) -> ReducedOrderModel:
    phi_e = build_phi_e_five_link(robot)
    phi_d = build_phi_d(n_y, robot)
    if params is None:
        params = RomParams(theta_e=np.zeros((n_y, phi_e.size)),
                           theta_d=np.zeros((n_y, phi_d.size)),
                           B=np.zeros((n_y, n_tau)))
    return ReducedOrderModel(n_y=n_y, n_tau=n_tau, phi_e=phi_e, phi_d=phi_d,
                             params=params, robot=robot)


# ---------------------------------------------------------------------------
# evaluation

def eval_embedding(q, model: ReducedOrderModel) -> np.ndarray:
    """y = Theta_e phi_e(q); batched over a trailing axis of q."""
    return np.einsum("ef,f...->e...", model.params.theta_e,
                     model.phi_e.eval(q))


def embedding_jacobian(q, model: ReducedOrderModel) -> np.ndarray:
    """dy/dq = Theta_e dphi_e/dq, shape (n_y, 7) (+ batch)."""
    return np.einsum("ef,fq...->eq...", model.params.theta_e,
                     model.phi_e.jac(q))


def embedding_vel_jacobian(q, qdot, model: ReducedOrderModel) -> np.ndarray:
    """d(ydot)/dq where ydot = dy/dq qdot; shape (n_y, 7) (+ batch)."""
    return np.einsum("ef,fq...->eq...", model.params.theta_e,
                     model.phi_e.vel_jac(q, qdot))


def eval_rom_dynamics(y, ydot, tau, model: ReducedOrderModel) -> np.ndarray:
    """ydd = Theta_d phi_d(y, yd) + B tau."""
    s = np.concatenate([np.atleast_1d(np.asarray(y, float)),
                        np.atleast_1d(np.asarray(ydot, float))])
    out = np.einsum("df,f...->d...", model.params.theta_d,
                    model.phi_d.eval(s))
    if model.n_tau:
        out = out + np.einsum("dt,t...->d...", model.params.B,
                              np.atleast_1d(np.asarray(tau, float)))
    return out


def rom_dynamics_state_jacobian(y, ydot, model: ReducedOrderModel) -> np.ndarray:
    """d(ydd)/d(y, yd) = Theta_d dphi_d/d(y, yd), shape (n_y, 2 n_y)."""
    s = np.concatenate([np.atleast_1d(np.asarray(y, float)),
                        np.atleast_1d(np.asarray(ydot, float))])
    return np.einsum("df,fs...->ds...", model.params.theta_d,
                     model.phi_d.jac(s))


def embedding_param_jacobian(q, model: ReducedOrderModel) -> np.ndarray:
    """dy/d(theta_e) for the row-major flat theta_e, shape (n_y, n_y*n_e)."""
    phi = model.phi_e.eval(q)
    return np.kron(np.eye(model.n_y), phi)


def rom_dynamics_param_jacobian(y, ydot, model: ReducedOrderModel) -> np.ndarray:
    """d(ydd)/d(theta_d) for the row-major flat theta_d."""
    s = np.concatenate([np.atleast_1d(np.asarray(y, float)),
                        np.atleast_1d(np.asarray(ydot, float))])
    return np.kron(np.eye(model.n_y), model.phi_d.eval(s))


def rom_param_jacobians(q, y, ydot, model: ReducedOrderModel
                        ) -> tuple[np.ndarray, np.ndarray]:
    """(dr/dtheta_e at q, dg/dtheta_d at (y, yd)); both exact and constant
    in theta by linearity of the parameterization."""
    return (embedding_param_jacobian(q, model),
            rom_dynamics_param_jacobian(y, ydot, model))


# ---------------------------------------------------------------------------
# canonical initializations

def _kin_feature_index(name: str, basis: FeatureBasis) -> int:
    return basis.descriptors.index(name)


def init_lip(robot: PlanarWalkerParams) -> ReducedOrderModel:
    """2D model seeded as the linear inverted pendulum: y = COM relative to
    the stance foot, ydd_1 = c_g y_1 / y_2, no input."""
    model = build_rom(robot, n_y=2, n_tau=0)
    theta_e = np.zeros((2, model.phi_e.size))
    theta_e[0, _kin_feature_index("com_rel_stance_x", model.phi_e)] = 1.0
    theta_e[1, _kin_feature_index("com_rel_stance_z", model.phi_e)] = 1.0
    theta_d = np.zeros((2, model.phi_d.size))
    theta_d[0, model.phi_d.descriptors.index("cg*y1/y2")] = 1.0
    return model.with_params(RomParams(theta_e=theta_e, theta_d=theta_d,
                                       B=np.zeros((2, 0))))


def init_lip_with_foot(robot: PlanarWalkerParams) -> ReducedOrderModel:
    """4D model seeded as an LIP plus a point-mass swing foot: y_3, y_4 are
    the swing foot relative to the COM and tau drives them directly."""
    model = build_rom(robot, n_y=4, n_tau=2)
    theta_e = np.zeros((4, model.phi_e.size))
    theta_e[0, _kin_feature_index("com_rel_stance_x", model.phi_e)] = 1.0
    theta_e[1, _kin_feature_index("com_rel_stance_z", model.phi_e)] = 1.0
    theta_e[2, _kin_feature_index("swing_rel_com_x", model.phi_e)] = 1.0
    theta_e[3, _kin_feature_index("swing_rel_com_z", model.phi_e)] = 1.0
    theta_d = np.zeros((4, model.phi_d.size))
    theta_d[0, model.phi_d.descriptors.index("cg*y1/y2")] = 1.0
    B = np.zeros((4, 2))
    B[2, 0] = 1.0
    B[3, 1] = 1.0
    return model.with_params(RomParams(theta_e=theta_e, theta_d=theta_d, B=B))


# ---------------------------------------------------------------------------
# serialization (exact decimal round-trip via repr floats)

def _float_list(arr: np.ndarray):
    return [repr(float(v)) for v in np.asarray(arr).ravel()]


def _parse_floats(vals, shape):
    arr = np.array([float(v) for v in vals], dtype=float)
    return arr.reshape(shape)


def save_model(model: ReducedOrderModel, path: str | Path) -> None:
    robot = model.robot
    doc = {
        "format_version": FORMAT_VERSION,
        "n_y": model.n_y,
        "n_tau": model.n_tau,
        "robot": {
            "torso_mass": robot.torso_mass,
            "torso_length": robot.torso_length,
            "limb_mass": robot.limb_mass,
            "limb_length": robot.limb_length,
            "link_inertias": list(robot.link_inertias),
            "gravity_accel": robot.gravity_accel,
            "torque_limit": robot.torque_limit,
            "friction_coeff": robot.friction_coeff,
            "incline": robot.incline,
        },
        "phi_e": list(model.phi_e.descriptors),
        "phi_d": list(model.phi_d.descriptors),
        "theta_e": _float_list(model.params.theta_e),
        "theta_d": _float_list(model.params.theta_d),
        "B": _float_list(model.params.B),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_model(path: str | Path) -> ReducedOrderModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model file version: "
                         f"{doc.get('format_version')!r}")
    rob = doc["robot"]
    robot = PlanarWalkerParams(
        torso_mass=rob["torso_mass"], torso_length=rob["torso_length"],
        limb_mass=rob["limb_mass"], limb_length=rob["limb_length"],
        link_inertias=tuple(rob["link_inertias"]),
        gravity_accel=rob["gravity_accel"],
        torque_limit=rob["torque_limit"],
        friction_coeff=rob["friction_coeff"], incline=rob["incline"])
    n_y, n_tau = doc["n_y"], doc["n_tau"]
    model = build_rom(robot, n_y=n_y, n_tau=n_tau)
    for key, basis in (("phi_e", model.phi_e), ("phi_d", model.phi_d)):
        if tuple(doc[key]) != basis.descriptors:
            raise ValueError(f"{key} descriptors in file do not match the "
                             "canonical basis enumeration")
    params = RomParams(
        theta_e=_parse_floats(doc["theta_e"], (n_y, model.phi_e.size)),
        theta_d=_parse_floats(doc["theta_d"], (n_y, model.phi_d.size)),
        B=_parse_floats(doc["B"], (n_y, n_tau)))
    return model.with_params(params)

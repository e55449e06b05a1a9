"""Planar five-link biped: rigid-body dynamics, contacts and hybrid events.

Model and conventions (all kinematics derive from these):

* Links: torso plus two identical legs, each a thigh and a shank modelled as
  uniform thin rods (inertia m*l^2/12 about the COM). Point feet.
* Generalized coordinates, q in R^7::

      q = [x_hip, z_hip, torso_pitch,
           left_hip, left_knee, right_hip, right_knee]

  (x_hip, z_hip) is the hip point where torso and both thighs meet. All
  angles are CCW-positive; torso pitch is measured from straight up, leg
  angles are relative to the parent link with zero pointing straight down.
  So q = 0 is the fully stacked pose: torso up, both legs down.
* Ground and inclines: the ground is always the plane z = 0 and walking on
  a slope is modelled by rotating gravity by the incline angle, i.e.
  a_g = g * (-sin(incline), -cos(incline)). This keeps contact geometry
  trivial for any slope.
* Contact force lambda = (f_x, f_z), a Cartesian force at the stance foot;
  the normal component is f_z.
* Single support only: exactly one stance leg at a time. Touchdown is a
  perfectly inelastic, no-slip impact, optionally followed by relabeling
  (swapping the leg coordinate blocks) so downstream code can always treat
  the left block as the stance leg.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import _derive

NQ = 7
NX = 2 * NQ
NU = 4
NLAM = 2

# actuation: the four leg joints; the floating base is unactuated
B_SEL = np.zeros((NQ, NU))
B_SEL[3:, :] = np.eye(NU)

_RELABEL_PERM = np.array([0, 1, 2, 5, 6, 3, 4])


class DegenerateContactError(RuntimeError):
    """Contact Jacobian is rank-deficient; the impact system is singular."""


class Leg(enum.Enum):
    LEFT = "left"
    RIGHT = "right"

    @property
    def other(self) -> "Leg":
        return Leg.RIGHT if self is Leg.LEFT else Leg.LEFT


@dataclass(frozen=True)
class ContactMode:
    """Which leg carries the ground contact (single support)."""

    stance_leg: Leg = Leg.LEFT

    @property
    def swing_leg(self) -> Leg:
        return self.stance_leg.other


@dataclass(frozen=True)
class PlanarWalkerParams:
    """Masses, geometry and limits of the five-link walker.

    ``link_inertias`` is (torso, limb) about each link COM; when omitted both
    default to the uniform thin-rod value m*l^2/12.
    """

    torso_mass: float = 10.0
    torso_length: float = 0.3
    limb_mass: float = 2.5
    limb_length: float = 0.5
    link_inertias: tuple[float, float] | None = None
    gravity_accel: float = 9.81
    torque_limit: float = 100.0
    friction_coeff: float = 0.8
    incline: float = 0.0

    def __post_init__(self):
        if self.link_inertias is None:
            rod = (
                self.torso_mass * self.torso_length**2 / 12.0,
                self.limb_mass * self.limb_length**2 / 12.0,
            )
            object.__setattr__(self, "link_inertias", rod)
        for name in ("torso_mass", "torso_length", "limb_mass", "limb_length",
                     "gravity_accel"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if any(i <= 0.0 for i in self.link_inertias):
            raise ValueError("link inertias must be strictly positive")
        if not abs(self.incline) < np.pi / 2:
            raise ValueError("incline must satisfy |incline| < pi/2")

    @property
    def total_mass(self) -> float:
        return self.torso_mass + 4.0 * self.limb_mass

    def param_vector(self) -> np.ndarray:
        """Flat parameter vector in the order the derived functions expect."""
        it, il = self.link_inertias
        return np.array([
            self.torso_mass, self.torso_length, it,
            self.limb_mass, self.limb_length, il,
            self.gravity_accel, self.incline,
        ])

    def with_incline(self, incline: float) -> "PlanarWalkerParams":
        return PlanarWalkerParams(
            torso_mass=self.torso_mass, torso_length=self.torso_length,
            limb_mass=self.limb_mass, limb_length=self.limb_length,
            link_inertias=self.link_inertias,
            gravity_accel=self.gravity_accel,
            torque_limit=self.torque_limit,
            friction_coeff=self.friction_coeff, incline=incline)


@dataclass
class FullState:
    """Full-order state x = (q, qdot)."""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(NQ)
        self.qdot = np.asarray(self.qdot, dtype=float).reshape(NQ)
        if not (np.isfinite(self.q).all() and np.isfinite(self.qdot).all()):
            raise ValueError("state entries must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "FullState":
        x = np.asarray(x, dtype=float).reshape(NX)
        return cls(q=x[:NQ], qdot=x[NQ:])


@dataclass
class ImpactResult:
    post_state: FullState
    impulse: np.ndarray  # (f_x, f_z) impulse on the new stance foot, N*s


# ---------------------------------------------------------------------------
# batched low-level accessors (shared with transcription / rom features)

def kin_terms(q, qdot, params: PlanarWalkerParams) -> dict:
    """Foot/COM positions, Jacobians and d(J qdot)/dq terms, batched."""
    return _derive.derived()["kin"](q, qdot, params.param_vector())


def mass_bias(q, qdot, params: PlanarWalkerParams) -> tuple[np.ndarray, np.ndarray]:
    out = _derive.derived()["dyn"](q, qdot, params.param_vector())
    return out["M"], out["bias"]


def dynjac_terms(q, qdot, qddot, lam, params: PlanarWalkerParams) -> dict:
    return _derive.derived()["dynjac"](q, qdot, qddot, lam,
                                       params.param_vector())


def energies(q, qdot, params: PlanarWalkerParams) -> tuple[np.ndarray, np.ndarray]:
    out = _derive.derived()["energy"](q, qdot, params.param_vector())
    return out["T"], out["V"]


# ---------------------------------------------------------------------------
# public operations

def mass_matrix(q: np.ndarray, params: PlanarWalkerParams) -> np.ndarray:
    """Configuration-dependent generalized mass matrix M(q), 7x7 SPD."""
    M, _ = mass_bias(q, np.zeros(NQ), params)
    return M


def bias_forces(q: np.ndarray, qdot: np.ndarray,
                params: PlanarWalkerParams) -> np.ndarray:
    """Coriolis/centrifugal plus gravity vector C(q, qdot) qdot + G(q)."""
    _, h = mass_bias(q, qdot, params)
    return h


def manipulator_residual(q, qdot, qddot, u, lam, mode: ContactMode,
                         params: PlanarWalkerParams) -> np.ndarray:
    """M qddot + C qdot + G - B u - J(q, mode)^T lambda; zero iff consistent."""
    M, h = mass_bias(q, qdot, params)
    J = contact_jacobian(q, mode, params)
    return M @ np.asarray(qddot, float) + h - B_SEL @ np.asarray(u, float) \
        - J.T @ np.asarray(lam, float)


def foot_position(q, leg: Leg, params: PlanarWalkerParams) -> np.ndarray:
    kin = kin_terms(q, np.zeros(NQ), params)
    return kin["foot_l"] if leg is Leg.LEFT else kin["foot_r"]


def foot_jacobian(q, leg: Leg, params: PlanarWalkerParams) -> np.ndarray:
    kin = kin_terms(q, np.zeros(NQ), params)
    return kin["J_l"] if leg is Leg.LEFT else kin["J_r"]


def com_position(q, params: PlanarWalkerParams) -> np.ndarray:
    return kin_terms(q, np.zeros(NQ), params)["com"]


def com_jacobian(q, params: PlanarWalkerParams) -> np.ndarray:
    return kin_terms(q, np.zeros(NQ), params)["J_com"]


def contact_jacobian(q, mode: ContactMode, params: PlanarWalkerParams) -> np.ndarray:
    """Jacobian of the stance-foot position map, 2x7."""
    return foot_jacobian(q, mode.stance_leg, params)


def relabel_q(q: np.ndarray) -> np.ndarray:
    """Swap the left/right leg coordinate blocks (kinematic mirror)."""
    return np.asarray(q, dtype=float)[_RELABEL_PERM]


def relabel(x: FullState) -> FullState:
    return FullState(q=relabel_q(x.q), qdot=relabel_q(x.qdot))


def guard_value(x: FullState, mode: ContactMode,
                params: PlanarWalkerParams) -> float:
    """Signed swing-foot height above the ground plane; zero at touchdown."""
    return float(foot_position(x.q, mode.swing_leg, params)[1])


def impact_map(x_minus: FullState, mode: ContactMode,
               params: PlanarWalkerParams) -> ImpactResult:
    """Inelastic no-slip touchdown of the swing foot, then leg relabeling.

    Solves M(q)(qdot+ - qdot-) = J^T Lambda with J qdot+ = 0 for the
    post-impact velocity and the touchdown impulse, where J is the swing-foot
    Jacobian. The returned state is relabeled so the new stance leg sits in
    the left coordinate block.
    """
    q, qd_minus = x_minus.q, x_minus.qdot
    M, _ = mass_bias(q, qd_minus, params)
    J = foot_jacobian(q, mode.swing_leg, params)
    kkt = np.zeros((NQ + NLAM, NQ + NLAM))
    kkt[:NQ, :NQ] = M
    kkt[:NQ, NQ:] = -J.T
    kkt[NQ:, :NQ] = J
    rhs = np.concatenate([M @ qd_minus, np.zeros(NLAM)])
    if np.linalg.cond(kkt) > 1e12:
        raise DegenerateContactError(
            "impact system is singular: contact Jacobian rank-deficient")
    sol = np.linalg.solve(kkt, rhs)
    qd_plus, impulse = sol[:NQ], sol[NQ:]
    post = relabel(FullState(q=q, qdot=qd_plus))
    return ImpactResult(post_state=post, impulse=impulse)


@dataclass
class PassiveSimResult:
    """Fixed-step passive simulation record (stance foot pinned)."""

    times: np.ndarray            # (N+1,)
    states: np.ndarray           # (N+1, 14)
    pin_forces: np.ndarray       # (N+1, 2) constraint force at each step start

    def state(self, i: int) -> FullState:
        return FullState.from_vector(self.states[i])


def _pinned_accel(q, qd, pin_point, mode, params, kp=400.0, kd=40.0):
    """qddot and constraint force of the unactuated pinned-foot dynamics.

    Baumgarte stabilization keeps the stance foot on its pin point.
    """
    M, h = mass_bias(q, qd, params)
    kin = kin_terms(q, qd, params)
    if mode.stance_leg is Leg.LEFT:
        pos, J, dv_dq = kin["foot_l"], kin["J_l"], kin["dvl_dq"]
    else:
        pos, J, dv_dq = kin["foot_r"], kin["J_r"], kin["dvr_dq"]
    jdot_qd = dv_dq @ qd
    kkt = np.zeros((NQ + NLAM, NQ + NLAM))
    kkt[:NQ, :NQ] = M
    kkt[:NQ, NQ:] = -J.T
    kkt[NQ:, :NQ] = J
    rhs = np.concatenate([
        -h,
        -jdot_qd - kd * (J @ qd) - kp * (pos - pin_point),
    ])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:NQ], sol[NQ:]


def simulate_passive(x0: FullState, mode: ContactMode, duration: float,
                     step: float, params: PlanarWalkerParams) -> PassiveSimResult:
    """RK4 integration of the unactuated dynamics with the stance foot pinned."""
    if step <= 0.0:
        raise ValueError("step must be positive")
    n_steps = int(round(duration / step))
    pin = foot_position(x0.q, mode.stance_leg, params)

    def xdot(x):
        q, qd = x[:NQ], x[NQ:]
        qdd, lam = _pinned_accel(q, qd, pin, mode, params)
        return np.concatenate([qd, qdd]), lam

    times = np.arange(n_steps + 1) * step
    states = np.empty((n_steps + 1, NX))
    forces = np.empty((n_steps + 1, NLAM))
    x = x0.as_vector().copy()
    for i in range(n_steps):
        states[i] = x
        k1, lam = xdot(x)
        forces[i] = lam
        k2, _ = xdot(x + 0.5 * step * k1)
        k3, _ = xdot(x + 0.5 * step * k2)
        k4, _ = xdot(x + step * k3)
        x = x + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    states[n_steps] = x
    _, forces[n_steps] = xdot(x)
    return PassiveSimResult(times=times, states=states, pin_forces=forces)


def total_energy(x: FullState, params: PlanarWalkerParams) -> float:
    t, v = energies(x.q, x.qdot, params)
    return float(t + v)


def kinetic_energy(q, qdot, params: PlanarWalkerParams) -> float:
    t, _ = energies(q, qdot, params)
    return float(t)

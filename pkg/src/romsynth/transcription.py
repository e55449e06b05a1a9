"""Direct collocation transcription of one periodic walking stride.

Decision vector (one stride of n knots, half-gait periodic)::

    w = [x_1..x_n (14 each), u_1..u_n (4), lam_1..lam_n (2),
         tau_1..tau_n (n_tau), delta_1..delta_{n-1}]

Constraint families, in build order (row ranges are deterministic):

* dynamics      -- cubic Hermite collocation of the stance-phase dynamics,
                   contact force interpolated linearly, 14 rows/interval
* rom           -- cubic collocation of the reduced dynamics through the
                   embedding, n_y rows/interval (optional: off for the
                   full-order lower bound)
* stance_pos    -- stance foot at the origin at knot 1
* stance_vel    -- stance-foot velocity zero at every knot
* periodicity   -- half-gait closure: relabeled positions match, relabeled
                   initial velocity equals the post-impact velocity of the
                   final state (touchdown impulse eliminated in closed form),
                   swing foot on the ground at the final knot
* stride        -- hip displacement = speed * stride_period; total time
* friction      -- |lam_x| <= mu lam_z per knot (inequalities)
* clearance     -- swing-foot height above a margin at mid-stride knots

Torque and time-interval limits and lam_z >= 0 are variable bounds. The
stance leg is always the left coordinate block; leg alternation lives in
the relabeling permutation inside the periodicity rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import rom as romlib
from .dynamics import ContactMode, Leg, PlanarWalkerParams
from .nlp import ConstraintBlock, EvaluationError, NlpProblem
from .rom import ReducedOrderModel

NX, NQ, NU, NLAM = dyn.NX, dyn.NQ, dyn.NU, dyn.NLAM

DELTA_MIN = 0.005
DELTA_MAX = 0.2
CLEARANCE_HEIGHT = 0.01


@dataclass(frozen=True)
class Task:
    """One inner-loop task: walk at a stride-averaged speed on an incline."""

    speed: float
    incline: float = 0.0
    cost_weights: tuple[float, float, float] = (0.1, 1.0, 0.1)  # qdot, u, tau
    stride_period: float = 0.7

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.stride_period <= 0:
            raise ValueError("stride_period must be positive")
        if any(wt < 0 for wt in self.cost_weights):
            raise ValueError("cost weights must be nonnegative")


@dataclass(frozen=True)
class DecisionLayout:
    """Index map of the stacked decision vector."""

    n_knots: int
    n_tau: int

    @property
    def n_w(self) -> int:
        n = self.n_knots
        return n * (NX + NU + NLAM + self.n_tau) + (n - 1)

    def x_slice(self, i: int) -> slice:
        return slice(i * NX, (i + 1) * NX)

    def u_slice(self, i: int) -> slice:
        base = self.n_knots * NX
        return slice(base + i * NU, base + (i + 1) * NU)

    def lam_slice(self, i: int) -> slice:
        base = self.n_knots * (NX + NU)
        return slice(base + i * NLAM, base + (i + 1) * NLAM)

    def tau_slice(self, i: int) -> slice:
        base = self.n_knots * (NX + NU + NLAM)
        return slice(base + i * self.n_tau, base + (i + 1) * self.n_tau)

    @property
    def delta_slice(self) -> slice:
        base = self.n_knots * (NX + NU + NLAM + self.n_tau)
        return slice(base, base + self.n_knots - 1)

    def unpack(self, w: np.ndarray) -> dict:
        """Views of w as batched arrays (component axis first, knots last)."""
        n = self.n_knots
        X = w[:n * NX].reshape(n, NX).T          # (14, n)
        U = w[self.u_slice(0).start:self.lam_slice(0).start].reshape(n, NU).T
        Lam = w[self.lam_slice(0).start:
                self.lam_slice(0).start + n * NLAM].reshape(n, NLAM).T
        if self.n_tau:
            Tau = w[self.tau_slice(0).start:
                    self.tau_slice(0).start + n * self.n_tau
                    ].reshape(n, self.n_tau).T
        else:
            Tau = np.zeros((0, n))
        delta = w[self.delta_slice]
        return {"Q": X[:NQ], "Qd": X[NQ:], "U": U, "Lam": Lam, "Tau": Tau,
                "delta": delta}


@dataclass(frozen=True)
class TrajOptSpec:
    """Recipe for one inner trajectory optimization."""

    task: Task
    model: ReducedOrderModel
    n_knots: int = 16
    include_rom_constraints: bool = True
    clearance_height: float = CLEARANCE_HEIGHT

    @property
    def layout(self) -> DecisionLayout:
        return DecisionLayout(n_knots=self.n_knots, n_tau=self.model.n_tau)

    @property
    def robot(self) -> PlanarWalkerParams:
        return self.model.robot.with_incline(self.task.incline)

    def clearance_knots(self) -> np.ndarray:
        n = self.n_knots
        idx = np.arange(n)
        return idx[(idx * 3 >= n) & (idx * 3 <= 2 * n)]


# ---------------------------------------------------------------------------
# single-interval residuals (the public, test-facing operations)

def rom_midpoint(y_i, y_ip1, yd_i, yd_ip1, delta):
    """Midpoint state of the cubic interpolant through two knots."""
    y_c = 0.5 * (y_i + y_ip1) + (delta / 8.0) * (yd_i - yd_ip1)
    yd_c = (1.5 / delta) * (y_ip1 - y_i) - 0.25 * (yd_i + yd_ip1)
    return y_c, yd_c


def rom_collocation_residual(x_i, x_ip1, tau_i, tau_ip1, delta,
                             model: ReducedOrderModel) -> np.ndarray:
    """Reduced-dynamics collocation defect on one interval.

    Knot values of (y, yd) come from the embedding of the full states; the
    residual is the gap between the cubic interpolant's (constant-in-time)
    midpoint acceleration and the reduced dynamics at the midpoint.
    """
    x_i = np.asarray(x_i, dtype=float)
    x_ip1 = np.asarray(x_ip1, dtype=float)
    q_i, qd_i = x_i[:NQ], x_i[NQ:]
    q_j, qd_j = x_ip1[:NQ], x_ip1[NQ:]
    y_i = romlib.eval_embedding(q_i, model)
    y_j = romlib.eval_embedding(q_j, model)
    yd_i = romlib.embedding_jacobian(q_i, model) @ qd_i
    yd_j = romlib.embedding_jacobian(q_j, model) @ qd_j
    y_c, yd_c = rom_midpoint(y_i, y_j, yd_i, yd_j, delta)
    tau_c = 0.5 * (np.asarray(tau_i, float) + np.asarray(tau_ip1, float))
    g_c = romlib.eval_rom_dynamics(y_c, yd_c, tau_c, model)
    return (yd_j - yd_i) / delta - g_c


def fullorder_collocation_residual(x_i, x_ip1, u_i, u_ip1, lam_i, lam_ip1,
                                   delta, params: PlanarWalkerParams,
                                   mode: ContactMode = ContactMode(Leg.LEFT)
                                   ) -> np.ndarray:
    """Hermite collocation defect of the pinned stance dynamics, 14 rows."""
    def f(x, u, lam):
        q, qd = x[:NQ], x[NQ:]
        M, h = dyn.mass_bias(q, qd, params)
        J = dyn.contact_jacobian(q, mode, params)
        qdd = np.linalg.solve(M, dyn.B_SEL @ u + J.T @ lam - h)
        return np.concatenate([qd, qdd])

    x_i = np.asarray(x_i, dtype=float)
    x_ip1 = np.asarray(x_ip1, dtype=float)
    u_i = np.asarray(u_i, dtype=float)
    u_ip1 = np.asarray(u_ip1, dtype=float)
    lam_i = np.asarray(lam_i, dtype=float)
    lam_ip1 = np.asarray(lam_ip1, dtype=float)
    f_i = f(x_i, u_i, lam_i)
    f_j = f(x_ip1, u_ip1, lam_ip1)
    x_c = 0.5 * (x_i + x_ip1) + (delta / 8.0) * (f_i - f_j)
    xdot_c = (1.5 / delta) * (x_ip1 - x_i) - 0.25 * (f_i + f_j)
    f_c = f(x_c, 0.5 * (u_i + u_ip1), 0.5 * (lam_i + lam_ip1))
    return xdot_c - f_c


# ---------------------------------------------------------------------------
# batched evaluation workspace

class _Workspace:
    """Per-w memo of the batched dynamics/kinematics/feature evaluations.

    The solver evaluates several constraint blocks (and their Jacobians) at
    the same iterate; this cache makes each shared quantity computed once.
    """

    def __init__(self, spec: TrajOptSpec, model: ReducedOrderModel):
        self.spec = spec
        self.model = model
        self.robot = spec.robot
        self._key = None
        self._data = None

    def at(self, w: np.ndarray, heavy: bool = False) -> dict:
        key = w.tobytes()
        if self._key != key:
            self._data = self._evaluate_light(np.asarray(w, dtype=float))
            self._key = key
        if heavy and "knot_jac" not in self._data:
            self._augment_heavy(self._data)
        return self._data

    # -- heavy lifting -------------------------------------------------------

    def _dyn_light(self, Q, Qd, U, Lam):
        """Forward dynamics at a batch of states (values only)."""
        robot = self.robot
        M, bias = dyn.mass_bias(Q, Qd, robot)           # (7,7,N), (7,N)
        kin = dyn.kin_terms(Q, Qd, robot)
        M_b = np.moveaxis(M, -1, 0)                      # (N,7,7)
        rhs = (dyn.B_SEL @ U + np.einsum("iqn,in->qn", kin["J_l"], Lam)
               - bias)                                   # (7,N)
        qdd = np.linalg.solve(M_b, np.moveaxis(rhs, -1, 0)[..., None])[..., 0]
        qdd = np.moveaxis(qdd, 0, -1)                    # (7,N)
        f = np.concatenate([Qd, qdd], axis=0)            # (14,N)
        return {"f": f, "kin": kin, "M": M_b, "qdd": qdd, "Q": Q, "Qd": Qd,
                "Lam": Lam}

    def _dyn_jac(self, light):
        """State/input/force Jacobians of the forward dynamics."""
        Q, Qd, Lam = light["Q"], light["Qd"], light["Lam"]
        M_b, kin, qdd = light["M"], light["kin"], light["qdd"]
        jac = dyn.dynjac_terms(Q, Qd, qdd, Lam, self.robot)
        # d(qdd)/dq = -M^{-1} (dM qdd/dq + dbias/dq - d(J^T lam)/dq)
        S = jac["dMqdd_dq"] + jac["dbias_dq"] - jac["dJTlam_l_dq"]
        dqdd_dq = -np.linalg.solve(M_b, np.moveaxis(S, -1, 0))
        dqdd_dqd = -np.linalg.solve(M_b, np.moveaxis(jac["dbias_dqd"], -1, 0))
        Minv_cols = np.linalg.solve(
            M_b, np.broadcast_to(np.eye(NQ), M_b.shape))
        dqdd_du = Minv_cols @ dyn.B_SEL                  # (N,7,4)
        JT = np.moveaxis(kin["J_l"], -1, 0).transpose(0, 2, 1)
        dqdd_dlam = Minv_cols @ JT                       # (N,7,2)
        N = Q.shape[1]
        A = np.zeros((N, NX, NX))
        A[:, :NQ, NQ:] = np.eye(NQ)
        A[:, NQ:, :NQ] = dqdd_dq
        A[:, NQ:, NQ:] = dqdd_dqd
        Bu = np.zeros((N, NX, NU))
        Bu[:, NQ:, :] = dqdd_du
        Bl = np.zeros((N, NX, NLAM))
        Bl[:, NQ:, :] = dqdd_dlam
        return {"A": A, "Bu": Bu, "Bl": Bl}

    def _evaluate_light(self, w):
        L = self.spec.layout
        parts = L.unpack(w)
        Q, Qd, U, Lam, Tau = (parts["Q"], parts["Qd"], parts["U"],
                              parts["Lam"], parts["Tau"])
        delta = parts["delta"]
        knot = self._dyn_light(Q, Qd, U, Lam)

        X = np.concatenate([Q, Qd], axis=0)              # (14,n)
        f = knot["f"]
        d = delta[None, :]
        Xc = 0.5 * (X[:, :-1] + X[:, 1:]) + (d / 8.0) * (f[:, :-1] - f[:, 1:])
        Uc = 0.5 * (U[:, :-1] + U[:, 1:])
        Lc = 0.5 * (Lam[:, :-1] + Lam[:, 1:])
        mid = self._dyn_light(Xc[:NQ], Xc[NQ:], Uc, Lc)

        data = {"parts": parts, "knot": knot, "mid": mid, "X": X, "Xc": Xc,
                "Uc": Uc, "Lc": Lc, "w": w}

        model = self.model
        phi = model.phi_e.eval(Q)                        # (n_e, n)
        phi_jac = model.phi_e.jac(Q)                     # (n_e, 7, n)
        theta_e = model.params.theta_e
        y = theta_e @ phi                                # (n_y, n)
        Jr = np.einsum("ef,fqn->eqn", theta_e, phi_jac)  # (n_y,7,n)
        yd = np.einsum("eqn,qn->en", Jr, Qd)
        dphi_qd = np.einsum("fqn,qn->fn", phi_jac, Qd)   # (n_e, n)
        y_c, yd_c = rom_midpoint(y[:, :-1], y[:, 1:], yd[:, :-1], yd[:, 1:],
                                 d)
        tau_c = 0.5 * (Tau[:, :-1] + Tau[:, 1:]) if model.n_tau else \
            np.zeros((0, delta.size))
        s_c = np.concatenate([y_c, yd_c], axis=0)
        phi_d = model.phi_d.eval(s_c)                    # (n_d, n-1)
        g_val = model.params.theta_d @ phi_d
        if model.n_tau:
            g_val = g_val + model.params.B @ tau_c
        data.update({"phi": phi, "dphi_qd": dphi_qd, "y": y, "yd": yd,
                     "Jr": Jr, "y_c": y_c, "yd_c": yd_c, "s_c": s_c,
                     "phi_d": phi_d, "g_val": g_val})
        return data

    def _augment_heavy(self, data):
        model = self.model
        parts = data["parts"]
        data["knot_jac"] = self._dyn_jac(data["knot"])
        data["mid_jac"] = self._dyn_jac(data["mid"])
        phi_vel = model.phi_e.vel_jac(parts["Q"], parts["Qd"])
        data["Hr"] = np.einsum("ef,fqn->eqn", model.params.theta_e, phi_vel)
        phi_d_jac = model.phi_d.jac(data["s_c"])         # (n_d, 2 n_y, n-1)
        A_s = np.einsum("df,fsn->dsn", model.params.theta_d, phi_d_jac)
        data["A_y"] = A_s[:, :model.n_y]
        data["A_yd"] = A_s[:, model.n_y:]


# ---------------------------------------------------------------------------
# constraint blocks

def _dynamics_block(ws: _Workspace) -> ConstraintBlock:
    L = ws.spec.layout
    n = L.n_knots

    def fun(w):
        data = ws.at(w)
        f, mid = data["knot"]["f"], data["mid"]["f"]
        X, delta = data["X"], data["parts"]["delta"]
        xdot_c = (1.5 / delta[None, :]) * (X[:, 1:] - X[:, :-1]) \
            - 0.25 * (f[:, :-1] + f[:, 1:])
        return (xdot_c - mid).T.ravel()

    def jac(w):
        data = ws.at(w, heavy=True)
        parts = data["parts"]
        delta = parts["delta"]
        f = data["knot"]["f"]
        A = data["knot_jac"]["A"]              # (n,14,14)
        Bu, Bl = data["knot_jac"]["Bu"], data["knot_jac"]["Bl"]
        Ac = data["mid_jac"]["A"]              # (n-1,14,14)
        Buc, Blc = data["mid_jac"]["Bu"], data["mid_jac"]["Bl"]
        X = data["X"]
        m = n - 1
        eye = np.eye(NX)
        d = delta[:, None, None]
        J = np.zeros((m, NX, L.n_w))
        A_i, A_j = A[:-1], A[1:]
        dx_i = -(1.5 / d) * eye - 0.25 * A_i - Ac @ (0.5 * eye + (d / 8) * A_i)
        dx_j = (1.5 / d) * eye - 0.25 * A_j - Ac @ (0.5 * eye - (d / 8) * A_j)
        du_i = -0.25 * Bu[:-1] - (d / 8) * (Ac @ Bu[:-1]) - 0.5 * Buc
        du_j = -0.25 * Bu[1:] + (d / 8) * (Ac @ Bu[1:]) - 0.5 * Buc
        dl_i = -0.25 * Bl[:-1] - (d / 8) * (Ac @ Bl[:-1]) - 0.5 * Blc
        dl_j = -0.25 * Bl[1:] + (d / 8) * (Ac @ Bl[1:]) - 0.5 * Blc
        ddelta = (1.5 / delta[None, :]**2) * (X[:, :-1] - X[:, 1:]) \
            - np.einsum("nij,jn->in", Ac, (f[:, :-1] - f[:, 1:]) / 8.0)
        for i in range(m):
            J[i, :, L.x_slice(i)] = dx_i[i]
            J[i, :, L.x_slice(i + 1)] = dx_j[i]
            J[i, :, L.u_slice(i)] = du_i[i]
            J[i, :, L.u_slice(i + 1)] = du_j[i]
            J[i, :, L.lam_slice(i)] = dl_i[i]
            J[i, :, L.lam_slice(i + 1)] = dl_j[i]
            J[i, :, L.delta_slice.start + i] = ddelta[:, i]
        return J.reshape(m * NX, L.n_w)

    return ConstraintBlock(name="dynamics", kind="eq", rows=(n - 1) * NX,
                           fun=fun, jac=jac)


def _rom_block(ws: _Workspace) -> ConstraintBlock:
    L = ws.spec.layout
    n = L.n_knots
    n_y = ws.model.n_y

    def fun(w):
        data = ws.at(w)
        yd, delta = data["yd"], data["parts"]["delta"]
        res = (yd[:, 1:] - yd[:, :-1]) / delta[None, :] - data["g_val"]
        return res.T.ravel()

    def jac(w):
        data = ws.at(w, heavy=True)
        delta = data["parts"]["delta"]
        y, yd = data["y"], data["yd"]
        Jr, Hr = data["Jr"], data["Hr"]
        A_y = np.moveaxis(data["A_y"], -1, 0)    # (m, n_y, n_y)
        A_yd = np.moveaxis(data["A_yd"], -1, 0)
        m = n - 1
        eye = np.eye(n_y)
        d = delta[:, None, None]
        dy_i = -0.5 * A_y + (1.5 / d) * A_yd
        dy_j = -0.5 * A_y - (1.5 / d) * A_yd
        dyd_i = -(1.0 / d) * eye - (d / 8) * A_y + 0.25 * A_yd
        dyd_j = (1.0 / d) * eye + (d / 8) * A_y + 0.25 * A_yd
        Jr_b = np.moveaxis(Jr, -1, 0)            # (n, n_y, 7)
        Hr_b = np.moveaxis(Hr, -1, 0)
        J = np.zeros((m, n_y, L.n_w))
        dyd = yd[:, 1:] - yd[:, :-1]
        ddelta = -dyd / delta[None, :]**2 \
            - np.einsum("mab,bm->am", A_y, (yd[:, :-1] - yd[:, 1:]) / 8.0) \
            - np.einsum("mab,bm->am", A_yd,
                        (1.5 / delta[None, :]**2) * (y[:, :-1] - y[:, 1:]))
        for i in range(m):
            dq_i = dy_i[i] @ Jr_b[i] + dyd_i[i] @ Hr_b[i]
            dq_j = dy_j[i] @ Jr_b[i + 1] + dyd_j[i] @ Hr_b[i + 1]
            dqd_i = dyd_i[i] @ Jr_b[i]
            dqd_j = dyd_j[i] @ Jr_b[i + 1]
            J[i, :, L.x_slice(i)] = np.hstack([dq_i, dqd_i])
            J[i, :, L.x_slice(i + 1)] = np.hstack([dq_j, dqd_j])
            if ws.model.n_tau:
                J[i, :, L.tau_slice(i)] = -0.5 * ws.model.params.B
                J[i, :, L.tau_slice(i + 1)] = -0.5 * ws.model.params.B
            J[i, :, L.delta_slice.start + i] = ddelta[:, i]
        return J.reshape(m * n_y, L.n_w)

    return ConstraintBlock(name="rom", kind="eq", rows=(n - 1) * n_y,
                           fun=fun, jac=jac)


def _stance_blocks(ws: _Workspace) -> list[ConstraintBlock]:
    L = ws.spec.layout
    n = L.n_knots

    def pos_fun(w):
        data = ws.at(w)
        return data["knot"]["kin"]["foot_l"][:, 0]

    def pos_jac(w):
        data = ws.at(w)
        J = np.zeros((2, L.n_w))
        J[:, L.x_slice(0)][:, :NQ] = data["knot"]["kin"]["J_l"][:, :, 0]
        return J

    def vel_fun(w):
        data = ws.at(w)
        kin = data["knot"]["kin"]
        Qd = data["parts"]["Qd"]
        return np.einsum("iqn,qn->in", kin["J_l"], Qd).T.ravel()

    def vel_jac(w):
        data = ws.at(w)
        kin = data["knot"]["kin"]
        J = np.zeros((n, 2, L.n_w))
        for i in range(n):
            J[i, :, L.x_slice(i)] = np.hstack([
                kin["dvl_dq"][:, :, i], kin["J_l"][:, :, i]])
        return J.reshape(2 * n, L.n_w)

    return [
        ConstraintBlock(name="stance_pos", kind="eq", rows=2,
                        fun=pos_fun, jac=pos_jac),
        ConstraintBlock(name="stance_vel", kind="eq", rows=2 * n,
                        fun=vel_fun, jac=vel_jac),
    ]


def _impact_elimination(q, qd, robot):
    """Post-impact velocity of the swing (right) foot touchdown and its
    derivatives, with the impulse eliminated through the contact solve."""
    M, _ = dyn.mass_bias(q, np.zeros(NQ), robot)
    kin = dyn.kin_terms(q, qd, robot)
    J = kin["J_r"]
    Minv = np.linalg.inv(M)
    S = J @ Minv @ J.T
    try:
        lam = -np.linalg.solve(S, J @ qd)
    except np.linalg.LinAlgError as exc:
        raise EvaluationError("degenerate touchdown contact geometry") from exc
    v = Minv @ (J.T @ lam)
    qd_plus = qd + v
    # derivative pieces, all contracted against the relevant vectors
    W1 = dyn.dynjac_terms(q, qd, v, lam, robot)["dMqdd_dq"]     # d(M v)/dq
    jt = dyn.dynjac_terms(q, qd, np.zeros(NQ), lam, robot)
    W2 = jt["dJTlam_r_dq"]                                      # d(J^T lam)/dq
    W3 = dyn.kin_terms(q, qd_plus, robot)["dvr_dq"]             # d(J qd+)/dq
    dlam_dq = -np.linalg.solve(S, W3 - J @ Minv @ W1 + J @ Minv @ W2)
    dqdp_dq = Minv @ (-W1 + W2 + J.T @ dlam_dq)
    P = np.eye(NQ) - Minv @ J.T @ np.linalg.solve(S, J)
    return qd_plus, dqdp_dq, P, lam


def _periodicity_block(ws: _Workspace) -> ConstraintBlock:
    """Half-gait closure: x_1 = Delta(x_n) with leg relabeling.

    Rows: 6 relabeled position matches (base x excluded; displacement is a
    separate row), 7 velocity rows through the inelastic touchdown of the
    final state, 1 guard row (swing foot on the ground at knot n).
    """
    L = ws.spec.layout
    n = L.n_knots
    perm = np.eye(NQ)[dyn._RELABEL_PERM]      # relabel(q) = perm @ q
    pos_rows = np.arange(1, NQ)               # all but base x

    def fun(w):
        data = ws.at(w)
        Q, Qd = data["parts"]["Q"], data["parts"]["Qd"]
        q1, qd1 = Q[:, 0], Qd[:, 0]
        qn, qdn = Q[:, -1], Qd[:, -1]
        qd_plus, _, _, _ = _impact_elimination(qn, qdn, ws.robot)
        pos = (perm @ q1 - qn)[pos_rows]
        vel = perm @ qd1 - qd_plus
        guard = data["knot"]["kin"]["foot_r"][1, -1]
        return np.concatenate([pos, vel, [guard]])

    def jac(w):
        data = ws.at(w)
        Q, Qd = data["parts"]["Q"], data["parts"]["Qd"]
        qn, qdn = Q[:, -1], Qd[:, -1]
        _, dqdp_dq, P, _ = _impact_elimination(qn, qdn, ws.robot)
        J = np.zeros((14, L.n_w))
        # positions
        J[:6, L.x_slice(0)][:, :NQ] = perm[pos_rows]
        J[:6, L.x_slice(n - 1)][:, :NQ] = -np.eye(NQ)[pos_rows]
        # velocities
        J[6:13, L.x_slice(0)][:, NQ:] = perm
        J[6:13, L.x_slice(n - 1)][:, :NQ] = -dqdp_dq
        J[6:13, L.x_slice(n - 1)][:, NQ:] = -P
        # guard
        J[13, L.x_slice(n - 1)][:NQ] = data["knot"]["kin"]["J_r"][1, :, -1]
        return J

    return ConstraintBlock(name="periodicity", kind="eq", rows=14,
                           fun=fun, jac=jac)


def _stride_block(ws: _Workspace) -> ConstraintBlock:
    L = ws.spec.layout
    n = L.n_knots
    task = ws.spec.task

    def fun(w):
        data = ws.at(w)
        Q = data["parts"]["Q"]
        delta = data["parts"]["delta"]
        return np.array([
            Q[0, -1] - Q[0, 0] - task.speed * task.stride_period,
            delta.sum() - task.stride_period,
        ])

    def jac(w):
        J = np.zeros((2, L.n_w))
        J[0, L.x_slice(n - 1).start] = 1.0
        J[0, L.x_slice(0).start] = -1.0
        J[1, L.delta_slice] = 1.0
        return J

    return ConstraintBlock(name="stride", kind="eq", rows=2, fun=fun, jac=jac)


def _friction_block(ws: _Workspace) -> ConstraintBlock:
    L = ws.spec.layout
    n = L.n_knots
    mu = ws.robot.friction_coeff

    def fun(w):
        data = ws.at(w)
        Lam = data["parts"]["Lam"]
        return np.concatenate([
            Lam[0] - mu * Lam[1],
            -Lam[0] - mu * Lam[1],
        ])

    def jac(w):
        J = np.zeros((2 * n, L.n_w))
        for i in range(n):
            s = L.lam_slice(i).start
            J[i, s] = 1.0
            J[i, s + 1] = -mu
            J[n + i, s] = -1.0
            J[n + i, s + 1] = -mu
        return J

    return ConstraintBlock(name="friction", kind="ineq", rows=2 * n,
                           fun=fun, jac=jac)


def _clearance_block(ws: _Workspace) -> ConstraintBlock:
    L = ws.spec.layout
    knots = ws.spec.clearance_knots()
    h_min = ws.spec.clearance_height

    def fun(w):
        data = ws.at(w)
        foot_z = data["knot"]["kin"]["foot_r"][1]
        return h_min - foot_z[knots]

    def jac(w):
        data = ws.at(w)
        J = np.zeros((knots.size, L.n_w))
        for r, i in enumerate(knots):
            J[r, L.x_slice(i)][:NQ] = -data["knot"]["kin"]["J_r"][1, :, i]
        return J

    return ConstraintBlock(name="clearance", kind="ineq", rows=knots.size,
                           fun=fun, jac=jac)


# ---------------------------------------------------------------------------
# cost

def _cost_functions(ws: _Workspace):
    L = ws.spec.layout
    n = L.n_knots
    wq, wu, wt = ws.spec.task.cost_weights

    def knot_costs(parts):
        return (wq * (parts["Qd"]**2).sum(axis=0)
                + wu * (parts["U"]**2).sum(axis=0)
                + wt * (parts["Tau"]**2).sum(axis=0))

    def trapezoid_weights(delta):
        c = np.zeros(n)
        c[:-1] += 0.5 * delta
        c[1:] += 0.5 * delta
        return c

    def cost(w):
        parts = L.unpack(w)
        h = knot_costs(parts)
        delta = parts["delta"]
        c = trapezoid_weights(delta)
        value = float(c @ h)
        grad = np.zeros(L.n_w)
        for i in range(n):
            grad[L.x_slice(i)][NQ:] = 2 * wq * c[i] * parts["Qd"][:, i]
            grad[L.u_slice(i)] = 2 * wu * c[i] * parts["U"][:, i]
            if L.n_tau:
                grad[L.tau_slice(i)] = 2 * wt * c[i] * parts["Tau"][:, i]
        grad[L.delta_slice] = 0.5 * (h[:-1] + h[1:])
        return value, grad

    def cost_hessian(w):
        # exact Gauss-Newton of the least-squares form of the trapezoid
        # cost: r_{ik} = sqrt(c_i w_k) v_{ik}, H = 2 J_r^T J_r (PSD, couples
        # the time intervals to the knot states)
        parts = L.unpack(w)
        c = np.maximum(trapezoid_weights(parts["delta"]), 1e-8)
        channels = [(parts["Qd"], wq, lambda i: slice(
            L.x_slice(i).start + NQ, L.x_slice(i).stop))]
        channels.append((parts["U"], wu, L.u_slice))
        if L.n_tau:
            channels.append((parts["Tau"], wt, L.tau_slice))
        rows = sum(v.shape[0] for v, _, _ in channels) * n
        Jr = np.zeros((rows, L.n_w))
        r = 0
        for i in range(n):
            sqc = np.sqrt(c[i])
            for v, wk, sl in channels:
                k = v.shape[0]
                if wk == 0.0 or k == 0:
                    r += k
                    continue
                sqw = np.sqrt(wk)
                idx = np.arange(sl(i).start, sl(i).stop)
                Jr[np.arange(r, r + k), idx] = sqc * sqw
                dcdd = np.zeros(n - 1)
                if i > 0:
                    dcdd[i - 1] = 0.5
                if i < n - 1:
                    dcdd[i] = 0.5
                Jr[r:r + k, L.delta_slice] = np.outer(
                    sqw * v[:, i] / (2.0 * sqc), dcdd)
                r += k
        return 2.0 * (Jr.T @ Jr)

    return cost, cost_hessian


# ---------------------------------------------------------------------------
# assembly

@dataclass
class BuiltTrajOpt:
    """A transcribed stride problem with its metadata."""

    problem: NlpProblem
    spec: TrajOptSpec
    model: ReducedOrderModel
    workspace: _Workspace

    @property
    def layout(self) -> DecisionLayout:
        return self.spec.layout

    def row_ranges(self) -> dict[str, tuple[int, int]]:
        return self.problem.block_ranges()


def build_problem(spec: TrajOptSpec, theta: np.ndarray | None = None
                  ) -> BuiltTrajOpt:
    """Assemble the stride NLP for a task and model parameters."""
    model = spec.model if theta is None else spec.model.with_flat_theta(theta)
    ws = _Workspace(spec, model)
    blocks = [_dynamics_block(ws)]
    if spec.include_rom_constraints:
        blocks.append(_rom_block(ws))
    blocks.extend(_stance_blocks(ws))
    blocks.append(_periodicity_block(ws))
    blocks.append(_stride_block(ws))
    blocks.append(_friction_block(ws))
    blocks.append(_clearance_block(ws))

    L = spec.layout
    robot = spec.robot
    lower = np.full(L.n_w, -np.inf)
    upper = np.full(L.n_w, np.inf)
    for i in range(spec.n_knots):
        lower[L.u_slice(i)] = -robot.torque_limit
        upper[L.u_slice(i)] = robot.torque_limit
        lower[L.lam_slice(i).start + 1] = 0.0   # unilateral normal force
    lower[L.delta_slice] = DELTA_MIN
    upper[L.delta_slice] = DELTA_MAX

    cost, cost_hessian = _cost_functions(ws)
    problem = NlpProblem(dim=L.n_w, cost=cost, constraint_blocks=blocks,
                         lower=lower, upper=upper, cost_hessian=cost_hessian)
    return BuiltTrajOpt(problem=problem, spec=spec, model=model, workspace=ws)


def theta_jacobian(built: BuiltTrajOpt, w: np.ndarray,
                   rows: np.ndarray | None = None) -> np.ndarray:
    """d(constraint residuals)/d(theta) at fixed w, shape (rows, n_t).

    Only the reduced-dynamics collocation rows depend on theta; every other
    row (full-order dynamics, stance, friction, bounds) is identically zero.
    """
    model = built.model
    L = built.layout
    n = L.n_knots
    n_y = model.n_y
    data = built.workspace.at(np.asarray(w, dtype=float), heavy=True)
    G = np.zeros((built.problem.total_rows, model.n_theta))
    if built.spec.include_rom_constraints:
        start, stop = built.row_ranges()["rom"]
        delta = data["parts"]["delta"]
        phi, dphi_qd = data["phi"], data["dphi_qd"]
        A_y = np.moveaxis(data["A_y"], -1, 0)
        A_yd = np.moveaxis(data["A_yd"], -1, 0)
        n_e = model.phi_e.size
        n_d = model.phi_d.size
        eye = np.eye(n_y)
        for i in range(n - 1):
            d = delta[i]
            dy_i = -0.5 * A_y[i] + (1.5 / d) * A_yd[i]
            dy_j = -0.5 * A_y[i] - (1.5 / d) * A_yd[i]
            dyd_i = -(1.0 / d) * eye - (d / 8) * A_y[i] + 0.25 * A_yd[i]
            dyd_j = (1.0 / d) * eye + (d / 8) * A_y[i] + 0.25 * A_yd[i]
            # d rho / d Theta_e[k, m] = drho/dy_knot e_k phi_m + ...
            block_e = (
                np.einsum("ak,m->akm", dy_i, phi[:, i])
                + np.einsum("ak,m->akm", dy_j, phi[:, i + 1])
                + np.einsum("ak,m->akm", dyd_i, dphi_qd[:, i])
                + np.einsum("ak,m->akm", dyd_j, dphi_qd[:, i + 1])
            ).reshape(n_y, n_y * n_e)
            block_d = np.kron(-eye, data["phi_d"][:, i])
            G[start + i * n_y: start + (i + 1) * n_y, :n_y * n_e] = block_e
            G[start + i * n_y: start + (i + 1) * n_y, n_y * n_e:] = block_d
    if rows is not None:
        return G[np.asarray(rows, dtype=int)]
    return G


# ---------------------------------------------------------------------------
# initial guess

def _two_link_ik(hip: np.ndarray, foot: np.ndarray, limb: float
                 ) -> tuple[float, float]:
    """Absolute thigh/shank angles placing the foot; knee folds backward."""
    v = foot - hip
    dist = min(np.hypot(v[0], v[1]), 2 * limb * 0.98)
    psi = np.arctan2(v[0], -v[1])  # angle of the hip->foot ray from down
    beta = np.arccos(np.clip(dist / (2 * limb), -1.0, 1.0))
    return psi + beta, psi - beta


def initial_guess(spec: TrajOptSpec) -> np.ndarray:
    """Kinematic seed: hip sweeps the stride, swing foot follows a sine arc,
    legs placed by two-link inverse kinematics, torques and contact forces
    from per-knot inverse dynamics of the seed motion, uniform time grid."""
    L = spec.layout
    n = spec.n_knots
    task = spec.task
    robot = spec.robot
    limb = robot.limb_length
    stride = task.speed * task.stride_period
    hip_height = 0.9 * (2 * limb)

    s = np.linspace(0.0, 1.0, n)
    hip_x = -stride / 2 + stride * s
    swing_x = -stride + 2 * stride * s
    swing_z = 0.05 * np.sin(np.pi * s)

    Q = np.zeros((NQ, n))
    for i in range(n):
        hip = np.array([hip_x[i], hip_height])
        th_st, sh_st = _two_link_ik(hip, np.array([0.0, 0.0]), limb)
        th_sw, sh_sw = _two_link_ik(hip, np.array([swing_x[i], swing_z[i]]),
                                    limb)
        Q[:, i] = [hip_x[i], hip_height, 0.0,
                   th_st, sh_st - th_st, th_sw, sh_sw - th_sw]

    dt = task.stride_period / (n - 1)
    Qd = np.gradient(Q, dt, axis=1)
    Qdd = np.gradient(Qd, dt, axis=1)

    w = np.zeros(L.n_w)
    weight = robot.total_mass * robot.gravity_accel * np.array(
        [np.sin(robot.incline), np.cos(robot.incline)])
    for i in range(n):
        w[L.x_slice(i)] = np.concatenate([Q[:, i], Qd[:, i]])
        # inverse dynamics of the seed motion: best-fit (u, lambda)
        M, h = dyn.mass_bias(Q[:, i], Qd[:, i], robot)
        J = dyn.kin_terms(Q[:, i], Qd[:, i], robot)["J_l"]
        A = np.hstack([dyn.B_SEL, J.T])
        sol, *_ = np.linalg.lstsq(A, M @ Qdd[:, i] + h, rcond=None)
        u_i = np.clip(sol[:NU], -robot.torque_limit, robot.torque_limit)
        lam_i = sol[NU:]
        if lam_i[1] < 0.2 * weight[1]:
            lam_i = weight
        w[L.u_slice(i)] = u_i
        w[L.lam_slice(i)] = lam_i
    w[L.delta_slice] = dt
    return w

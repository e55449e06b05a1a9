"""Symbolic derivation of the five-link walker's equations of motion.

Everything downstream (mass matrix, bias forces, contact Jacobians, their
derivatives) is generated here with sympy and lambdified into vectorized
numpy callables. Keeping the robot parameters symbolic means one derivation
serves every parameter set, including varying ground inclines.

The derivation takes ~15 s, so the generated numpy source is cached on disk
(keyed by a hash of this file and the sympy/numpy versions); subsequent
processes import it directly.

Generated callables accept a trailing batch axis: pass q with shape (7,) or
(7, N) and outputs gain a trailing (N,) axis.
"""

from __future__ import annotations

import functools
import hashlib
import importlib.util
import inspect
import os
import pathlib

import numpy as np
import sympy as sp

# Parameter vector layout shared with dynamics.PlanarWalkerParams.param_vector():
# (torso_mass, torso_length, torso_inertia, limb_mass, limb_length,
#  limb_inertia, gravity_accel, incline)
N_PARAMS = 8

_Q = sp.symbols("q0:7", real=True)
_QD = sp.symbols("qd0:7", real=True)
_QDD = sp.symbols("qdd0:7", real=True)
_LAM = sp.symbols("lam0:2", real=True)
_P = sp.symbols("mt lt It ml ll Il cg alpha", real=True)

# (name, shape) of every exported quantity, per lambdified group
GROUP_SPECS = {
    "kin": [
        ("foot_l", (2,)), ("foot_r", (2,)),
        ("J_l", (2, 7)), ("J_r", (2, 7)),
        ("dvl_dq", (2, 7)), ("dvr_dq", (2, 7)),
        ("com", (2,)), ("J_com", (2, 7)), ("dvcom_dq", (2, 7)),
    ],
    "dyn": [("M", (7, 7)), ("bias", (7,))],
    "dynjac": [
        ("dMqdd_dq", (7, 7)), ("dbias_dq", (7, 7)), ("dbias_dqd", (7, 7)),
        ("dJTlam_l_dq", (7, 7)), ("dJTlam_r_dq", (7, 7)),
    ],
    "energy": [("T", ()), ("V", ())],
}

# flat scalar argument counts per group
GROUP_NARGS = {"kin": 22, "dyn": 22, "dynjac": 31, "energy": 22}


def _leg_dir(phi):
    # unit vector of a leg link, CCW-positive absolute angle from straight down
    return sp.Matrix([sp.sin(phi), -sp.cos(phi)])


def _build_model():
    """Symbolic positions, energies and contact points of the five links."""
    mt, lt, It, ml, ll, Il, cg, alpha = _P
    q = sp.Matrix(_Q)
    qd = sp.Matrix(_QD)

    hip = sp.Matrix([q[0], q[1]])
    torso_dir = sp.Matrix([-sp.sin(q[2]), sp.cos(q[2])])  # from +z, CCW

    phi_lt = q[2] + q[3]          # left thigh absolute angle
    phi_ls = q[2] + q[3] + q[4]   # left shank
    phi_rt = q[2] + q[5]
    phi_rs = q[2] + q[5] + q[6]

    knee_l = hip + ll * _leg_dir(phi_lt)
    knee_r = hip + ll * _leg_dir(phi_rt)
    foot_l = knee_l + ll * _leg_dir(phi_ls)
    foot_r = knee_r + ll * _leg_dir(phi_rs)

    links = [
        # (mass, inertia, com position, angular rate)
        (mt, It, hip + (lt / 2) * torso_dir, qd[2]),
        (ml, Il, hip + (ll / 2) * _leg_dir(phi_lt), qd[2] + qd[3]),
        (ml, Il, knee_l + (ll / 2) * _leg_dir(phi_ls), qd[2] + qd[3] + qd[4]),
        (ml, Il, hip + (ll / 2) * _leg_dir(phi_rt), qd[2] + qd[5]),
        (ml, Il, knee_r + (ll / 2) * _leg_dir(phi_rs), qd[2] + qd[5] + qd[6]),
    ]

    # gravity rotated by the incline: the ground plane stays z = 0
    grav = cg * sp.Matrix([-sp.sin(alpha), -sp.cos(alpha)])

    T = sp.S.Zero
    V = sp.S.Zero
    total_mass = sp.S.Zero
    com = sp.zeros(2, 1)
    for m, inertia, pos, omega in links:
        vel = pos.jacobian(q) * qd
        T += m * (vel.T * vel)[0, 0] / 2 + inertia * omega**2 / 2
        V += -m * (grav.T * pos)[0, 0]
        com += m * pos
        total_mass += m
    com = com / total_mass

    return {
        # expand once so downstream jacobians stay cheap; full trig
        # simplification is far slower than letting lambdify's CSE dedupe
        "T": sp.expand_trig(sp.expand(T)),
        "V": V,
        "com": com,
        "foot_l": foot_l,
        "foot_r": foot_r,
        "q": q,
        "qd": qd,
    }


def _flatten(mats):
    out = []
    for m in mats:
        if isinstance(m, sp.MatrixBase):
            out.extend(list(m))
        else:
            out.append(m)
    return out


def _symbolic_groups():
    """Flat expression lists for each group, aligned with GROUP_SPECS."""
    model = _build_model()
    q, qd = model["q"], model["qd"]
    qdd = sp.Matrix(_QDD)
    lam = sp.Matrix(_LAM)
    T, V = model["T"], model["V"]

    M = sp.hessian(T, _QD)
    dT_dqd = sp.Matrix([T]).jacobian(qd)           # 1 x 7
    bias = dT_dqd.jacobian(q) * qd - sp.Matrix([T]).jacobian(q).T \
        + sp.Matrix([V]).jacobian(q).T

    foot_l, foot_r, com = model["foot_l"], model["foot_r"], model["com"]
    J_l = foot_l.jacobian(q)
    J_r = foot_r.jacobian(q)
    J_com = com.jacobian(q)

    exprs = {
        "kin": [foot_l, foot_r, J_l, J_r,
                (J_l * qd).jacobian(q), (J_r * qd).jacobian(q),
                com, J_com, (J_com * qd).jacobian(q)],
        "dyn": [M, bias],
        "dynjac": [(M * qdd).jacobian(q), bias.jacobian(q), bias.jacobian(qd),
                   (J_l.T * lam).jacobian(q), (J_r.T * lam).jacobian(q)],
        "energy": [sp.Matrix([T]), sp.Matrix([V])],
    }
    args = {
        "kin": _Q + _QD + _P,
        "dyn": _Q + _QD + _P,
        "dynjac": _Q + _QD + _QDD + _LAM + _P,
        "energy": _Q + _QD + _P,
    }
    return {name: (args[name], _flatten(exprs[name])) for name in exprs}


class _Group:
    """Wraps a generated flat-output function with shaping and batching."""

    def __init__(self, fn, spec):
        self._fn = fn
        self.names = [n for n, _ in spec]
        self.shapes = dict(spec)
        self._sizes = [int(np.prod(s)) if s else 1 for _, s in spec]

    def __call__(self, *arrays):
        flat = []
        batch = ()
        for a in arrays:
            a = np.asarray(a, dtype=float)
            if a.ndim > 1:
                batch = np.broadcast_shapes(batch, a.shape[1:])
            flat.extend(a[i] for i in range(a.shape[0]))
        vals = self._fn(*flat)
        out = {}
        k = 0
        for name, size in zip(self.names, self._sizes):
            chunk = vals[k:k + size]
            k += size
            if batch:
                arr = np.stack(
                    [np.broadcast_to(np.asarray(v, dtype=float), batch)
                     for v in chunk], axis=0)
            else:
                arr = np.array([float(v) for v in chunk])
            out[name] = arr.reshape(self.shapes[name] + batch)
        return out


def _cache_path() -> pathlib.Path:
    src = pathlib.Path(__file__).read_bytes()
    key = hashlib.sha256(
        src + sp.__version__.encode() + np.__version__.encode()
    ).hexdigest()[:16]
    root = pathlib.Path(
        os.environ.get("XDG_CACHE_HOME", pathlib.Path.home() / ".cache")
    ) / "romsynth"
    return root / f"walker_dynamics_{key}.py"


def _generate_source() -> str:
    chunks = [
        "# Auto-generated by romsynth._derive; do not edit.\n"
        "from numpy import *  # noqa: F401,F403\n"
    ]
    for name, (args, exprs) in _symbolic_groups().items():
        fn = sp.lambdify(args, exprs, modules="numpy", cse=True)
        src = inspect.getsource(fn)
        src = src.replace("def _lambdifygenerated(", f"def {name}(", 1)
        chunks.append(src)
    return "\n\n".join(chunks)


def _load_module(path: pathlib.Path):
    spec = importlib.util.spec_from_file_location("romsynth._walker_gen", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@functools.lru_cache(maxsize=1)
def derived() -> dict[str, _Group]:
    """Lambdified dynamics/kinematics bundles (disk-cached numpy source)."""
    path = _cache_path()
    if not path.exists():
        source = _generate_source()
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp{os.getpid()}")
            tmp.write_text(source)
            tmp.replace(path)
        except OSError:
            # read-only cache dir: fall back to exec'ing in memory
            namespace: dict = {}
            exec(compile(source, "<romsynth-generated>", "exec"), namespace)
            return {n: _Group(namespace[n], GROUP_SPECS[n]) for n in GROUP_SPECS}
    mod = _load_module(path)
    return {n: _Group(getattr(mod, n), GROUP_SPECS[n]) for n in GROUP_SPECS}

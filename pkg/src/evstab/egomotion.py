"""Translation direction from sparse optical flow.

Flow at a normalized image point ``x`` under camera velocity ``V`` and angular
velocity ``w`` is ``f = A(x) V rho + B(x) w`` with ``rho`` the inverse depth.

ERL-V assumes ``w = 0``. Eliminating ``rho`` per sample by least squares leaves
the residual of ``f`` orthogonal to ``a = A(x) V``::

    r_i(V) = (a_perp . f_i) / |a_i|,   a_perp = (-a_y, a_x)

so the problem is a weighted sum of squares over the unit sphere. The solver
seeds from a 642-vertex icosphere, refines with Gauss-Newton in the tangent
plane, and reweights with a Cauchy kernel (IRLS). ``erl_full_solve`` also
estimates ``w``, seeding it per sphere direction in closed form and refining
both jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import CameraModel, pixel_to_normalized
from .errors import DegenerateGeometry, InsufficientFlow, LengthMismatch
from .flow import FlowSet

CAUCHY_C = 2.3849
MAD_TO_SIGMA = 1.4826
# lower bound on the IRLS scale, relative to the RMS flow; exact inliers give MAD = 0
SCALE_FLOOR = 1e-6


@dataclass
class SolverOptions:
    irls_rounds: int = 5
    cauchy_c: float = CAUCHY_C
    gn_max_iter: int = 30
    gn_step_tol: float = 1e-10
    icosphere_level: int = 3
    degeneracy_cond: float = 1e8


@dataclass
class VelocityEstimate:
    V: np.ndarray
    residual: float
    weights: np.ndarray
    inverse_depths: np.ndarray
    iterations: int

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)


@dataclass
class FullMotionEstimate:
    V: np.ndarray
    omega: np.ndarray
    residual: float
    weights: np.ndarray
    inverse_depths: np.ndarray = field(default_factory=lambda: np.empty(0))
    iterations: int = 0


def sensitivity_A(x) -> np.ndarray:
    """Translational block of the interaction matrix at a normalized point."""
    x = np.asarray(x, dtype=float)
    return np.array([[-1.0, 0.0, x[0]], [0.0, -1.0, x[1]]])


def sensitivity_B(x) -> np.ndarray:
    """Rotational block of the interaction matrix at a normalized point."""
    px, py = float(x[0]), float(x[1])
    return np.array([[px * py, -(1.0 + px * px), py], [1.0 + py * py, -px * py, -px]])


def motion_field(xn: np.ndarray, V, rho: np.ndarray, omega=None) -> np.ndarray:
    """Flow (N, 2) in normalized units at points (N, 2)."""
    xn = np.asarray(xn, dtype=float)
    V = np.asarray(V, dtype=float)
    x, y = xn[:, 0], xn[:, 1]
    u = (-V[0] + x * V[2]) * rho
    v = (-V[1] + y * V[2]) * rho
    if omega is not None:
        wx, wy, wz = omega
        u = u + x * y * wx - (1.0 + x * x) * wy + y * wz
        v = v + (1.0 + y * y) * wx - x * y * wy - x * wz
    return np.stack([u, v], axis=1)


@lru_cache(maxsize=4)
def icosphere(level: int = 3) -> np.ndarray:
    """Unit vertices of a subdivided icosahedron (10 * 4**level + 2 of them)."""
    p = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
        (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
        (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    out = np.array(verts)
    out.setflags(write=False)
    return out


# --- ERL-V ------------------------------------------------------------------


def constraint_rows(xn: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Rows c_i with a_perp(V) . f_i = c_i . V."""
    x, y = xn[:, 0], xn[:, 1]
    u, v = f[:, 0], f[:, 1]
    return np.stack([-v, u, x * v - y * u], axis=1)


def _a_norm2(xn: np.ndarray, V: np.ndarray) -> np.ndarray:
    """|A(x_i) V|^2; V may be (3,) or (3, M) giving (N,) or (N, M)."""
    x, y = xn[:, 0], xn[:, 1]
    if V.ndim == 1:
        ax = -V[0] + x * V[2]
        ay = -V[1] + y * V[2]
    else:
        ax = -V[0][None, :] + x[:, None] * V[2][None, :]
        ay = -V[1][None, :] + y[:, None] * V[2][None, :]
    return ax * ax + ay * ay


# guards |a| -> 0 for samples sitting on the focus of expansion
_A_EPS = 1e-12


def erlv_residuals(xn: np.ndarray, f: np.ndarray, V: np.ndarray) -> np.ndarray:
    return (constraint_rows(xn, f) @ V) / np.sqrt(_a_norm2(xn, V) + _A_EPS)


def _residuals_and_jacobian(C, xn, V, E):
    """Residuals r_i and their Jacobian w.r.t. a tangent step V + E d."""
    x, y = xn[:, 0], xn[:, 1]
    ax = -V[0] + x * V[2]
    ay = -V[1] + y * V[2]
    na2 = ax * ax + ay * ay + _A_EPS
    na = np.sqrt(na2)
    n = C @ V
    r = n / na
    # d|a|/dV = A^T a / |a|
    Ata = np.stack([-ax, -ay, x * ax + y * ay], axis=1)
    dr = C / na[:, None] - (n / (na2 * na))[:, None] * Ata
    return r, dr @ E


def _tangent_basis(V: np.ndarray) -> np.ndarray:
    vx, vy, vz = V
    # cross with e_x, or e_y when V is close to e_x
    e1 = np.array([0.0, vz, -vy]) if abs(vx) < 0.9 else np.array([-vz, 0.0, vx])
    e1 /= math.sqrt(e1 @ e1)
    e2 = np.array([vy * e1[2] - vz * e1[1], vz * e1[0] - vx * e1[2], vx * e1[1] - vy * e1[0]])
    return np.column_stack([e1, e2])


def _solve2(J: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Least-squares step for a 2-column Jacobian via the normal equations."""
    a = J[:, 0] @ J[:, 0]
    b = J[:, 0] @ J[:, 1]
    d = J[:, 1] @ J[:, 1]
    g0 = J[:, 0] @ r
    g1 = J[:, 1] @ r
    det = a * d - b * b
    if not det > 1e-300 * max(a * d, 1e-300):
        return np.linalg.lstsq(J, r, rcond=None)[0]
    return np.array([(d * g0 - b * g1) / det, (a * g1 - b * g0) / det])


def _grid_seed(C, xn, w2, level) -> np.ndarray:
    dirs = icosphere(level).T  # (3, M)
    num = C @ dirs
    cost = (w2[:, None] * num * num / (_a_norm2(xn, dirs) + _A_EPS)).sum(axis=0)
    return dirs[:, int(np.argmin(cost))].copy()


def _robust_grid_seed(C, xn, level) -> np.ndarray:
    """Icosphere direction with the least median absolute residual."""
    dirs = icosphere(level).T
    r = np.abs(C @ dirs) / np.sqrt(_a_norm2(xn, dirs) + _A_EPS)
    return dirs[:, int(np.argmin(np.median(r, axis=0)))].copy()


def _cost(C, xn, w2, V) -> float:
    n = C @ V
    return float(np.sum(w2 * n * n / (_a_norm2(xn, V) + _A_EPS)))


def _refine_sphere(C, xn, w, V, max_iter, step_tol) -> tuple[np.ndarray, int]:
    """Gauss-Newton on the unit sphere with step halving."""
    w2 = w * w
    cost = _cost(C, xn, w2, V)
    it = 0
    for it in range(1, max_iter + 1):
        E = _tangent_basis(V)
        r, J = _residuals_and_jacobian(C, xn, V, E)
        Jw = J * w[:, None]
        rw = r * w
        d = _solve2(Jw, -rw)
        step = float(np.linalg.norm(d))
        if not np.isfinite(step):
            break
        accepted = False
        for _ in range(20):
            Vn = V + E @ d
            Vn /= np.linalg.norm(Vn)
            cn = _cost(C, xn, w2, Vn)
            if cn <= cost:
                accepted = True
                break
            d *= 0.5
        if not accepted:
            break
        V, cost = Vn, cn
        if float(np.linalg.norm(d)) < step_tol:
            break
    return V, it


def _mad_scale(r: np.ndarray, floor: float) -> float:
    med = np.median(r)
    return max(MAD_TO_SIGMA * float(np.median(np.abs(r - med))), floor)


def cauchy_weights(r: np.ndarray, scale: float, c: float = CAUCHY_C) -> np.ndarray:
    z = r / (c * scale)
    return 1.0 / (1.0 + z * z)


def _normalize_flows(flows: FlowSet, c: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    xn = pixel_to_normalized(c, flows.points)
    f = np.stack([flows.flows[:, 0] / c.fx, flows.flows[:, 1] / c.fy], axis=1)
    ok = np.all(np.isfinite(xn), axis=1) & np.all(np.isfinite(f), axis=1)
    return xn[ok], f[ok]


def _sign_by_depth(V: np.ndarray, rho: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip V (and rho) so that most inverse depths are positive."""
    pos = int(np.count_nonzero(rho > 0))
    neg = int(np.count_nonzero(rho < 0))
    if neg > pos or (neg == pos and float(np.sum(w * rho)) < 0):
        return -V, -rho
    return V, rho


def _inverse_depths(xn, g, V) -> np.ndarray:
    x, y = xn[:, 0], xn[:, 1]
    ax = -V[0] + x * V[2]
    ay = -V[1] + y * V[2]
    return (ax * g[:, 0] + ay * g[:, 1]) / (ax * ax + ay * ay + _A_EPS)


def _check_erlv_geometry(C: np.ndarray, cond_max: float) -> None:
    s = np.linalg.svd(C, compute_uv=False)
    if s[0] == 0.0 or s[1] == 0.0 or s[0] / s[1] > cond_max:
        raise DegenerateGeometry(
            "flow constraints leave the translation direction undetermined "
            f"(singular values {np.array2string(s, precision=3)})"
        )


def _solve_sphere_irls(xn, f, opts: SolverOptions):
    """Seed + refine + IRLS for the rotation-free cost. Returns (V, weights, iterations)."""
    C = constraint_rows(xn, f)
    fscale = float(np.sqrt(np.mean(np.sum(f * f, axis=1))))
    floor = SCALE_FLOOR * max(fscale, 1e-300)
    w = np.ones(xn.shape[0])
    iters = 0
    if opts.irls_rounds == 0:
        V = _grid_seed(C, xn, w * w, opts.icosphere_level)
        V, iters = _refine_sphere(C, xn, w, V, opts.gn_max_iter, opts.gn_step_tol)
        return V, w, iters
    # least-median seed; an unweighted refinement here would be dragged by outliers
    V = _robust_grid_seed(C, xn, opts.icosphere_level)
    for _ in range(opts.irls_rounds):
        r = (C @ V) / np.sqrt(_a_norm2(xn, V) + _A_EPS)
        w = cauchy_weights(r, _mad_scale(r, floor), opts.cauchy_c)
        w2 = w * w
        V1, k1 = _refine_sphere(C, xn, w, V, opts.gn_max_iter, opts.gn_step_tol)
        iters += k1
        seed = _grid_seed(C, xn, w2, opts.icosphere_level)
        if abs(float(seed @ V1)) < math.cos(math.radians(2.0)):
            V2, k2 = _refine_sphere(C, xn, w, seed, opts.gn_max_iter, opts.gn_step_tol)
            iters += k2
            if _cost(C, xn, w2, V2) < _cost(C, xn, w2, V1):
                V1 = V2
        V = V1
    return V, w, iters


def erlv_solve(flows: FlowSet, c: CameraModel, opts: SolverOptions | None = None) -> VelocityEstimate:
    """Robust translation direction assuming rotation has been removed."""
    opts = opts or SolverOptions()
    xn, f = _normalize_flows(flows, c)
    if xn.shape[0] < 2:
        raise InsufficientFlow(f"need at least 2 usable flow samples, got {xn.shape[0]}")
    _check_erlv_geometry(constraint_rows(xn, f), opts.degeneracy_cond)
    V, w, iters = _solve_sphere_irls(xn, f, opts)
    rho = _inverse_depths(xn, f, V)
    V, rho = _sign_by_depth(V, rho, w)
    r = erlv_residuals(xn, f, V)
    resid = float(np.sqrt(np.sum((w * r) ** 2) / max(np.sum(w * w), 1e-300)))
    return VelocityEstimate(V / np.linalg.norm(V), resid, w, np.maximum(rho, 1e-12), iters)


# --- full motion baseline ---------------------------------------------------


def _rotation_rows(xn: np.ndarray, V: np.ndarray) -> np.ndarray:
    """g_i(V) = B_i^T a_perp_i, so that a_perp . (B_i w) = g_i . w. V: (3,) -> (N, 3); (3, M) -> (N, M, 3)."""
    x, y = xn[:, 0], xn[:, 1]
    b11, b12, b13 = x * y, -(1.0 + x * x), y
    b21, b22, b23 = 1.0 + y * y, -x * y, -x
    if V.ndim == 1:
        ax = -V[0] + x * V[2]
        ay = -V[1] + y * V[2]
        px, py = -ay, ax
        return np.stack([b11 * px + b21 * py, b12 * px + b22 * py, b13 * px + b23 * py], axis=1)
    ax = -V[0][None, :] + x[:, None] * V[2][None, :]
    ay = -V[1][None, :] + y[:, None] * V[2][None, :]
    px, py = -ay, ax
    return np.stack(
        [b11[:, None] * px + b21[:, None] * py, b12[:, None] * px + b22[:, None] * py,
         b13[:, None] * px + b23[:, None] * py],
        axis=2,
    )


def _omega_given_V(C, xn, w2, V) -> np.ndarray:
    G = _rotation_rows(xn, V)
    s = w2 / (_a_norm2(xn, V) + _A_EPS)
    M = (G * s[:, None]).T @ G
    b = (G * s[:, None]).T @ (C @ V)
    return np.linalg.lstsq(M, b, rcond=None)[0]


def _full_grid_seed(C, xn, w2, level, robust=False, reweights=3, c=CAUCHY_C) -> tuple[np.ndarray, np.ndarray]:
    """Best icosphere direction with omega solved per candidate (variable projection).

    With ``robust`` the per-candidate omega is itself refit with Cauchy weights
    and candidates are ranked by their median absolute residual.
    """
    dirs = icosphere(level).T  # (3, M)
    n = C @ dirs  # (N, M)
    s0 = w2[:, None] / (_a_norm2(xn, dirs) + _A_EPS)  # (N, M)
    G = _rotation_rows(xn, dirs)  # (N, M, 3)
    s = s0
    for _ in range(1 + (reweights if robust else 0)):
        Gs = G * s[:, :, None]
        M = np.empty((dirs.shape[1], 3, 3))
        for i in range(3):
            for j in range(i, 3):
                M[:, i, j] = M[:, j, i] = np.sum(Gs[:, :, i] * G[:, :, j], axis=0)
        b = np.stack([np.sum(Gs[:, :, i] * n, axis=0) for i in range(3)], axis=1)
        M += 1e-15 * np.eye(3)[None] * np.trace(M, axis1=1, axis2=2)[:, None, None]
        om = np.linalg.solve(M, b[..., None])[..., 0]  # (M, 3)
        res = n - (G[:, :, 0] * om[:, 0] + G[:, :, 1] * om[:, 1] + G[:, :, 2] * om[:, 2])
        if robust:
            r = np.sqrt(s0) * res
            scale = MAD_TO_SIGMA * np.median(np.abs(r), axis=0) + 1e-300
            s = s0 * cauchy_weights(r, scale[None, :], c) ** 2
    if robust:
        cost = np.median(np.sqrt(s0) * np.abs(res), axis=0)
    else:
        cost = np.sum(s0 * res * res, axis=0)
    k = int(np.argmin(cost))
    return dirs[:, k].copy(), om[k]


def _rotation_flow(xn: np.ndarray, omega: np.ndarray) -> np.ndarray:
    return motion_field(xn, np.zeros(3), np.zeros(xn.shape[0]), omega)


def _check_full_geometry(xn, f, cond_max: float) -> None:
    """Translation is unobservable when the flow lies in the span of the rotational field."""
    x, y = xn[:, 0], xn[:, 1]
    B = np.empty((2 * xn.shape[0], 3))
    B[0::2] = np.stack([x * y, -(1.0 + x * x), y], axis=1)
    B[1::2] = np.stack([1.0 + y * y, -x * y, -x], axis=1)
    M = np.column_stack([B, f.reshape(-1)])
    norms = np.linalg.norm(M, axis=0)
    if norms[3] == 0.0:
        raise DegenerateGeometry("all flows are zero")
    s = np.linalg.svd(M / norms, compute_uv=False)
    if s[-1] == 0.0 or s[0] / s[-1] > cond_max:
        raise DegenerateGeometry("flow is explained by rotation alone; translation is unobservable")


def _full_cost(xn, f, w2, V, omega) -> float:
    r = full_residuals(xn, f, V, omega)
    return float(np.sum(w2 * r * r))


def _refine_full(C, xn, f, w, V, omega, opts: SolverOptions):
    """Joint Gauss-Newton over a tangent step of V and omega, with step halving."""
    w2 = w * w
    omega = _omega_given_V(C, xn, w2, V)
    cost = _full_cost(xn, f, w2, V, omega)
    it = 0
    for it in range(1, opts.gn_max_iter + 1):
        E = _tangent_basis(V)
        Cg = constraint_rows(xn, f - _rotation_flow(xn, omega))
        r, Jv = _residuals_and_jacobian(Cg, xn, V, E)
        na = np.sqrt(_a_norm2(xn, V) + _A_EPS)
        J = np.column_stack([Jv, -_rotation_rows(xn, V) / na[:, None]]) * w[:, None]
        d = np.linalg.lstsq(J, -r * w, rcond=None)[0]
        if not np.all(np.isfinite(d)):
            break
        accepted = False
        for _ in range(20):
            Vn = V + E @ d[:2]
            Vn /= np.linalg.norm(Vn)
            om_n = omega + d[2:]
            cn = _full_cost(xn, f, w2, Vn, om_n)
            if cn <= cost:
                accepted = True
                break
            d *= 0.5
        if not accepted:
            break
        V, omega, cost = Vn, om_n, cn
        if float(np.linalg.norm(d[:2])) < opts.gn_step_tol:
            break
    return V, omega, it


def full_residuals(xn, f, V, omega) -> np.ndarray:
    return erlv_residuals(xn, f - _rotation_flow(xn, omega), V)


def erl_full_solve(flows: FlowSet, c: CameraModel, opts: SolverOptions | None = None) -> FullMotionEstimate:
    """Robust translation direction and angular velocity (rad/s) from raw flow."""
    opts = opts or SolverOptions()
    xn, f = _normalize_flows(flows, c)
    if xn.shape[0] < 3:
        raise InsufficientFlow(f"need at least 3 usable flow samples, got {xn.shape[0]}")
    _check_full_geometry(xn, f, opts.degeneracy_cond)
    C = constraint_rows(xn, f)
    fscale = float(np.sqrt(np.mean(np.sum(f * f, axis=1))))
    floor = SCALE_FLOOR * max(fscale, 1e-300)
    w = np.ones(xn.shape[0])
    V, omega = _full_grid_seed(C, xn, w * w, opts.icosphere_level, robust=opts.irls_rounds > 0)
    iters = 0
    if opts.irls_rounds == 0:
        V, omega, iters = _refine_full(C, xn, f, w, V, omega, opts)
    for _ in range(opts.irls_rounds):
        r = full_residuals(xn, f, V, omega)
        w = cauchy_weights(r, _mad_scale(r, floor), opts.cauchy_c)
        V1, om1, k = _refine_full(C, xn, f, w, V, omega, opts)
        iters += k
        seed, om_s = _full_grid_seed(C, xn, w * w, opts.icosphere_level)
        if abs(float(seed @ V1)) < math.cos(math.radians(2.0)):
            V2, om2, k2 = _refine_full(C, xn, f, w, seed, om_s, opts)
            iters += k2
            c1 = np.sum((w * full_residuals(xn, f, V1, om1)) ** 2)
            c2 = np.sum((w * full_residuals(xn, f, V2, om2)) ** 2)
            if c2 < c1:
                V1, om1 = V2, om2
        V, omega = V1, om1
    g = f - _rotation_flow(xn, omega)
    rho = _inverse_depths(xn, g, V)
    V, rho = _sign_by_depth(V, rho, w)
    r = full_residuals(xn, f, V, omega)
    resid = float(np.sqrt(np.sum((w * r) ** 2) / max(np.sum(w * w), 1e-300)))
    return FullMotionEstimate(V / np.linalg.norm(V), omega, resid, w, np.maximum(rho, 1e-12), iters)


# --- metric -----------------------------------------------------------------


def angle_deg(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(max(-1.0, min(1.0, d))))


def mae_angle(estimates, gts, speeds=None, min_speed: float = 0.01) -> float:
    """Mean angle (deg) between paired directions; slow GT pairs are skipped.

    ``speeds`` are the GT speeds (m/s); when omitted every pair counts.
    Returns NaN when no pair survives the speed floor.
    """
    est = np.asarray(estimates, dtype=float).reshape(-1, 3)
    gt = np.asarray(gts, dtype=float).reshape(-1, 3)
    if est.shape[0] != gt.shape[0]:
        raise LengthMismatch(f"{est.shape[0]} estimates vs {gt.shape[0]} ground-truth vectors")
    keep = np.ones(est.shape[0], bool)
    if speeds is not None:
        sp = np.asarray(speeds, dtype=float).reshape(-1)
        if sp.shape[0] != est.shape[0]:
            raise LengthMismatch("speeds must pair with estimates")
        keep &= sp >= min_speed
    if not keep.any():
        return float("nan")
    e = est[keep] / np.linalg.norm(est[keep], axis=1, keepdims=True)
    g = gt[keep] / np.linalg.norm(gt[keep], axis=1, keepdims=True)
    d = np.clip(np.einsum("ij,ij->i", e, g), -1.0, 1.0)
    return float(np.degrees(np.arccos(d)).mean())

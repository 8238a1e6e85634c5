"""Sparse nonlinear least squares for bundle adjustment (Levenberg-Marquardt
with landmark marginalization), EPnP absolute pose, and essential-matrix
RANSAC for evaluation.

The LM solver optimizes poses of frames 1..F-1 (frame 0 is the gauge) and all
active landmark positions. The remaining scale freedom is damped during the
iterations and removed afterwards by rescaling the anchor baseline to unit
length, which leaves every reprojection residual unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    DegenerateConfiguration,
    InsufficientObservations,
    NoCheiralSolution,
    NoConsensus,
    SingularSystem,
    TooFewMatches,
)
from .geometry import Intrinsics, SE3Pose

BEHIND_CAMERA_COST = 1e4  # squared-pixel penalty for an observation behind the camera
MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class LMConfig:
    max_iterations: int = 100
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    rel_cost_tol: float = 1e-8
    grad_norm_tol: float = 1e-8

    def __post_init__(self):
        assert self.max_iterations >= 1
        assert self.initial_damping > 0
        assert self.damping_up > 1.0 > self.damping_down > 0


@dataclass
class LMReport:
    iterations_used: int
    initial_cost: float
    final_cost: float
    final_gradient_norm: float
    termination_reason: str


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    inlier_threshold_px: float = 1.0
    min_sample_size: int = 8
    rng_seed: int = 0


@dataclass
class RansacResult:
    pose: SE3Pose          # relative pose, translation unit-norm
    inliers: np.ndarray    # boolean mask over the input matches
    degenerate: bool = False
    inlier_count: int = 0


# ------------------------------------------------------------------ LM on BA

class _BAState:
    """Flat view of the optimizable part of a BAProblem."""

    def __init__(self, problem):
        self.K = problem.intrinsics
        self.poses = [fr.pose for fr in problem.frames]
        self.track_ids = [i for i, tr in enumerate(problem.tracks)
                          if tr.is_active()]
        self.points = np.array([problem.tracks[i].point
                                for i in self.track_ids])
        obs_track, obs_frame, obs_uv = [], [], []
        for local, ti in enumerate(self.track_ids):
            for ob in problem.tracks[ti].observations:
                obs_track.append(local)
                obs_frame.append(ob.frame)
                obs_uv.append(ob.uv)
        self.obs_track = np.array(obs_track, dtype=int)
        self.obs_frame = np.array(obs_frame, dtype=int)
        self.obs_uv = np.array(obs_uv, dtype=float).reshape(-1, 2)

    @property
    def num_frames(self):
        return len(self.poses)

    @property
    def num_tracks(self):
        return len(self.track_ids)


def _residuals(state: _BAState, poses, points):
    """Per-observation residuals and depths at the given state.

    Returns (r (N,2), z (N,), x_cam (N,3)); behind-camera observations keep
    their geometric values and are handled by the caller.
    """
    K = state.K
    n = len(state.obs_track)
    r = np.empty((n, 2))
    z = np.empty(n)
    x_cam = np.empty((n, 3))
    for f in range(state.num_frames):
        sel = state.obs_frame == f
        if not sel.any():
            continue
        x = poses[f].transform(points[state.obs_track[sel]])
        x_cam[sel] = x
        z[sel] = x[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = np.stack([K.fx * x[:, 0] / x[:, 2] + K.cx,
                             K.fy * x[:, 1] / x[:, 2] + K.cy], axis=1)
        r[sel] = state.obs_uv[sel] - proj
    return r, z, x_cam


def _cost_from_residuals(r, z):
    good = z > MIN_DEPTH
    c = float(np.sum(r[good] ** 2))
    return c + BEHIND_CAMERA_COST * int((~good).sum()), good


def ba_cost(state: _BAState, poses, points):
    r, z, _ = _residuals(state, poses, points)
    cost, _ = _cost_from_residuals(r, z)
    return cost


def _assemble(state: _BAState, poses, points):
    """Gauss-Newton blocks of the damped normal equations.

    Returns (cost, grad_norm, blocks) where blocks carries the per-frame pose
    Hessians, per-track landmark Hessians, pose-landmark couplings and both
    right-hand sides. Behind-camera observations contribute only the constant
    penalty.
    """
    K = state.K
    F1 = state.num_frames - 1  # optimized pose blocks, frame 0 fixed
    Nt = state.num_tracks
    r_all, z_all, x_all = _residuals(state, poses, points)
    cost, good = _cost_from_residuals(r_all, z_all)

    Hpp = np.zeros((F1, 6, 6))
    Hll = np.zeros((Nt, 3, 3))
    W = np.zeros((F1 + 1, Nt, 6, 3))     # indexed by frame, frame 0 row unused
    Wmask = np.zeros((F1 + 1, Nt), dtype=bool)
    g_p = np.zeros((F1, 6))
    g_l = np.zeros((Nt, 3))

    for f in range(state.num_frames):
        sel = (state.obs_frame == f) & good
        if not sel.any():
            continue
        t_idx = state.obs_track[sel]
        x = x_all[sel]
        r = r_all[sel]
        z = x[:, 2]
        n = len(z)
        # pinhole jacobian rows
        Jpi = np.zeros((n, 2, 3))
        Jpi[:, 0, 0] = K.fx / z
        Jpi[:, 0, 2] = -K.fx * x[:, 0] / z**2
        Jpi[:, 1, 1] = K.fy / z
        Jpi[:, 1, 2] = -K.fy * x[:, 1] / z**2
        R = poses[f].rotation()
        Jpt = Jpi @ R                                   # (n, 2, 3)
        Hll_add = np.einsum("nij,nik->njk", Jpt, Jpt)
        np.add.at(Hll, t_idx, Hll_add)
        np.add.at(g_l, t_idx, np.einsum("nij,ni->nj", Jpt, r))
        if f > 0:
            # d x_cam / d omega = -skew(x_cam)
            Sx = np.zeros((n, 3, 3))
            Sx[:, 0, 1] = -x[:, 2]
            Sx[:, 0, 2] = x[:, 1]
            Sx[:, 1, 0] = x[:, 2]
            Sx[:, 1, 2] = -x[:, 0]
            Sx[:, 2, 0] = -x[:, 1]
            Sx[:, 2, 1] = x[:, 0]
            Jrot = -np.einsum("nij,njk->nik", Jpi, Sx)  # (n, 2, 3)
            Jpose = np.concatenate([Jrot, Jpi], axis=2)  # (n, 2, 6)
            Hpp[f - 1] += np.einsum("nij,nik->njk", Jpose, Jpose)
            g_p[f - 1] += np.einsum("nij,ni->nj", Jpose, r)
            np.add.at(W[f], t_idx, np.einsum("nij,nik->njk", Jpose, Jpt))
            Wmask[f, t_idx] = True

    grad = math.sqrt(float(np.sum(g_p**2) + np.sum(g_l**2)))
    blocks = {"Hpp": Hpp, "Hll": Hll, "W": W, "Wmask": Wmask,
              "g_p": g_p, "g_l": g_l}
    # gradient of the summed-squares cost is 2 J^T r
    return cost, 2.0 * grad, blocks


def _schur_step(blocks, lam, num_frames):
    """Solve the damped normal equations by eliminating the landmark blocks."""
    Hpp, Hll = blocks["Hpp"], blocks["Hll"]
    W, Wmask = blocks["W"], blocks["Wmask"]
    g_p, g_l = blocks["g_p"], blocks["g_l"]
    F1, Nt = Hpp.shape[0], Hll.shape[0]

    di = np.arange(3)
    Hll_d = Hll.copy()
    empty = Hll[:, di, di].sum(axis=1) == 0
    Hll_d[:, di, di] += lam * Hll[:, di, di]
    if empty.any():
        Hll_d[empty] = np.eye(3)
    try:
        Hll_inv = np.linalg.inv(Hll_d)
    except np.linalg.LinAlgError:
        raise SingularSystem("landmark block not invertible")

    S = np.zeros((F1 * 6, F1 * 6))
    rhs = np.empty(F1 * 6)
    for a in range(F1):
        Hd = Hpp[a] + lam * np.diag(np.diag(Hpp[a]))
        S[a * 6:(a + 1) * 6, a * 6:(a + 1) * 6] = Hd
        rhs[a * 6:(a + 1) * 6] = g_p[a]
    A = np.einsum("ftij,tjk->ftik", W[1:], Hll_inv)  # (F1, Nt, 6, 3)
    for a in range(F1):
        rhs[a * 6:(a + 1) * 6] -= np.einsum("tij,tj->i", A[a], g_l)
        for b in range(F1):
            both = Wmask[a + 1] & Wmask[b + 1]
            if not both.any():
                continue
            S[a * 6:(a + 1) * 6, b * 6:(b + 1) * 6] -= np.einsum(
                "tik,tjk->ij", A[a][both], W[b + 1][both])

    try:
        factor = cho_factor(S, lower=True)
    except np.linalg.LinAlgError:
        raise SingularSystem("reduced pose system not positive definite")
    delta_p = cho_solve(factor, rhs).reshape(F1, 6)

    resid = g_l - np.einsum("ftij,fi->tj", W[1:], delta_p)
    delta_l = np.einsum("tij,tj->ti", Hll_inv, resid)
    return delta_p, delta_l


def _anchor_scale(problem, poses, points):
    """Scale factor that makes the anchor baseline unit length."""
    i, j = problem.anchor if problem.anchor is not None else (0, 1)
    ci = -(poses[i].rotation().T @ poses[i].t)
    cj = -(poses[j].rotation().T @ poses[j].t)
    base = np.linalg.norm(cj - ci)
    if base < 1e-12:
        return 1.0
    return 1.0 / base


def _apply_scale(poses, points, s):
    poses = [SE3Pose(p.q, p.t * s) for p in poses]
    return poses, points * s


def lm_solve_ba(problem, config: LMConfig = LMConfig()):
    """Levenberg-Marquardt on a BAProblem. Returns (new problem, LMReport).

    Frame 0 is held fixed; damping is Marquardt-style (lambda scaled by the
    Hessian diagonal); the normal equations are solved per iteration by
    eliminating the landmark blocks and back-substituting.
    """
    if len(problem.frames) < 2:
        raise InsufficientObservations("need at least two frames")
    state = _BAState(problem)
    if state.num_tracks < 6:
        raise InsufficientObservations(
            f"{state.num_tracks} active tracks, need at least 6")
    counts = np.bincount(state.obs_track, minlength=state.num_tracks)
    if (counts < 2).any():
        raise InsufficientObservations("active track with fewer than 2 observations")

    poses = list(state.poses)
    points = state.points.copy()
    poses, points = _apply_scale(poses, points, _anchor_scale(problem, poses, points))

    lam = config.initial_damping
    cost, grad_norm, blocks = _assemble(state, poses, points)
    initial_cost = cost
    reason = "MaxIterations"
    iterations = 0

    for iterations in range(config.max_iterations + 1):
        if grad_norm <= config.grad_norm_tol:
            reason = "GradientConverged"
            break
        if iterations == config.max_iterations:
            reason = "MaxIterations"
            break

        accepted = False
        for _ in range(16):
            try:
                delta_p, delta_l = _schur_step(blocks, lam, state.num_frames)
            except SingularSystem:
                lam *= config.damping_up
                if lam > 1e32:
                    raise
                continue
            trial_poses = [poses[0]] + [
                poses[f + 1].perturbed(delta_p[f])
                for f in range(state.num_frames - 1)]
            trial_points = points + delta_l
            trial_cost = ba_cost(state, trial_poses, trial_points)
            if trial_cost < cost:
                rel_drop = (cost - trial_cost) / max(cost, 1e-300)
                poses, points = trial_poses, trial_points
                cost = trial_cost
                lam = max(lam * config.damping_down, 1e-15)
                accepted = True
                if rel_drop <= config.rel_cost_tol:
                    reason = "CostConverged"
                break
            lam *= config.damping_up
            if lam > 1e32:
                break
        if not accepted:
            reason = "Stalled" if grad_norm > config.grad_norm_tol else "GradientConverged"
            break
        cost, grad_norm, blocks = _assemble(state, poses, points)
        if reason == "CostConverged":
            break
        reason = "MaxIterations"

    poses, points = _apply_scale(poses, points, _anchor_scale(problem, poses, points))
    cost, grad_norm, _ = _assemble(state, poses, points)

    new_problem = problem.with_state(poses, state.track_ids, points)
    report = LMReport(iterations_used=iterations,
                      initial_cost=initial_cost,
                      final_cost=cost,
                      final_gradient_norm=grad_norm,
                      termination_reason=reason)
    return new_problem, report


def ba_gradient_norms(problem):
    """Norms of the cost gradient w.r.t. every pose twist and landmark.

    Used for the stationarity check of the converged lower-level problem.
    Returns (max pose-gradient norm, max landmark-gradient norm) of the
    summed-squares reprojection cost.
    """
    state = _BAState(problem)
    poses = list(state.poses)
    _, _, blocks = _assemble(state, poses, state.points)
    gp = 2.0 * blocks["g_p"]
    gl = 2.0 * blocks["g_l"]
    max_pose = float(np.linalg.norm(gp, axis=1).max()) if len(gp) else 0.0
    max_lm = float(np.linalg.norm(gl, axis=1).max()) if len(gl) else 0.0
    return max_pose, max_lm


# ------------------------------------------------------------------ EPnP

def _rigid_align(src, dst):
    """Least-squares rigid transform with dst ~ R @ src + t."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    M = (dst - cd).T @ (src - cs)
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    return R, cd - R @ cs


def _control_points(points):
    """Centroid plus principal-component control points; 3 in the planar case."""
    c0 = points.mean(axis=0)
    A = points - c0
    cov = A.T @ A / len(points)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    scale = np.sqrt(np.maximum(vals, 0.0))
    if scale[1] < 1e-9 * max(scale[0], 1e-12):
        raise DegenerateConfiguration("points are collinear")
    planar = scale[2] < 1e-6 * scale[0]
    if planar:
        ctrl = np.stack([c0, c0 + scale[0] * vecs[:, 0], c0 + scale[1] * vecs[:, 1]])
    else:
        ctrl = np.stack([c0,
                         c0 + scale[0] * vecs[:, 0],
                         c0 + scale[1] * vecs[:, 1],
                         c0 + scale[2] * vecs[:, 2]])
    return ctrl


def _barycentric(points, ctrl):
    C = (ctrl[1:] - ctrl[0]).T              # 3 x (m-1)
    rel = (points - ctrl[0]).T              # 3 x n
    beta, *_ = np.linalg.lstsq(C, rel, rcond=None)
    alpha = np.vstack([1.0 - beta.sum(axis=0), beta]).T   # n x m
    return alpha


def _beta_candidates(vs, rho):
    """Closed-form beta estimates for the N = 1, 2, 3 null-space cases.

    vs: (k, m, 3) null-space control points, smallest singular value first;
    rho: squared distances between the world control points.
    """
    m = vs.shape[1]
    pairs = [(a, b) for a in range(m) for b in range(a + 1, m)]
    dv = np.stack([[v[a] - v[b] for a, b in pairs] for v in vs])  # (k, P, 3)

    out = []
    # N = 1
    num = sum(np.linalg.norm(dv[0][p]) * math.sqrt(rho[p]) for p in range(len(pairs)))
    den = sum(dv[0][p] @ dv[0][p] for p in range(len(pairs)))
    out.append(np.array([num / max(den, 1e-30)]))

    # N = 2: unknowns (b11, b12, b22)
    L = np.stack([
        np.einsum("pi,pi->p", dv[0], dv[0]),
        2 * np.einsum("pi,pi->p", dv[0], dv[1]),
        np.einsum("pi,pi->p", dv[1], dv[1]),
    ], axis=1)
    b, *_ = np.linalg.lstsq(L, rho, rcond=None)
    if b[0] < 0:
        b1 = math.sqrt(-b[0])
        b2 = math.sqrt(-b[2]) if b[2] < 0 else 0.0
    else:
        b1 = math.sqrt(b[0])
        b2 = math.sqrt(b[2]) if b[2] > 0 else 0.0
    if b[1] < 0:
        b1 = -b1
    out.append(np.array([b1, b2]))

    # N = 3: unknowns (b11, b12, b22, b13, b23)
    if vs.shape[0] >= 3 and len(pairs) >= 5:
        L = np.stack([
            np.einsum("pi,pi->p", dv[0], dv[0]),
            2 * np.einsum("pi,pi->p", dv[0], dv[1]),
            np.einsum("pi,pi->p", dv[1], dv[1]),
            2 * np.einsum("pi,pi->p", dv[0], dv[2]),
            2 * np.einsum("pi,pi->p", dv[1], dv[2]),
        ], axis=1)
        b, *_ = np.linalg.lstsq(L, rho, rcond=None)
        if b[0] < 0:
            b1 = math.sqrt(-b[0])
            b2 = math.sqrt(-b[2]) if b[2] < 0 else 0.0
        else:
            b1 = math.sqrt(b[0])
            b2 = math.sqrt(b[2]) if b[2] > 0 else 0.0
        if b[1] < 0:
            b1 = -b1
        b3 = b[3] / b1 if abs(b1) > 1e-12 else 0.0
        out.append(np.array([b1, b2, b3]))
    return out


def _pose_reprojection_error(points3d, points2d, K, pose):
    x = pose.transform(points3d)
    z = np.maximum(x[:, 2], MIN_DEPTH)
    proj = np.stack([K.fx * x[:, 0] / z + K.cx, K.fy * x[:, 1] / z + K.cy], axis=1)
    err = np.linalg.norm(proj - points2d, axis=1)
    err[x[:, 2] <= MIN_DEPTH] = 1e6
    return float(err.mean())


def _refine_pose(points3d, points2d, K, pose, iterations=10):
    """Gauss-Newton pose polish on the reprojection error."""
    from .geometry import project, project_jacobians
    for _ in range(iterations):
        H = np.zeros((6, 6))
        g = np.zeros(6)
        cost = 0.0
        for p, uv in zip(points3d, points2d):
            x = pose.transform(p)
            if x[2] <= MIN_DEPTH:
                continue
            Jp, _ = project_jacobians(p, pose, K)
            r = uv - project(p, pose, K)
            H += Jp.T @ Jp
            g += Jp.T @ r
            cost += float(r @ r)
        try:
            delta = np.linalg.solve(H + 1e-12 * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        trial = pose.perturbed(delta)
        if _pose_reprojection_error(points3d, points2d, K, trial) <= \
           _pose_reprojection_error(points3d, points2d, K, pose) + 1e-15:
            pose = trial
        else:
            trial = pose.perturbed(0.25 * delta)
            if _pose_reprojection_error(points3d, points2d, K, trial) < \
               _pose_reprojection_error(points3d, points2d, K, pose):
                pose = trial
            else:
                break
        if np.linalg.norm(delta) < 1e-14:
            break
    return pose


def epnp(points3d, points2d, K: Intrinsics, refine_iterations=10):
    """EPnP absolute pose from 2D-3D matches.

    Control points from the centroid plus principal components (3 control
    points in the planar case), barycentric coordinates, candidate solutions
    from the smallest right-singular vectors of the 2n x 3m system with the
    closed-form beta cases, best candidate by reprojection error, then a
    Gauss-Newton polish on SE(3).
    """
    points3d = np.asarray(points3d, dtype=float).reshape(-1, 3)
    points2d = np.asarray(points2d, dtype=float).reshape(-1, 2)
    n = len(points3d)
    if n < 4:
        raise DegenerateConfiguration(f"{n} points, need at least 4")

    ctrl = _control_points(points3d)
    m = len(ctrl)
    alpha = _barycentric(points3d, ctrl)

    M = np.zeros((2 * n, 3 * m))
    for j in range(m):
        M[0::2, 3 * j + 0] = alpha[:, j] * K.fx
        M[0::2, 3 * j + 2] = alpha[:, j] * (K.cx - points2d[:, 0])
        M[1::2, 3 * j + 1] = alpha[:, j] * K.fy
        M[1::2, 3 * j + 2] = alpha[:, j] * (K.cy - points2d[:, 1])

    _, vals, Vt = np.linalg.svd(M, full_matrices=True)
    k = min(4, 3 * m)
    vs = Vt[-k:][::-1].reshape(k, m, 3)   # smallest singular vector first

    pairs = [(a, b) for a in range(m) for b in range(a + 1, m)]
    rho = np.array([float((ctrl[a] - ctrl[b]) @ (ctrl[a] - ctrl[b]))
                    for a, b in pairs])

    best = None
    for betas in _beta_candidates(vs, rho):
        cc = np.tensordot(betas, vs[:len(betas)], axes=1)   # (m, 3)
        Xc = alpha @ cc
        if Xc[:, 2].mean() < 0:
            Xc = -Xc
        R, t = _rigid_align(points3d, Xc)
        pose = SE3Pose.from_rt(R, t)
        err = _pose_reprojection_error(points3d, points2d, K, pose)
        if best is None or err < best[0]:
            best = (err, pose)

    pose = _refine_pose(points3d, points2d, K, best[1],
                        iterations=refine_iterations)
    depths = pose.transform(points3d)[:, 2]
    in_front = int((depths > MIN_DEPTH).sum())
    if in_front < max(4, n // 2):
        raise NoCheiralSolution(f"only {in_front}/{n} points in front of camera")
    return pose


# ------------------------------------------------------------------ essential RANSAC

def _hartley_normalize(x):
    """Similarity transform making the 2D part zero-mean with rms sqrt(2)."""
    mean = x[:, :2].mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((x[:, :2] - mean) ** 2, axis=1)))
    s = math.sqrt(2.0) / max(rms, 1e-12)
    T = np.array([[s, 0, -s * mean[0]],
                  [0, s, -s * mean[1]],
                  [0, 0, 1.0]])
    return x @ T.T, T


def _project_to_essential(E):
    U, S, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def _eight_point(x1, x2):
    """Normalized 8-point essential matrix from homogeneous camera coords."""
    x1n, T1 = _hartley_normalize(x1)
    x2n, T2 = _hartley_normalize(x2)
    A = np.stack([
        x2n[:, 0] * x1n[:, 0], x2n[:, 0] * x1n[:, 1], x2n[:, 0],
        x2n[:, 1] * x1n[:, 0], x2n[:, 1] * x1n[:, 1], x2n[:, 1],
        x1n[:, 0], x1n[:, 1], np.ones(len(x1n)),
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    E = T2.T @ F @ T1
    E = _project_to_essential(E)
    return E / np.linalg.norm(E)


def _sampson_px2(E, x1, x2, f_scale):
    Ex1 = x1 @ E.T
    Etx2 = x2 @ E
    r = np.sum(x2 * Ex1, axis=1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return (r * r / np.maximum(den, 1e-18)) * f_scale * f_scale


def _decompose_essential(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    Wm = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ Wm @ Vt
    R2 = U @ Wm.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def _midpoint_depths(R, t, x1, x2):
    """Depths of midpoint-triangulated matches in both camera frames."""
    c2 = -R.T @ t
    d1 = x1 / np.linalg.norm(x1, axis=1, keepdims=True)
    d2 = (x2 / np.linalg.norm(x2, axis=1, keepdims=True)) @ R
    b = c2
    d11 = np.sum(d1 * d1, axis=1)
    d12 = np.sum(d1 * d2, axis=1)
    d22 = np.sum(d2 * d2, axis=1)
    det = d11 * d22 - d12 * d12
    d1b = d1 @ b
    d2b = d2 @ b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (d22 * d1b - d12 * d2b) / det
        u = (d12 * d1b - d11 * d2b) / det
    X = 0.5 * (s[:, None] * d1 + c2 + u[:, None] * d2)
    z1 = X[:, 2]
    z2 = (X @ R.T)[:, 2] + t[2]
    z1[~np.isfinite(z1)] = -1.0
    z2[~np.isfinite(z2)] = -1.0
    return z1, z2, X


def essential_ransac(matches, K: Intrinsics, config: RansacConfig = RansacConfig()):
    """Relative pose (up to scale) from pixel matches via 8-point RANSAC.

    matches: sequence of (pixel_i, pixel_j). Scoring uses the Sampson distance
    in pixels; the best essential matrix is refit on its inliers, decomposed
    into the four pose candidates and disambiguated by a cheirality vote.
    """
    n = len(matches)
    if n < config.min_sample_size:
        raise TooFewMatches(f"{n} matches, need {config.min_sample_size}")
    u1 = np.array([np.asarray(m[0], dtype=float) for m in matches])
    u2 = np.array([np.asarray(m[1], dtype=float) for m in matches])
    x1 = np.column_stack([(u1[:, 0] - K.cx) / K.fx,
                          (u1[:, 1] - K.cy) / K.fy, np.ones(n)])
    x2 = np.column_stack([(u2[:, 0] - K.cx) / K.fx,
                          (u2[:, 1] - K.cy) / K.fy, np.ones(n)])
    f = K.mean_focal()
    thr2 = config.inlier_threshold_px ** 2

    rng = np.random.default_rng(config.rng_seed)
    best_count = -1
    best_inliers = None
    for _ in range(config.iterations):
        idx = rng.choice(n, size=config.min_sample_size, replace=False)
        try:
            E = _eight_point(x1[idx], x2[idx])
        except np.linalg.LinAlgError:
            continue
        d = _sampson_px2(E, x1, x2, f)
        inl = d < thr2
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inliers = inl

    if best_count < max(8, config.min_sample_size):
        raise NoConsensus(f"best consensus {best_count} < 8")

    # refit on the consensus set and rescore once
    E = _eight_point(x1[best_inliers], x2[best_inliers])
    d = _sampson_px2(E, x1, x2, f)
    inliers = d < thr2
    if int(inliers.sum()) >= 8:
        E = _eight_point(x1[inliers], x2[inliers])
        d = _sampson_px2(E, x1, x2, f)
        inliers = d < thr2
    else:
        inliers = best_inliers

    best_pose = None
    best_votes = -1
    best_depths = None
    for R, t in _decompose_essential(E):
        z1, z2, X = _midpoint_depths(R, t, x1[inliers], x2[inliers])
        votes = int(((z1 > 0) & (z2 > 0)).sum())
        if votes > best_votes:
            best_votes = votes
            best_pose = (R, t)
            best_depths = (z1, z2, X)
    R, t = best_pose
    tn = np.linalg.norm(t)
    pose = SE3Pose.from_rt(R, t / tn if tn > 0 else t)

    # pure-rotation degeneracy: triangulated parallax collapses
    z1, z2, X = best_depths
    ok = (z1 > 0) & (z2 > 0)
    degenerate = False
    if ok.sum() >= 4:
        c2 = -R.T @ t
        a = X[ok]
        b = X[ok] - c2
        cosang = np.sum(a * b, axis=1) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-30)
        ang = np.arccos(np.clip(cosang, -1, 1))
        degenerate = bool(np.median(ang) < math.radians(0.1))
    else:
        degenerate = True

    return RansacResult(pose=pose, inliers=inliers, degenerate=degenerate,
                        inlier_count=int(inliers.sum()))

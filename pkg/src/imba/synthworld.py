"""Procedural scene and video generation with exact ground truth.

The world is an infinite heightfield z = h(x, y) built from a handful of
random 2D sinusoids, colored by a smooth 3D sinusoid texture. Cameras fly a
smooth closed path around a 10x10 m patch of interest. Rendering casts one
ray per pixel (Lipschitz-bounded marching plus bisection), so depth and 3D
points are exact up to the 1e-9 m intersection tolerance and ground-truth
correspondence is available at arbitrary sub-pixel locations by re-casting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import io
from .geometry import Intrinsics, SE3Pose, project

PATCH_EXTENT = 10.0          # side length of the ground patch of interest, meters
HEIGHT_AMPLITUDE_SUM = 0.45  # total sinusoid amplitude, keeps |h| <= 0.45 m
HEIGHT_WAVELENGTHS = (1.0, 8.0)
TEXTURE_WAVES = 24
TEXTURE_WAVELENGTHS = (0.15, 2.0)
INTERSECT_TOL = 1e-9         # bisection tolerance along the ray, meters
OCCLUSION_DEPTH_TOL = 0.01   # 1 cm


@dataclass(frozen=True)
class SceneSpec:
    num_waves: int = 6
    rng_seed: int = 0


@dataclass(frozen=True)
class TrajectorySpec:
    frame_count: int = 200
    waypoints: int = 8
    interpolation_order: int = 3
    min_height: float = 1.0
    max_height: float = 3.0
    lookat_jitter: float = 2.0
    rng_seed: int = 0


@dataclass(frozen=True)
class CorruptionSpec:
    pixel_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_radius: float = 30.0
    rng_seed: int = 0


class Scene:
    """Heightfield plus texture, fully determined by a SceneSpec."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.rng_seed)
        m = spec.num_waves
        theta = rng.uniform(0, 2 * np.pi, size=m)
        wavelength = rng.uniform(*HEIGHT_WAVELENGTHS, size=m)
        k = 2 * np.pi / wavelength
        self._hk = np.stack([k * np.cos(theta), k * np.sin(theta)], axis=1)
        amp = rng.uniform(0.5, 1.0, size=m)
        self._hamp = amp * (HEIGHT_AMPLITUDE_SUM / amp.sum())
        self._hphase = rng.uniform(0, 2 * np.pi, size=m)
        # Lipschitz bound on |grad h|
        self.height_lipschitz = float(np.sum(self._hamp * k))

        # texture: 3 channels, each a sum of 3D sinusoids with 1/sqrt(f) falloff
        dirs = rng.normal(size=(3, TEXTURE_WAVES, 3))
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        tw = np.exp(rng.uniform(np.log(TEXTURE_WAVELENGTHS[0]),
                                np.log(TEXTURE_WAVELENGTHS[1]),
                                size=(3, TEXTURE_WAVES)))
        self._tk = dirs * (2 * np.pi / tw)[:, :, None]
        self._tphase = rng.uniform(0, 2 * np.pi, size=(3, TEXTURE_WAVES))
        self._tamp = np.sqrt(tw)
        # scale so values rarely clip when mapped to [0, 1]
        std = np.sqrt(0.5 * np.sum(self._tamp**2, axis=1))
        self._tscale = 0.5 / (2.5 * std)

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        phase = (x[..., None] * self._hk[:, 0] + y[..., None] * self._hk[:, 1]
                 + self._hphase)
        return np.sin(phase) @ self._hamp

    def texture(self, points):
        """Color in [0, 1] for (N, 3) world points; returns (N, 3)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((points.shape[0], 3))
        for c in range(3):
            phase = points @ self._tk[c].T + self._tphase[c]
            val = np.sin(phase) @ self._tamp[c]
            out[:, c] = 0.5 + self._tscale[c] * val
        return np.clip(out, 0.0, 1.0)

    def cast_rays(self, origins, dirs, t_max=60.0):
        """First surface intersection of unit-direction rays.

        Returns (t, hit) where t is the ray parameter of the hit and hit is a
        boolean mask; misses (sky) have t = inf.
        """
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        n = origins.shape[0]
        t = np.full(n, 1e-3)
        t_hit = np.full(n, np.inf)
        lo = np.zeros(n)
        hi = np.zeros(n)
        bracketed = np.zeros(n, dtype=bool)
        # rays pointing up from above the highest possible surface never hit
        z_top = HEIGHT_AMPLITUDE_SUM + 1e-9
        active = ~((origins[:, 2] > z_top) & (dirs[:, 2] >= 0))

        slope = np.abs(dirs[:, 2]) + self.height_lipschitz * np.linalg.norm(
            dirs[:, :2], axis=1) + 1e-12
        g_prev = np.full(n, np.inf)
        t_prev = t.copy()
        for _ in range(400):
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            p = origins[idx] + t[idx, None] * dirs[idx]
            g = p[:, 2] - self.height(p[:, 0], p[:, 1])
            crossed = g < 0
            if crossed.any():
                ci = idx[crossed]
                lo[ci] = t_prev[ci]
                hi[ci] = t[ci]
                bracketed[ci] = True
                active[ci] = False
                idx = idx[~crossed]
                g = g[~crossed]
            if idx.size == 0:
                continue
            t_prev[idx] = t[idx]
            g_prev[idx] = g
            step = np.maximum(g / slope[idx], 1e-3)
            t[idx] = t[idx] + step
            done = t[idx] > t_max
            if done.any():
                active[idx[done]] = False

        if bracketed.any():
            bi = np.nonzero(bracketed)[0]
            a = lo[bi]
            b = hi[bi]
            o = origins[bi]
            d = dirs[bi]
            for _ in range(64):
                mid = 0.5 * (a + b)
                p = o + mid[:, None] * d
                g = p[:, 2] - self.height(p[:, 0], p[:, 1])
                below = g < 0
                b = np.where(below, mid, b)
                a = np.where(below, a, mid)
                if np.max(b - a) < INTERSECT_TOL:
                    break
            t_hit[bi] = 0.5 * (a + b)
        return t_hit, bracketed


def look_at_pose(position, target, fallback_down=None):
    """World-to-camera pose with +z forward toward target and +y pointing down."""
    position = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - position
    f = f / np.linalg.norm(f)
    down0 = np.array([0.0, 0.0, -1.0])
    d = down0 - (down0 @ f) * f
    if np.linalg.norm(d) < 1e-6:
        d = (fallback_down if fallback_down is not None
             else np.array([1.0, 0.0, 0.0]))
        d = d - (d @ f) * f
    d = d / np.linalg.norm(d)
    r = np.cross(d, f)
    R = np.stack([r, d, f])
    return SE3Pose.from_rt(R, -R @ position)


def _patch_samples(scene, n=12):
    g = np.linspace(-PATCH_EXTENT / 2, PATCH_EXTENT / 2, n)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel(), scene.height(xx.ravel(), yy.ravel())],
                   axis=1)
    return pts


def _frame_stats(scene, poses, K, width, height):
    """Per-frame patch visibility fraction and consecutive-frame median flow."""
    pts = _patch_samples(scene)
    vis = []
    projections = []
    for T in poses:
        x = T.transform(pts)
        z = x[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K.fx * x[:, 0] / z + K.cx
            v = K.fy * x[:, 1] / z + K.cy
        ok = (z > 0.05) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
        vis.append(ok.mean())
        projections.append((np.stack([u, v], axis=1), ok))
    flows = []
    for a, b in zip(projections[:-1], projections[1:]):
        both = a[1] & b[1]
        if both.sum() < 5:
            flows.append(np.inf)
            continue
        flows.append(float(np.median(np.linalg.norm(b[0][both] - a[0][both],
                                                    axis=1))))
    return np.array(vis), np.array(flows)


def build_trajectory(scene: Scene, spec: TrajectorySpec, K: Intrinsics,
                     width: int, height: int, max_attempts=50):
    """Smooth closed camera path satisfying the visibility and flow constraints.

    Candidate paths are drawn from sub-seeds of spec.rng_seed until every
    frame sees >= 60% of the patch and the consecutive-frame median flow stays
    within [2, 40] px.
    """
    for attempt in range(max_attempts):
        rng = np.random.default_rng([spec.rng_seed, attempt])
        w = spec.waypoints
        ang = np.linspace(0, 2 * np.pi, w, endpoint=False)
        ang = ang + rng.uniform(-0.2, 0.2, size=w)
        radius = rng.uniform(4.5, 6.5, size=w)
        x = radius * np.cos(ang)
        y = radius * np.sin(ang)
        z = scene.height(x, y) + rng.uniform(spec.min_height, spec.max_height,
                                             size=w)
        waypoints = np.stack([x, y, z], axis=1)
        waypoints = np.vstack([waypoints, waypoints[:1]])  # close the loop

        u = np.arange(w + 1, dtype=float)
        if spec.interpolation_order >= 3:
            spline = CubicSpline(u, waypoints, axis=0, bc_type="periodic")
            sample = spline(np.linspace(0, w, spec.frame_count, endpoint=False))
        else:
            ts = np.linspace(0, w, spec.frame_count, endpoint=False)
            sample = np.stack([np.interp(ts, u, waypoints[:, c])
                               for c in range(3)], axis=1)

        target_base = np.append(rng.uniform(-1.5, 1.5, size=2), 0.0)
        target_base[2] = scene.height(target_base[0], target_base[1])
        jitter_phase = rng.uniform(0, 2 * np.pi, size=2)
        fi = np.arange(spec.frame_count)
        jitter = 0.5 * spec.lookat_jitter * np.stack([
            np.sin(2 * np.pi * fi / spec.frame_count * 2 + jitter_phase[0]),
            np.cos(2 * np.pi * fi / spec.frame_count * 3 + jitter_phase[1]),
            np.zeros(spec.frame_count)], axis=1)

        poses = [look_at_pose(sample[f], target_base + jitter[f])
                 for f in range(spec.frame_count)]
        vis, flows = _frame_stats(scene, poses, K, width, height)
        if vis.min() >= 0.6 and flows.min() >= 2.0 and flows.max() <= 40.0:
            return poses
    raise RuntimeError(f"no valid trajectory found in {max_attempts} attempts")


@dataclass
class GroundTruth:
    """Exact per-frame pose and depth, with the scene kept for re-casting."""

    poses: list
    K: Intrinsics
    width: int
    height: int
    scene: Scene
    depths: list = field(default_factory=list)

    def depth(self, frame):
        return self.depths[frame]

    def point_from_depth(self, frame, uv, depth):
        """World point of a pixel given its camera-frame depth."""
        x_cam = np.array([(uv[0] - self.K.cx) / self.K.fx * depth,
                          (uv[1] - self.K.cy) / self.K.fy * depth,
                          depth])
        return self.poses[frame].inverse().transform(x_cam)

    def cast_pixel(self, frame, uv):
        """Exact surface point seen at a (sub-pixel) coordinate, or None."""
        T = self.poses[frame]
        d_cam = self.K.normalize(uv)
        d = T.rotation().T @ d_cam
        d = d / np.linalg.norm(d)
        t, hit = self.scene.cast_rays(T.center()[None, :], d[None, :])
        if not hit[0]:
            return None
        return T.center() + t[0] * d


def render_frame(scene: Scene, pose: SE3Pose, K: Intrinsics, width, height):
    """Ray-cast one frame. Returns (image float32 (H,W,3), depth float64 (H,W)).

    Missed rays (sky) get a constant 0.5 color and NaN depth.
    """
    xs, ys = np.meshgrid(np.arange(width, dtype=float),
                         np.arange(height, dtype=float))
    d_cam = np.stack([(xs.ravel() - K.cx) / K.fx,
                      (ys.ravel() - K.cy) / K.fy,
                      np.ones(width * height)], axis=1)
    norms = np.linalg.norm(d_cam, axis=1)
    R = pose.rotation()
    d_world = (d_cam / norms[:, None]) @ R
    center = pose.center()
    origins = np.broadcast_to(center, d_world.shape)
    t, hit = scene.cast_rays(origins, d_world)

    depth = np.full(width * height, np.nan)
    depth[hit] = t[hit] / norms[hit]  # z_cam = t * unit_dir_z_cam = t / |K^-1 uv|
    image = np.full((width * height, 3), 0.5, dtype=np.float32)
    if hit.any():
        pts = center + t[hit, None] * d_world[hit]
        image[hit] = scene.texture(pts).astype(np.float32)
    return image.reshape(height, width, 3), depth.reshape(height, width)


def render(scene: Scene, poses, K: Intrinsics, width, height):
    """Render a full trajectory; returns (images list, GroundTruth)."""
    gt = GroundTruth(poses=list(poses), K=K, width=width, height=height,
                     scene=scene)
    images = []
    for pose in poses:
        img, depth = render_frame(scene, pose, K, width, height)
        images.append(img)
        gt.depths.append(depth)
    return images, gt


def _bilinear_depth(depth, uv):
    """Bilinear depth lookup; None near invalid (NaN) samples or borders."""
    h, w = depth.shape
    x, y = float(uv[0]), float(uv[1])
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        return None
    x0 = min(int(math.floor(x)), w - 2)
    y0 = min(int(math.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    block = depth[y0:y0 + 2, x0:x0 + 2]
    if np.isnan(block).any():
        return None
    return float(block[0, 0] * (1 - fx) * (1 - fy) + block[0, 1] * fx * (1 - fy)
                 + block[1, 0] * (1 - fx) * fy + block[1, 1] * fx * fy)


def gt_correspondence(gt: GroundTruth, frame_i: int, frame_j: int, query):
    """Ground-truth location of a frame_i pixel in frame_j, or None.

    None covers sky pixels, points projecting outside frame_j, and occlusion
    (projected depth differing from frame_j's depth map by more than 1 cm).
    """
    p = gt.cast_pixel(frame_i, query)
    if p is None:
        return None
    x_j = gt.poses[frame_j].transform(p)
    if x_j[2] <= 1e-9:
        return None
    uv_j = np.array([gt.K.fx * x_j[0] / x_j[2] + gt.K.cx,
                     gt.K.fy * x_j[1] / x_j[2] + gt.K.cy])
    depth_map_value = _bilinear_depth(gt.depth(frame_j), uv_j)
    if depth_map_value is None:
        return None
    if abs(depth_map_value - x_j[2]) > OCCLUSION_DEPTH_TOL:
        return None
    return uv_j


def corrupt_matches(matches, spec: CorruptionSpec):
    """Noise and outlier injection on the target side of correspondences.

    matches: list of Correspondence. Returns (corrupted list, outlier mask).
    The query side is left exact; targets get isotropic Gaussian noise, and a
    seeded fraction is replaced by a uniform displacement within a disc of
    outlier_radius pixels. Labels are returned for oracle tests.
    """
    from .ba import Correspondence  # local import, avoids a module cycle

    rng = np.random.default_rng(spec.rng_seed)
    n = len(matches)
    outlier = np.zeros(n, dtype=bool)
    n_out = int(round(spec.outlier_fraction * n))
    if n_out > 0:
        outlier[rng.permutation(n)[:n_out]] = True

    out = []
    for idx, c in enumerate(matches):
        uj = np.asarray(c.uj, dtype=float).copy()
        if outlier[idx]:
            r = spec.outlier_radius * math.sqrt(rng.uniform())
            ang = rng.uniform(0, 2 * math.pi)
            uj = uj + np.array([r * math.cos(ang), r * math.sin(ang)])
        if spec.pixel_noise_sigma > 0:
            uj = uj + rng.normal(scale=spec.pixel_noise_sigma, size=2)
        out.append(Correspondence(c.frame_i, c.frame_j, c.ui, uj,
                                  weight=c.weight))
    return out, outlier


# ------------------------------------------------------------------ dataset IO

def write_dataset(out_dir, scene_spec: SceneSpec, traj_spec: TrajectorySpec,
                  K: Intrinsics, width: int, height: int, extra_manifest=None):
    """Generate and stream a dataset to disk; returns the manifest dict."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(parents=True, exist_ok=True)

    scene = Scene(scene_spec)
    poses = build_trajectory(scene, traj_spec, K, width, height)
    manifest = {
        "format": "imba-dataset-v1",
        "scene": {"num_waves": scene_spec.num_waves,
                  "rng_seed": scene_spec.rng_seed},
        "trajectory": {
            "frame_count": traj_spec.frame_count,
            "waypoints": traj_spec.waypoints,
            "interpolation_order": traj_spec.interpolation_order,
            "min_height": traj_spec.min_height,
            "max_height": traj_spec.max_height,
            "lookat_jitter": traj_spec.lookat_jitter,
            "rng_seed": traj_spec.rng_seed,
        },
        "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy},
        "resolution": {"width": width, "height": height},
        "frame_count": traj_spec.frame_count,
    }
    if extra_manifest:
        manifest.update(extra_manifest)

    pose_records = []
    for f, pose in enumerate(poses):
        img, depth = render_frame(scene, pose, K, width, height)
        io.write_tensor(out / "images" / f"frame_{f:04d}.bin", img)
        io.write_tensor(out / "depths" / f"depth_{f:04d}.bin", depth)
        pose_records.append({"frame": f, "qwxyz": pose.q.tolist(),
                             "txyz": pose.t.tolist()})
    io.write_json(out / "poses.json", pose_records)
    io.write_json(out / "manifest.json", manifest)
    return manifest


class Dataset:
    """Read access to a generated dataset, with the scene rebuilt for exact GT."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = io.read_json(self.root / "manifest.json")
        mi = self.manifest["intrinsics"]
        self.K = Intrinsics(mi["fx"], mi["fy"], mi["cx"], mi["cy"])
        res = self.manifest["resolution"]
        self.width, self.height = res["width"], res["height"]
        self.frame_count = self.manifest["frame_count"]
        self.scene = Scene(SceneSpec(**self.manifest["scene"]))
        self.poses = [SE3Pose(np.array(r["qwxyz"]), np.array(r["txyz"]))
                      for r in io.read_json(self.root / "poses.json")]
        self._depth_cache = {}

    def image(self, frame):
        return io.read_tensor(self.root / "images" / f"frame_{frame:04d}.bin")

    def depth(self, frame):
        if frame not in self._depth_cache:
            if len(self._depth_cache) > 16:
                self._depth_cache.clear()
            self._depth_cache[frame] = io.read_tensor(
                self.root / "depths" / f"depth_{frame:04d}.bin")
        return self._depth_cache[frame]

    def ground_truth(self):
        gt = GroundTruth(poses=self.poses, K=self.K, width=self.width,
                         height=self.height, scene=self.scene)
        gt.depths = _LazyDepths(self)
        return gt


class _LazyDepths:
    def __init__(self, dataset):
        self._dataset = dataset

    def __getitem__(self, frame):
        return self._dataset.depth(frame)

    def __len__(self):
        return self._dataset.frame_count

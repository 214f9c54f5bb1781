"""Procedural multi-view driving scenes with exact ground truth.

A scene is a short planar (SE(2)) ego trajectory through a world of moving
vehicle boxes and a static road layout. Rendering is z-buffered ray
casting against the ground plane and oriented boxes, so every rendered
depth equals the analytic ray intersection distance. The same world
produces BEV segmentation masks and center-heatmap detection targets.

Conventions: ego frame x forward / y left / z up; camera frame x right /
y down / z forward (optical axis). Depth is camera-frame z. Box arrays
have columns [cx, cy, cz, l, w, h, yaw, vx, vy, class_id].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolyPath

BOX_COLS = ("cx", "cy", "cz", "l", "w", "h", "yaw", "vx", "vy", "cls")

SKY_COLOR = np.array([0.60, 0.72, 0.92])
OFFROAD_COLOR = np.array([0.18, 0.34, 0.20])
ROAD_COLOR = np.array([0.38, 0.39, 0.42])
DIVIDER_COLOR = np.array([0.93, 0.91, 0.82])
VEHICLE_COLOR = np.array([0.85, 0.18, 0.12])
DIVIDER_HALF_WIDTH = 0.25


class SceneError(ValueError):
    """Infeasible or inconsistent scene configuration."""


@dataclass(frozen=True)
class EgoPose:
    x: float
    y: float
    yaw: float

    def world_from_ego(self, pts: np.ndarray) -> np.ndarray:
        """Map (..., 3) or (..., 2) ego-frame points to world frame."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        out = np.array(pts, dtype=np.float64, copy=True)
        x = pts[..., 0] * c - pts[..., 1] * s + self.x
        y = pts[..., 0] * s + pts[..., 1] * c + self.y
        out[..., 0] = x
        out[..., 1] = y
        return out

    def ego_from_world(self, pts: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        out = np.array(pts, dtype=np.float64, copy=True)
        dx = pts[..., 0] - self.x
        dy = pts[..., 1] - self.y
        out[..., 0] = dx * c + dy * s
        out[..., 1] = -dx * s + dy * c
        return out

    def rotate_vec_to_ego(self, v: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        out = np.array(v, dtype=np.float64, copy=True)
        out[..., 0] = v[..., 0] * c + v[..., 1] * s
        out[..., 1] = -v[..., 0] * s + v[..., 1] * c
        return out


def relative_pose(current: EgoPose, past: EgoPose) -> tuple[float, float, float]:
    """(dx, dy, dyaw) of the past frame expressed in the current ego frame."""
    c, s = np.cos(current.yaw), np.sin(current.yaw)
    dx = past.x - current.x
    dy = past.y - current.y
    return (dx * c + dy * s, -dx * s + dy * c, past.yaw - current.yaw)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: X_cam = rotation @ X_ego + translation."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError(f"camera focal lengths must be positive, got {self.fx}, {self.fy}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise SceneError(f"camera rotation not orthonormal (max deviation {err:.2e})")


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if not self.cameras:
            raise SceneError("rig must contain at least one camera")
        for cam in self.cameras:
            cam.validate()

    def __len__(self) -> int:
        return len(self.cameras)

    def key(self) -> tuple:
        """Hashable geometry fingerprint, for pooling-index caches."""
        return tuple(
            (c.fx, c.fy, c.cx, c.cy, c.width, c.height,
             tuple(c.rotation.ravel()), tuple(c.translation))
            for c in self.cameras
        )


def make_rig(n_cameras: int, width: int, height: int, fov_deg: float = 110.0,
             mount_height: float = 1.6, pitch_deg: float = 10.0) -> CameraRig:
    """Evenly spaced ring of cameras looking outward with a slight downward pitch."""
    fx = width / (2.0 * np.tan(np.radians(fov_deg) / 2.0))
    fy = fx
    cams = []
    pitch = np.radians(pitch_deg)
    for i in range(n_cameras):
        yaw = 2.0 * np.pi * i / n_cameras
        c, s = np.cos(yaw), np.sin(yaw)
        # camera axes in ego coordinates: x right, y down, z forward
        base = np.array([
            [s, -c, 0.0],
            [0.0, 0.0, -1.0],
            [c, s, 0.0],
        ])
        cp, sp = np.cos(pitch), np.sin(pitch)
        tilt = np.array([
            [1.0, 0.0, 0.0],
            [0.0, cp, -sp],
            [0.0, sp, cp],
        ])
        rot = tilt @ base
        pos = np.array([0.0, 0.0, mount_height])
        cams.append(Camera(
            fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            rotation=rot, translation=-rot @ pos, width=width, height=height,
        ))
    return CameraRig(cameras=tuple(cams))


@dataclass(frozen=True)
class SceneConfig:
    n_timestamps: int = 9
    dt: float = 0.4
    n_boxes: int = 6
    box_speed: tuple[float, float] = (0.0, 4.0)
    box_turn_rate: tuple[float, float] = (-0.25, 0.25)
    box_length: tuple[float, float] = (3.6, 4.8)
    box_width: tuple[float, float] = (1.7, 2.1)
    box_height: tuple[float, float] = (1.5, 1.9)
    ego_speed: tuple[float, float] = (2.0, 5.0)
    ego_turn_rate: tuple[float, float] = (-0.12, 0.12)
    placement_radius: tuple[float, float] = (4.0, 11.5)
    min_spacing: float = 3.0
    min_ego_clearance: float = 3.0
    map_extent: float = 30.0
    occlusion_pair: bool = True

    def validate(self) -> None:
        if self.n_timestamps < 1:
            raise SceneError("n_timestamps must be >= 1")
        if self.dt <= 0:
            raise SceneError("dt must be positive")
        usable = np.pi * self.placement_radius[1] ** 2
        if self.n_boxes * self.min_spacing ** 2 > usable:
            raise SceneError(
                f"cannot place {self.n_boxes} boxes with spacing {self.min_spacing} "
                f"inside radius {self.placement_radius[1]}"
            )


@dataclass
class SceneSequence:
    """Ground-truth world sampled at uniform timestamps."""

    timestamps: np.ndarray
    ego_poses: list[EgoPose]
    boxes: list[np.ndarray]  # per timestamp, (n_boxes, 10) with BOX_COLS columns
    drivable_polygons: list[np.ndarray]  # world-frame (k, 2) closed polygons
    divider_polylines: list[np.ndarray]  # world-frame (k, 2) polylines
    seed: int

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)


@dataclass
class FramePacket:
    t_index: int
    images: np.ndarray  # (n_cam, H, W, 3) in [0, 1]
    depths: np.ndarray  # (n_cam, H, W), meters; 0 where the ray hit nothing
    ego_pose: EgoPose


def _integrate_track(p_end: np.ndarray, heading_end: float, speed: float,
                     turn_rate: float, n: int, dt: float) -> np.ndarray:
    """Positions at n timestamps ending at p_end, constant speed / turn rate."""
    headings = heading_end + turn_rate * dt * (np.arange(n) - (n - 1))
    steps = speed * dt * np.stack([np.cos(headings[:-1]), np.sin(headings[:-1])], axis=-1) \
        if n > 1 else np.zeros((0, 2))
    offsets = np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    return p_end - (offsets[-1] - offsets)


def generate_scene(seed: int, cfg: SceneConfig) -> SceneSequence:
    """Deterministically sample a scene: ego track, vehicle tracks, road layout.

    The first two boxes are placed so that box 0 occludes box 1 from the
    forward camera at the middle timestamp (when occlusion_pair is set and
    at least two boxes are requested), which gives temporal fusion
    something to recover.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = cfg.n_timestamps
    dt = cfg.dt
    timestamps = np.arange(n) * dt

    ego_yaw0 = rng.uniform(-np.pi, np.pi)
    ego_speed = rng.uniform(*cfg.ego_speed)
    ego_turn = rng.uniform(*cfg.ego_turn_rate)
    yaws = ego_yaw0 + ego_turn * dt * np.arange(n)
    steps = ego_speed * dt * np.stack([np.cos(yaws[:-1]), np.sin(yaws[:-1])], axis=-1) \
        if n > 1 else np.zeros((0, 2))
    xy = np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    ego_poses = [EgoPose(float(x), float(y), float(yw)) for (x, y), yw in zip(xy, yaws)]
    ego_xy = xy
    final = ego_poses[-1]
    t_mid = (n - 1) // 2

    # per-box: end position (world), heading_end, speed, turn rate, size
    tracks: list[np.ndarray] = []
    sizes: list[np.ndarray] = []
    meta: list[tuple[float, float, float]] = []

    def track_ok(track: np.ndarray) -> bool:
        if np.abs(track).max() > cfg.map_extent:
            return False
        if np.min(np.linalg.norm(track - ego_xy, axis=1)) < cfg.min_ego_clearance:
            return False
        for other in tracks:
            if np.min(np.linalg.norm(track - other, axis=1)) < cfg.min_spacing:
                return False
        return True

    def sample_size() -> np.ndarray:
        return np.array([
            rng.uniform(*cfg.box_length),
            rng.uniform(*cfg.box_width),
            rng.uniform(*cfg.box_height),
        ])

    use_pair = cfg.occlusion_pair and cfg.n_boxes >= 2 and n >= 2
    if use_pair:
        pose_mid = ego_poses[t_mid]
        placed = False
        for _ in range(200):
            bearing = pose_mid.yaw + rng.uniform(-0.35, 0.35)
            ray = np.array([np.cos(bearing), np.sin(bearing)])
            d_far = rng.uniform(8.5, 11.0)
            d_near = rng.uniform(4.0, 5.8)
            p_far_mid = np.array([pose_mid.x, pose_mid.y]) + d_far * ray
            p_near_mid = np.array([pose_mid.x, pose_mid.y]) + d_near * ray
            far_heading = bearing + np.pi / 2 + rng.uniform(-0.3, 0.3)
            far_speed = rng.uniform(cfg.box_speed[0], min(cfg.box_speed[1], 0.8))
            near_heading = bearing + np.pi / 2 + rng.uniform(-0.4, 0.4)
            near_speed = rng.uniform(min(cfg.box_speed[1], 1.2), max(cfg.box_speed[1], 1.2))
            # anchor both tracks at the middle timestamp instead of the end
            tr_far = _integrate_track(p_far_mid, far_heading, far_speed, 0.0, n, dt)
            tr_far += p_far_mid - tr_far[t_mid]
            tr_near = _integrate_track(p_near_mid, near_heading, near_speed, 0.0, n, dt)
            tr_near += p_near_mid - tr_near[t_mid]
            if not track_ok(tr_far):
                continue
            tracks.append(tr_far)
            if not track_ok(tr_near):
                tracks.pop()
                continue
            tracks.append(tr_near)
            sizes.append(sample_size())
            sizes.append(sample_size() * np.array([1.0, 1.0, 1.15]))
            meta.append((far_heading, far_speed, 0.0))
            meta.append((near_heading, near_speed, 0.0))
            placed = True
            break
        if not placed:
            raise SceneError(f"seed {seed}: could not realize the occlusion pair")

    while len(tracks) < cfg.n_boxes:
        for attempt in range(400):
            bearing = rng.uniform(-np.pi, np.pi)
            radius = rng.uniform(*cfg.placement_radius)
            p_end = np.array([final.x, final.y]) + radius * np.array(
                [np.cos(final.yaw + bearing), np.sin(final.yaw + bearing)]
            )
            heading = rng.uniform(-np.pi, np.pi)
            speed = rng.uniform(*cfg.box_speed)
            turn = rng.uniform(*cfg.box_turn_rate) if rng.uniform() < 0.3 else 0.0
            track = _integrate_track(p_end, heading, speed, turn, n, dt)
            if track_ok(track):
                tracks.append(track)
                sizes.append(sample_size())
                meta.append((heading, speed, turn))
                break
        else:
            raise SceneError(
                f"seed {seed}: box placement failed after 400 attempts "
                f"(n_boxes={cfg.n_boxes}, spacing={cfg.min_spacing})"
            )

    boxes_per_t: list[np.ndarray] = []
    n_boxes = len(tracks)
    all_tracks = np.stack(tracks)  # (n_boxes, n, 2)
    vel = np.zeros((n_boxes, n, 2))
    if n > 1:
        vel[:, :-1] = (all_tracks[:, 1:] - all_tracks[:, :-1]) / dt
        vel[:, -1] = vel[:, -2]
    for t in range(n):
        arr = np.zeros((n_boxes, 10))
        for b in range(n_boxes):
            heading, speed, turn = meta[b]
            yaw_t = heading + turn * dt * (t - (n - 1))
            l, w, hgt = sizes[b]
            arr[b] = [
                all_tracks[b, t, 0], all_tracks[b, t, 1], hgt / 2.0,
                l, w, hgt, yaw_t, vel[b, t, 0], vel[b, t, 1], 0.0,
            ]
        boxes_per_t.append(arr)

    drivable, dividers = _make_layout(rng, ego_xy, yaws, cfg.map_extent)

    return SceneSequence(
        timestamps=timestamps,
        ego_poses=ego_poses,
        boxes=boxes_per_t,
        drivable_polygons=drivable,
        divider_polylines=dividers,
        seed=seed,
    )


def _make_layout(rng: np.random.Generator, ego_xy: np.ndarray, yaws: np.ndarray,
                 extent: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    center = ego_xy.mean(axis=0)
    heading = float(np.arctan2(np.sin(yaws).mean(), np.cos(yaws).mean()))
    polys = []
    lines = []
    for road_heading in ([heading, heading + np.pi / 2 + rng.uniform(-0.2, 0.2)]
                         if rng.uniform() < 0.5 else [heading]):
        d = np.array([np.cos(road_heading), np.sin(road_heading)])
        nvec = np.array([-d[1], d[0]])
        half_w = rng.uniform(5.0, 7.0)
        off = nvec * rng.uniform(-1.5, 1.5)
        c = center + off
        a, b = c - extent * d, c + extent * d
        polys.append(np.stack([
            a + half_w * nvec, b + half_w * nvec, b - half_w * nvec, a - half_w * nvec,
        ]))
        line_pts = np.stack([a, b])
        for lane_off in (0.0, half_w - 0.8, -(half_w - 0.8)):
            lines.append(line_pts + lane_off * nvec)
    return polys, lines


# ---------------------------------------------------------------------------
# projection and rendering
# ---------------------------------------------------------------------------

def project(point: np.ndarray, pose: EgoPose, cam: Camera,
            eps: float = 1e-9) -> tuple[float, float, float] | None:
    """World point -> (u, v, depth) through ego-from-world then camera-from-ego.

    Returns None when the point lies at or behind the camera plane.
    """
    p = np.asarray(point, dtype=np.float64)
    p_ego = pose.ego_from_world(p[None, :])[0]
    p_cam = cam.rotation @ p_ego + cam.translation
    z = p_cam[2]
    if z <= eps:
        return None
    return (
        float(cam.fx * p_cam[0] / z + cam.cx),
        float(cam.fy * p_cam[1] / z + cam.cy),
        float(z),
    )


def _boxes_maybe_visible(cam: Camera, pose: EgoPose, boxes: np.ndarray) -> np.ndarray:
    """Indices of boxes whose bounding sphere reaches in front of the camera."""
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    centers_ego = pose.ego_from_world(boxes[:, :3])
    centers_ego[:, 2] = boxes[:, 2]
    z_cam = centers_ego @ cam.rotation[2] + cam.translation[2]
    radius = 0.5 * np.linalg.norm(boxes[:, 3:6], axis=1)
    return np.flatnonzero(z_cam + radius > 1e-9)


def _camera_rays_world(cam: Camera, pose: EgoPose) -> tuple[np.ndarray, np.ndarray]:
    """Ray origin and per-pixel directions (z_cam = 1) in world coordinates."""
    u = np.arange(cam.width)
    v = np.arange(cam.height)
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([
        (uu - cam.cx) / cam.fx,
        (vv - cam.cy) / cam.fy,
        np.ones_like(uu, dtype=np.float64),
    ], axis=-1).reshape(-1, 3)
    r_ego_from_cam = cam.rotation.T
    origin_ego = -cam.rotation.T @ cam.translation
    dirs_ego = dirs_cam @ r_ego_from_cam.T
    c, s = np.cos(pose.yaw), np.sin(pose.yaw)
    rot_we = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    origin_world = rot_we @ origin_ego + np.array([pose.x, pose.y, 0.0])
    dirs_world = dirs_ego @ rot_we.T
    return origin_world, dirs_world


def ray_box_intersection(origin: np.ndarray, dirs: np.ndarray,
                         box: np.ndarray) -> np.ndarray:
    """Entry distance of rays into an oriented box; +inf where there is no hit.

    Distances are in units of the (possibly non-unit) direction vectors, so
    with z_cam = 1 parameterization they are camera depths directly.
    """
    return _ray_boxes_intersection(origin, dirs, box[None, :])[0]


def _ray_boxes_intersection(origin: np.ndarray, dirs: np.ndarray,
                            boxes: np.ndarray) -> np.ndarray:
    """Slab test of M rays against B oriented boxes at once; (B, M) distances."""
    centers = boxes[:, :3]
    half = boxes[:, 3:6] / 2.0  # (B, 3)
    yaw = boxes[:, 6]
    c, s = np.cos(yaw), np.sin(yaw)
    zeros = np.zeros_like(c)
    ones = np.ones_like(c)
    rot = np.stack([
        np.stack([c, s, zeros], axis=-1),
        np.stack([-s, c, zeros], axis=-1),
        np.stack([zeros, zeros, ones], axis=-1),
    ], axis=1)  # (B, 3, 3) world -> box
    o = np.einsum("bij,bj->bi", rot, origin[None, :] - centers)  # (B, 3)
    d = np.matmul(dirs[None, :, :], rot.transpose(0, 2, 1))  # (B, M, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half[:, None, :] - o[:, None, :]) / d
        t2 = (half[:, None, :] - o[:, None, :]) / d
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    parallel = d == 0.0
    if parallel.any():
        inside = np.broadcast_to((np.abs(o) <= half)[:, None, :], parallel.shape)
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_far > 0.0) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def _ground_labels(points_xy: np.ndarray, scene: SceneSequence) -> np.ndarray:
    """0 = off-road, 1 = drivable, 2 = divider for world-frame (M, 2) points."""
    labels = np.zeros(points_xy.shape[0], dtype=np.int64)
    for poly in scene.drivable_polygons:
        labels[PolyPath(poly).contains_points(points_xy)] = 1
    onroad = labels == 1
    if scene.divider_polylines and onroad.any():
        # dividers are painted on the road, so off-road points can be skipped
        d = _min_dist_to_polylines(points_xy[onroad], scene.divider_polylines)
        hits = np.zeros(points_xy.shape[0], dtype=bool)
        hits[np.flatnonzero(onroad)[d <= DIVIDER_HALF_WIDTH]] = True
        labels[hits] = 2
    return labels


_TEXTURE_RES = 0.125  # meters per texel of the cached ground-label texture


def _ground_texture(scene: SceneSequence) -> tuple[np.ndarray, float, float]:
    """Scene-cached nearest-texel rasterization of the static layout.

    Rendering looks ground labels up here instead of re-running polygon
    tests per pixel; BEV ground truth keeps the exact tests.
    """
    cached = getattr(scene, "_texture_cache", None)
    if cached is not None:
        return cached
    pts = [np.asarray([[p.x, p.y] for p in scene.ego_poses])]
    pts.extend(scene.drivable_polygons)
    allpts = np.concatenate(pts)
    x0 = float(allpts[:, 0].min() - 5.0)
    y0 = float(allpts[:, 1].min() - 5.0)
    x1 = float(allpts[:, 0].max() + 5.0)
    y1 = float(allpts[:, 1].max() + 5.0)
    nx = int(np.ceil((x1 - x0) / _TEXTURE_RES))
    ny = int(np.ceil((y1 - y0) / _TEXTURE_RES))
    xs = x0 + (np.arange(nx) + 0.5) * _TEXTURE_RES
    ys = y0 + (np.arange(ny) + 0.5) * _TEXTURE_RES
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    labels = _ground_labels(np.stack([gx.ravel(), gy.ravel()], axis=-1), scene)
    tex = labels.reshape(nx, ny)
    scene._texture_cache = (tex, x0, y0)  # type: ignore[attr-defined]
    return scene._texture_cache  # type: ignore[attr-defined]


def _ground_labels_fast(points_xy: np.ndarray, scene: SceneSequence) -> np.ndarray:
    tex, x0, y0 = _ground_texture(scene)
    ix = np.floor((points_xy[:, 0] - x0) / _TEXTURE_RES).astype(np.int64)
    iy = np.floor((points_xy[:, 1] - y0) / _TEXTURE_RES).astype(np.int64)
    inside = (ix >= 0) & (ix < tex.shape[0]) & (iy >= 0) & (iy < tex.shape[1])
    out = np.zeros(points_xy.shape[0], dtype=np.int64)
    out[inside] = tex[ix[inside], iy[inside]]
    return out


def _min_dist_to_polylines(points: np.ndarray, polylines: list[np.ndarray]) -> np.ndarray:
    a = np.concatenate([line[:-1] for line in polylines])
    b = np.concatenate([line[1:] for line in polylines])
    ab = b - a
    ab2 = np.einsum("sd,sd->s", ab, ab)
    ab2[ab2 == 0.0] = 1.0
    a_ab = np.einsum("sd,sd->s", a, ab)
    a2 = np.einsum("sd,sd->s", a, a)
    out = np.empty(points.shape[0])
    # |p - a - t*ab|^2 expanded so everything stays (chunk, S); avoids the
    # (M, S, 2) broadcast which dominates on texture-sized point sets
    for lo in range(0, points.shape[0], 65536):
        p = points[lo:lo + 65536]
        q_ab = p @ ab.T - a_ab
        t = np.clip(q_ab / ab2, 0.0, 1.0)
        q2 = (p * p).sum(axis=1)[:, None] - 2.0 * (p @ a.T) + a2
        d2 = q2 - 2.0 * t * q_ab + t * t * ab2
        out[lo:lo + 65536] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out


def render_views(scene: SceneSequence, t: int, rig: CameraRig,
                 shading_range: float = 45.0) -> FramePacket:
    """Z-buffered ray-cast rendering of frame t for every camera in the rig."""
    if not (0 <= t < scene.n_frames):
        raise SceneError(f"frame index {t} out of range [0, {scene.n_frames})")
    pose = scene.ego_poses[t]
    boxes = scene.boxes[t]
    cam0 = rig.cameras[0]
    if cam0.width <= 0 or cam0.height <= 0:
        raise SceneError(f"zero-area resolution {cam0.width}x{cam0.height}")
    images = np.zeros((len(rig), cam0.height, cam0.width, 3))
    depths = np.zeros((len(rig), cam0.height, cam0.width))
    for ci, cam in enumerate(rig.cameras):
        origin, dirs = _camera_rays_world(cam, pose)
        n_pix = dirs.shape[0]
        zbuf = np.full(n_pix, np.inf)
        label = np.full(n_pix, -1, dtype=np.int64)  # -1 sky, -2 ground, >=0 box id
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = np.where(dz < -1e-12, -origin[2] / dz, np.inf)
        ground_hit = t_ground < zbuf
        zbuf[ground_hit] = t_ground[ground_hit]
        label[ground_hit] = -2
        visible = _boxes_maybe_visible(cam, pose, boxes)
        if visible.size:
            t_boxes = _ray_boxes_intersection(origin, dirs, boxes[visible])  # (B, M)
            nearest = t_boxes.argmin(axis=0)
            t_box = t_boxes[nearest, np.arange(t_boxes.shape[1])]
            closer = t_box < zbuf
            zbuf[closer] = t_box[closer]
            label[closer] = visible[nearest[closer]]
        img = np.tile(SKY_COLOR, (n_pix, 1))
        shade = np.clip(1.15 - zbuf / shading_range, 0.30, 1.0)
        gmask = label == -2
        if gmask.any():
            pts = origin[None, :2] + zbuf[gmask, None] * dirs[gmask, :2]
            glabels = _ground_labels_fast(pts, scene)
            gcolors = np.stack([OFFROAD_COLOR, ROAD_COLOR, DIVIDER_COLOR])[glabels]
            img[gmask] = gcolors * shade[gmask, None]
        bmask = label >= 0
        if bmask.any():
            img[bmask] = VEHICLE_COLOR[None, :] * shade[bmask, None]
        depth = np.where(np.isfinite(zbuf), zbuf, 0.0)
        images[ci] = np.clip(img, 0.0, 1.0).reshape(cam.height, cam.width, 3)
        depths[ci] = depth.reshape(cam.height, cam.width)
    return FramePacket(t_index=t, images=images, depths=depths, ego_pose=pose)


# ---------------------------------------------------------------------------
# BEV ground truth
# ---------------------------------------------------------------------------

@dataclass
class BevTargets:
    vehicle_mask: np.ndarray    # (X, Y)
    drivable_mask: np.ndarray   # (X, Y)
    divider_mask: np.ndarray    # (X, Y)
    heatmap: np.ndarray         # (X, Y, n_cls)
    regression: np.ndarray      # (X, Y, 8): dx, dy, log l, log w, sin, cos, vx, vy
    reg_mask: np.ndarray        # (X, Y, 1)


def gt_boxes_ego(scene: SceneSequence, t: int) -> np.ndarray:
    """Boxes of frame t in the ego frame: columns (x, y, l, w, yaw, vx, vy, cls)."""
    pose = scene.ego_poses[t]
    boxes = scene.boxes[t]
    out = np.zeros((boxes.shape[0], 8))
    if boxes.shape[0]:
        centers = pose.ego_from_world(boxes[:, :2])
        vels = pose.rotate_vec_to_ego(boxes[:, 7:9])
        out[:, 0:2] = centers
        out[:, 2:4] = boxes[:, 3:5]
        out[:, 4] = boxes[:, 6] - pose.yaw
        out[:, 5:7] = vels
        out[:, 7] = boxes[:, 9]
    return out


def cell_centers(nx: int, ny: int, cell: float) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame (x, y) coordinates of BEV cell centers, grid centered on ego."""
    xs = (np.arange(nx) - nx / 2 + 0.5) * cell
    ys = (np.arange(ny) - ny / 2 + 0.5) * cell
    return np.meshgrid(xs, ys, indexing="ij")


def rasterize_bev_gt(scene: SceneSequence, t: int, nx: int, ny: int, cell: float,
                     n_cls: int = 1) -> BevTargets:
    """Rasterize frame-t ground truth onto an ego-centered BEV grid.

    Vehicle mask uses half-open box footprints ([-l/2, l/2) x [-w/2, w/2) in
    the box frame). The heatmap places an exact 1.0 at each box's center
    cell with a Gaussian falloff scaled by box size; regression targets are
    written at the center cell only.
    """
    pose = scene.ego_poses[t]
    gx, gy = cell_centers(nx, ny, cell)
    veh = np.zeros((nx, ny))
    heat = np.zeros((nx, ny, n_cls))
    reg = np.zeros((nx, ny, 8))
    reg_mask = np.zeros((nx, ny, 1))

    ego_boxes = gt_boxes_ego(scene, t)
    half_x = nx * cell / 2.0
    half_y = ny * cell / 2.0
    for b in ego_boxes:
        x, y, l, w, yaw, vx, vy, cls = b
        c, s = np.cos(yaw), np.sin(yaw)
        dx = gx - x
        dy = gy - y
        u = dx * c + dy * s
        v = -dx * s + dy * c
        veh = np.maximum(veh, ((u >= -l / 2) & (u < l / 2) & (v >= -w / 2) & (v < w / 2)))
        if not (-half_x <= x < half_x and -half_y <= y < half_y):
            continue
        ci = int(np.floor(x / cell + nx / 2))
        cj = int(np.floor(y / cell + ny / 2))
        sigma = float(np.clip(min(l, w) / (3.0 * cell), 0.7, 2.5))
        ii = np.arange(nx)[:, None]
        jj = np.arange(ny)[None, :]
        g = np.exp(-(((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sigma ** 2)))
        ch = int(cls) % n_cls
        heat[:, :, ch] = np.maximum(heat[:, :, ch], g)
        cx_cell = (ci - nx / 2 + 0.5) * cell
        cy_cell = (cj - ny / 2 + 0.5) * cell
        reg[ci, cj] = [x - cx_cell, y - cy_cell, np.log(l), np.log(w),
                       np.sin(yaw), np.cos(yaw), vx, vy]
        reg_mask[ci, cj, 0] = 1.0

    world_pts = pose.world_from_ego(np.stack([gx.ravel(), gy.ravel()], axis=-1))
    drivable = np.zeros(nx * ny, dtype=bool)
    for poly in scene.drivable_polygons:
        drivable |= PolyPath(poly).contains_points(world_pts)
    divider = np.zeros(nx * ny, dtype=bool)
    if scene.divider_polylines:
        dmin = _min_dist_to_polylines(world_pts, scene.divider_polylines)
        divider = dmin <= max(DIVIDER_HALF_WIDTH, 0.5 * cell)

    return BevTargets(
        vehicle_mask=veh.astype(np.float64),
        drivable_mask=drivable.reshape(nx, ny).astype(np.float64),
        divider_mask=divider.reshape(nx, ny).astype(np.float64),
        heatmap=heat,
        regression=reg,
        reg_mask=reg_mask,
    )


# ---------------------------------------------------------------------------
# scene dump / load (cross-implementation fixtures)
# ---------------------------------------------------------------------------

def save_scene(scene: SceneSequence, rig: CameraRig, out_dir: str | Path,
               render: bool = True) -> Path:
    """Write a scene as raw per-frame binaries plus one JSON index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cam0 = rig.cameras[0]
    index = {
        "seed": scene.seed,
        "timestamps": scene.timestamps.tolist(),
        "ego_poses": [[p.x, p.y, p.yaw] for p in scene.ego_poses],
        "boxes": [b.tolist() for b in scene.boxes],
        "box_columns": list(BOX_COLS),
        "drivable_polygons": [p.tolist() for p in scene.drivable_polygons],
        "divider_polylines": [p.tolist() for p in scene.divider_polylines],
        "rig": [
            {
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "rotation": c.rotation.tolist(), "translation": c.translation.tolist(),
                "width": c.width, "height": c.height,
            }
            for c in rig.cameras
        ],
        "image_shape": [len(rig), cam0.height, cam0.width, 3],
        "rendered": bool(render),
    }
    with open(out / "index.json", "w") as fh:
        json.dump(index, fh, indent=1)
    if render:
        for t in range(scene.n_frames):
            packet = render_views(scene, t, rig)
            packet.images.astype("<f8").tofile(out / f"frame{t:03d}_images.bin")
            packet.depths.astype("<f8").tofile(out / f"frame{t:03d}_depths.bin")
    return out


def load_scene(path: str | Path) -> tuple[SceneSequence, CameraRig, list[FramePacket] | None]:
    path = Path(path)
    with open(path / "index.json") as fh:
        index = json.load(fh)
    scene = SceneSequence(
        timestamps=np.asarray(index["timestamps"], dtype=np.float64),
        ego_poses=[EgoPose(*p) for p in index["ego_poses"]],
        boxes=[np.asarray(b, dtype=np.float64).reshape(-1, 10) for b in index["boxes"]],
        drivable_polygons=[np.asarray(p) for p in index["drivable_polygons"]],
        divider_polylines=[np.asarray(p) for p in index["divider_polylines"]],
        seed=int(index["seed"]),
    )
    rig = CameraRig(cameras=tuple(
        Camera(
            fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
            rotation=np.asarray(c["rotation"]), translation=np.asarray(c["translation"]),
            width=int(c["width"]), height=int(c["height"]),
        )
        for c in index["rig"]
    ))
    frames = None
    if index.get("rendered"):
        n_cam, h, w, _ = index["image_shape"]
        frames = []
        for t in range(scene.n_frames):
            images = np.fromfile(path / f"frame{t:03d}_images.bin", dtype="<f8")
            depths = np.fromfile(path / f"frame{t:03d}_depths.bin", dtype="<f8")
            frames.append(FramePacket(
                t_index=t,
                images=images.reshape(n_cam, h, w, 3),
                depths=depths.reshape(n_cam, h, w),
                ego_pose=scene.ego_poses[t],
            ))
    return scene, rig, frames

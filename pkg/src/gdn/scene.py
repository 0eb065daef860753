"""Synthetic grasping scenes built from analytic primitives.

Objects are boxes (full extents ``w, d, h`` along local x, y, z) or cylinders
(``radius, height`` with the axis along local z), centered on their pose.
Everything here is in meters and the world frame unless noted otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import exp_so3, random_rotation, transform_points
from .guidance import DEFAULT_CLOUD_RADIUS, GripperModel

MAX_DIM = 0.3
ANTIPODAL_COS = 0.95
PENETRATION_TOL = 1e-4
# labels keep fingers a cloud-sphere radius off the surface so positives are collision-free
LABEL_CLEARANCE = DEFAULT_CLOUD_RADIUS + PENETRATION_TOL
TASKS = ("toy4", "general")
TOY_MODES = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)


class SceneError(ValueError):
    pass


class EmptyViewError(SceneError):
    pass


class NoFeasibleGraspError(SceneError):
    pass


@dataclass
class ObjectModel:
    kind: str
    dims: tuple
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.dims = tuple(float(x) for x in self.dims)
        expected = {"box": 3, "cylinder": 2}.get(self.kind)
        if expected is None:
            raise SceneError(f"unknown object kind {self.kind!r}")
        if len(self.dims) != expected or min(self.dims) <= 0 or max(self.dims) > MAX_DIM:
            raise SceneError(f"{self.kind} dims must be {expected} values in (0, {MAX_DIM}] m, got {self.dims}")
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)

    def to_dict(self):
        return {"kind": self.kind, "dims": list(self.dims), "t": self.t.tolist(), "R": self.R.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["dims"]), np.array(d["t"]), np.array(d["R"]))

    def moved(self, t, R):
        """The same object after applying the rigid transform (t, R) in the world frame."""
        return ObjectModel(self.kind, self.dims, R @ self.t + t, R @ self.R)

    def to_local(self, x):
        return (np.asarray(x, dtype=float) - self.t) @ self.R

    def signed_distance(self, x):
        p = self.to_local(x)
        if self.kind == "box":
            q = np.abs(p) - 0.5 * np.array(self.dims)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(q.max(axis=-1), 0.0)
        r, h = self.dims
        q = np.stack([np.hypot(p[..., 0], p[..., 1]) - r, np.abs(p[..., 2]) - h / 2], axis=-1)
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)

    def intersect(self, origins, dirs):
        """Nearest entering hit of rays from outside the object.

        Returns ``(dist, normals, face)``; misses (and rays starting inside) get
        ``dist = inf`` and ``face = -1``. Normals are world-frame outward normals.
        """
        o = self.to_local(origins)
        d = np.asarray(dirs, dtype=float) @ self.R
        with np.errstate(invalid="ignore", over="ignore"):
            if self.kind == "box":
                dist, n_loc, face = _ray_box(o, d, 0.5 * np.array(self.dims))
            else:
                dist, n_loc, face = _ray_cylinder(o, d, *self.dims)
        return dist, n_loc @ self.R.T, face

    def face_count(self):
        return 6 if self.kind == "box" else 3

    def sample_surface(self, n, rng):
        """Area-weighted uniform surface samples (world frame)."""
        if self.kind == "box":
            a = 0.5 * np.array(self.dims)
            areas = np.array([a[1] * a[2], a[1] * a[2], a[0] * a[2], a[0] * a[2], a[0] * a[1], a[0] * a[1]])
            face = rng.choice(6, size=n, p=areas / areas.sum())
            p = rng.uniform(-1, 1, (n, 3)) * a
            ax, sgn = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
            p[np.arange(n), ax] = sgn * a[ax]
        else:
            r, h = self.dims
            areas = np.array([2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
            face = rng.choice(3, size=n, p=areas / areas.sum())
            phi = rng.uniform(0, 2 * np.pi, n)
            rho = np.where(face == 0, r, r * np.sqrt(rng.random(n)))
            z = np.where(face == 0, rng.uniform(-h / 2, h / 2, n), np.where(face == 1, h / 2, -h / 2))
            p = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)
        return p @ self.R.T + self.t


def _safe_dir(d):
    return np.where(np.abs(d) < 1e-300, 1e-300, d)


def _ray_box(o, d, half):
    inv = 1.0 / _safe_dir(d)
    t1 = (-half - o) * inv
    t2 = (half - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    axis = tmin.argmax(axis=-1)
    hit = (near <= far) & (near > 0)
    dist = np.where(hit, near, np.inf)
    n = np.zeros(o.shape)
    idx = np.arange(len(o))
    sgn = -np.sign(d[idx, axis])
    n[idx, axis] = sgn
    face = np.where(hit, 2 * axis + (sgn < 0), -1)
    return dist, n, face


def _ray_cylinder(o, d, r, h):
    H = h / 2
    best = np.full(len(o), np.inf)
    n = np.zeros(o.shape)
    face = np.full(len(o), -1)
    # side
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
    disc = b * b - 4 * a * c
    ok = (a > 1e-18) & (disc >= 0) & (c > 0) & (b < 0)
    # cancellation-free smaller root: c / q with q = (-b + sqrt(disc)) / 2
    q = 0.5 * (-b + np.sqrt(np.maximum(disc, 0)))
    ts = np.where(ok, c / np.where(ok, q, 1.0), np.inf)
    zs = o[:, 2] + ts * d[:, 2]
    ok &= (ts > 0) & (np.abs(zs) <= H)
    best = np.where(ok, ts, best)
    p = o + ts[:, None] * d
    n = np.where(ok[:, None], np.stack([p[:, 0] / r, p[:, 1] / r, np.zeros(len(o))], -1), n)
    face = np.where(ok, 0, face)
    # caps: entering through z = +H (moving down) or z = -H (moving up)
    for sgn, fid in ((1.0, 1), (-1.0, 2)):
        dz = _safe_dir(d[:, 2])
        tc = (sgn * H - o[:, 2]) / dz
        p = o + tc[:, None] * d
        ok = (tc > 0) & (sgn * d[:, 2] < 0) & (sgn * o[:, 2] > H) & (p[:, 0] ** 2 + p[:, 1] ** 2 <= r * r) & (tc < best)
        best = np.where(ok, tc, best)
        n = np.where(ok[:, None], np.array([0.0, 0.0, sgn]), n)
        face = np.where(ok, fid, face)
    return best, n, face


@dataclass
class VirtualCamera:
    position: np.ndarray
    look_at: np.ndarray
    resolution: tuple = (128, 128)
    fov: float = np.radians(20.0)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=float).reshape(3)
        if np.allclose(self.position, self.look_at):
            raise SceneError("camera position must differ from look-at point")

    def to_dict(self):
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "resolution": list(self.resolution),
            "fov": float(self.fov),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["position"]), np.array(d["look_at"]), tuple(d["resolution"]), d["fov"])

    @classmethod
    def on_hemisphere(cls, rng, radius=0.5, target=np.zeros(3), elevation=(np.radians(15), np.radians(60)), **kw):
        az = rng.uniform(0, 2 * np.pi)
        el = rng.uniform(*elevation)
        pos = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        return cls(pos, target, **kw)

    def rays(self):
        fwd = self.look_at - self.position
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        if abs(fwd @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        w, h = self.resolution
        half = np.tan(self.fov / 2)
        xs = (np.arange(w) + 0.5) / w * 2 - 1
        ys = (np.arange(h) + 0.5) / h * 2 - 1
        gx, gy = np.meshgrid(xs * half * w / h, ys * half)
        dirs = fwd + gx.reshape(-1, 1) * right + gy.reshape(-1, 1) * down
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return np.broadcast_to(self.position, dirs.shape).copy(), dirs


def farthest_point_sample(points, n, start=0):
    points = np.asarray(points)
    chosen = np.empty(n, dtype=int)
    chosen[0] = start
    d2 = np.sum((points - points[start]) ** 2, axis=1)
    for j in range(1, n):
        chosen[j] = int(np.argmax(d2))
        d2 = np.minimum(d2, np.sum((points - points[chosen[j]]) ** 2, axis=1))
    return chosen


def render_partial_cloud(obj, camera, n, return_details=False):
    """Cast one ray per pixel, keep the nearest hits and downsample them to n points."""
    origins, dirs = camera.rays()
    dist, normals, face = obj.intersect(origins, dirs)
    hit = np.isfinite(dist)
    if not hit.any():
        raise EmptyViewError("camera sees no part of the object")
    if hit.sum() < n:
        raise SceneError(f"only {int(hit.sum())} surface hits, {n} points requested")
    pts = origins[hit] + dist[hit, None] * dirs[hit]
    idx = farthest_point_sample(pts, n)
    if return_details:
        return pts[idx], normals[hit][idx], face[hit][idx]
    return pts[idx]


# grasp construction --------------------------------------------------------


def _frame(x_axis, z_axis):
    """Rotation whose columns are (x, y = z cross x, z)."""
    y = np.cross(z_axis, x_axis)
    return np.stack([x_axis, y, z_axis], axis=-1)


def _cylinder_candidates(r, h, opening, count, rng, toy=False):
    H = h / 2
    fams = []
    if 2 * r < opening:
        fams += ["side", "top"]
    if h < opening and not toy:
        fams.append("across")
    if not fams:
        return None
    t = np.zeros((count, 3))
    R = np.zeros((count, 3, 3))
    for c in range(count):
        fam = "side" if toy else fams[rng.integers(len(fams))]
        if fam == "side":
            if toy:
                phi = TOY_MODES[rng.integers(4)] + rng.normal(0, np.radians(3.0))
                s = 1.0
            else:
                phi = rng.uniform(0, 2 * np.pi)
                s = rng.choice([-1.0, 1.0])
            x = np.array([np.cos(phi), np.sin(phi), 0.0])
            u = s * np.array([-np.sin(phi), np.cos(phi), 0.0])
            lim = max(H - 0.01, 0.0)
            t[c] = (0.0, 0.0, rng.uniform(-lim, lim))
            R[c] = _frame(x, -u)
        elif fam == "top":
            s = rng.choice([-1.0, 1.0])
            phi = rng.uniform(0, 2 * np.pi)
            x = np.array([np.cos(phi), np.sin(phi), 0.0])
            depth = rng.uniform(0.008, max(min(0.03, H), 0.008))
            t[c] = (0.0, 0.0, s * (H - depth))
            R[c] = _frame(x, np.array([0.0, 0.0, -s]))
        else:
            phi = rng.uniform(0, 2 * np.pi)
            u = np.array([np.cos(phi), np.sin(phi), 0.0])
            depth = rng.uniform(0.008, max(min(0.03, r), 0.008))
            t[c] = u * max(r - depth, 0.0)
            R[c] = _frame(np.array([0.0, 0.0, 1.0]), -u)
    return t, R


def _box_candidates(dims, opening, count, rng):
    a = 0.5 * np.array(dims)
    closing = [i for i in range(3) if dims[i] < opening]
    if not closing:
        return None
    eye = np.eye(3)
    t = np.zeros((count, 3))
    R = np.zeros((count, 3, 3))
    for c in range(count):
        i = closing[rng.integers(len(closing))]
        j, k = [x for x in range(3) if x != i][:: rng.choice([-1, 1])]
        s = rng.choice([-1.0, 1.0])
        depth = rng.uniform(0.008, max(min(0.03, a[j]), 0.008))
        pos = np.zeros(3)
        pos[j] = s * max(a[j] - depth, 0.0)
        pos[k] = rng.uniform(-1, 1) * max(a[k] - 0.01, 0.0)
        t[c] = pos
        R[c] = _frame(eye[i] * rng.choice([-1.0, 1.0]), -s * eye[j])
    return t, R


def _perturb(t, R, rng, toy):
    n = len(t)
    if toy:
        # shift along the approach axis: moves the closing chord off the cylinder axis
        shift = rng.choice([-1.0, 1.0], n) * rng.uniform(0.01, 0.03, n)
        return t + shift[:, None] * R[:, :, 2], R
    dt = rng.normal(0.0, 0.015, (n, 3))
    dR = exp_so3(rng.normal(0.0, 0.3, (n, 3)))
    return t + dt, R @ dR


def generate_grasps(obj, count, gripper_opening, rng, gripper=None, perturb_frac=0.35, toy=False, clearance=LABEL_CLEARANCE):
    """Antipodal candidates (some perturbed) in the world frame, labeled by the oracle."""
    if count < 1:
        raise ValueError("count must be >= 1")
    gripper = gripper or GripperModel.parallel_jaw(gripper_opening)
    if obj.kind == "cylinder":
        cand = _cylinder_candidates(*obj.dims, gripper_opening, count, rng, toy=toy)
    else:
        cand = _box_candidates(obj.dims, gripper_opening, count, rng)
    if cand is None:
        raise NoFeasibleGraspError(f"{obj.kind} {obj.dims} is wider than the {gripper_opening} m opening in every direction")
    t_loc, R_loc = cand
    n_pert = int(round(perturb_frac * count))
    if n_pert:
        sel = rng.choice(count, n_pert, replace=False)
        t_loc[sel], R_loc[sel] = _perturb(t_loc[sel], R_loc[sel], rng, toy)
    t = t_loc @ obj.R.T + obj.t
    R = obj.R @ R_loc
    labels = success_oracle(obj, t, R, gripper_opening, gripper, clearance)
    return t, R, labels


def success_oracle(obj, t, R, gripper_opening, gripper=None, clearance=0.0):
    """Analytic stand-in for a physics lift test.

    A grasp succeeds iff (a) both inward closing rays from the open fingertips
    hit the object with opposed normals (cos < -0.95), (b) the contact span is
    below the opening and (c) no gripper sphere penetrates the object by more
    than 1e-4 m (or, with ``clearance > 0``, comes closer than that to it).
    """
    gripper = gripper or GripperModel.parallel_jaw(gripper_opening)
    t = np.atleast_2d(np.asarray(t, dtype=float))
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    x_axis = R[:, :, 0]
    half = 0.5 * gripper_opening
    ok = np.ones(len(t), dtype=bool)
    hits, normals = [], []
    for sgn in (1.0, -1.0):
        start = t + sgn * half * x_axis
        dist, nrm, _ = obj.intersect(start, -sgn * x_axis)
        ok &= (dist <= gripper_opening) & (obj.signed_distance(start) > 0)
        hits.append(start - sgn * np.where(np.isfinite(dist), dist, 0.0)[:, None] * x_axis)
        normals.append(nrm)
    ok &= np.einsum("ni,ni->n", normals[0], normals[1]) < -ANTIPODAL_COS
    ok &= np.linalg.norm(hits[0] - hits[1], axis=1) < gripper_opening
    centers = transform_points(t, R, gripper.centers)
    gap = obj.signed_distance(centers) - gripper.radii
    ok &= np.all(gap >= clearance - PENETRATION_TOL, axis=1)
    return ok


# normalization -------------------------------------------------------------


def normalize_scene(points, grasp_t=None):
    """Center on the cloud centroid and divide by its max-abs coordinate extent."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        raise SceneError("normalize_scene: empty cloud")
    center = points.mean(axis=0)
    scale = float(np.max(np.abs(points - center)))
    if not scale > 0:
        raise SceneError("normalize_scene: degenerate cloud (all points identical)")
    cloud = (points - center) / scale
    gt = None if grasp_t is None else (np.asarray(grasp_t, dtype=float) - center) / scale
    return cloud, gt, center, scale


def denormalize(t_norm, center, scale):
    return np.asarray(t_norm) * scale + center


# scenes -----------------------------------------------------------------


@dataclass
class SceneRecord:
    object: ObjectModel
    camera: VirtualCamera
    cloud: np.ndarray  # (n, 3) float32, normalized frame
    center: np.ndarray
    scale: float
    grasp_t: np.ndarray  # (g, 3) normalized
    grasp_R: np.ndarray  # (g, 3, 3)
    labels: np.ndarray  # (g,) bool

    def world_cloud(self):
        return denormalize(self.cloud.astype(float), self.center, self.scale)

    def world_grasps(self):
        return denormalize(self.grasp_t, self.center, self.scale), self.grasp_R

    def positives(self):
        return self.grasp_t[self.labels], self.grasp_R[self.labels]


@dataclass
class SceneSpec:
    """Knobs for synthetic scene generation."""

    task: str = "toy4"
    kinds: tuple = ("box", "cylinder")
    gripper_opening: float = 0.08
    points: int = 256
    grasps: int = 64
    rotations_per_object: int = 5
    perturb_frac: float = 0.3
    resolution: int = 128
    fov_deg: float = 20.0
    camera_radius: float = 0.5
    cylinder_radius: tuple = (0.02, 0.032)
    cylinder_height: tuple = (0.08, 0.14)
    box_size: tuple = (0.03, 0.12)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r} (expected one of {', '.join(TASKS)})")
        if self.points < 1 or self.grasps < 1 or self.rotations_per_object < 1 or self.resolution < 1:
            raise ValueError("points, grasps, rotations_per_object and resolution must be >= 1")
        if not 0.0 <= self.perturb_frac < 1.0:
            raise ValueError("perturb_frac must lie in [0, 1)")
        if self.gripper_opening <= 0 or not 0 < self.fov_deg < 180 or self.camera_radius <= 0:
            raise ValueError("gripper_opening > 0, fov_deg in (0, 180) and camera_radius > 0 required")
        if set(self.kinds) - {"box", "cylinder"} or not self.kinds:
            raise ValueError(f"kinds must be a nonempty subset of box/cylinder, got {self.kinds}")
        for name in ("cylinder_radius", "cylinder_height", "box_size"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= MAX_DIM:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= {MAX_DIM}")


def random_object(spec, rng, rotation=None):
    if spec.task == "toy4":
        dims = (rng.uniform(*spec.cylinder_radius), rng.uniform(*spec.cylinder_height))
        return ObjectModel("cylinder", dims)
    kind = spec.kinds[rng.integers(len(spec.kinds))]
    if kind == "cylinder":
        dims = (rng.uniform(*spec.cylinder_radius), rng.uniform(*spec.cylinder_height))
    else:
        dims = tuple(rng.uniform(*spec.box_size, 3))
    return ObjectModel(kind, dims, np.zeros(3), np.eye(3) if rotation is None else rotation)


def make_scene(obj, spec, rng, max_tries=20):
    """Render a view of ``obj`` and attach labeled grasps; retries until >= 30% are positive."""
    gripper = GripperModel.parallel_jaw(spec.gripper_opening)
    toy = spec.task == "toy4"
    for _ in range(max_tries):
        cam = VirtualCamera.on_hemisphere(
            rng, spec.camera_radius, obj.t, resolution=(spec.resolution, spec.resolution), fov=np.radians(spec.fov_deg)
        )
        try:
            pts = render_partial_cloud(obj, cam, spec.points)
        except SceneError:
            continue
        t, R, labels = generate_grasps(obj, spec.grasps, spec.gripper_opening, rng, gripper, spec.perturb_frac, toy)
        cloud, tn, center, scale = normalize_scene(pts, t)
        inside = np.all(np.abs(tn) <= 1.0, axis=1)
        if labels[inside].mean() < 0.3 if inside.any() else True:
            continue
        cloud32 = cloud.astype("<f4")
        return SceneRecord(obj, cam, cloud32, center, scale, tn[inside], R[inside], labels[inside])
    raise NoFeasibleGraspError(f"could not build a balanced scene for {obj.kind} {obj.dims}")


def generate_dataset(spec, n_scenes, rng):
    scenes = []
    obj = None
    for s in range(n_scenes):
        if spec.task == "toy4" or s % spec.rotations_per_object == 0:
            obj = random_object(spec, rng)
        if spec.task != "toy4":
            obj = ObjectModel(obj.kind, obj.dims, np.zeros(3), random_rotation(rng))
        scenes.append(make_scene(obj, spec, rng))
    return scenes


def resample_positive_grasps(scene, count, rng, spec=None):
    """Fresh oracle-positive grasps for the scene's object, in its normalized frame."""
    spec = spec or SceneSpec()
    toy = spec.task == "toy4"
    t_out, R_out = [], []
    got = 0
    for _ in range(50):
        t, R, lab = generate_grasps(scene.object, 2 * count, spec.gripper_opening, rng, perturb_frac=0.0, toy=toy)
        tn = (t - scene.center) / scene.scale
        keep = lab & np.all(np.abs(tn) <= 1.0, axis=1)
        t_out.append(tn[keep])
        R_out.append(R[keep])
        got += keep.sum()
        if got >= count:
            break
    return np.concatenate(t_out)[:count], np.concatenate(R_out)[:count]

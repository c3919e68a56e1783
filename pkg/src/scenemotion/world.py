"""Procedural rooms, teacher renders, template referring expressions and goal-directed motions."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from . import body
from .geometry import (AABB, SceneCloud, TeacherView, TeacherViewSet, ViewProjection, aabb_of)
from .text import (ACTION_PHRASES, ACTIONS, CLASS_NAMES, RELATIONS, FrozenTextEncoder, Vocabulary)

FLOOR_ID, WALL_ID = 0, 1

# (x, y, z) full extents in meters
CLASS_SIZES = {
    "bed": (2.0, 1.5, 0.55), "chair": (0.5, 0.5, 0.9), "table": (1.3, 0.8, 0.75),
    "sofa": (1.9, 0.9, 0.85), "cabinet": (0.6, 0.5, 1.1), "desk": (1.2, 0.6, 0.75),
    "shelf": (0.9, 0.35, 1.8), "toilet": (0.45, 0.7, 0.8), "bathtub": (1.7, 0.8, 0.6),
}
CLASS_COLORS = {
    "bed": (0.85, 0.15, 0.15), "chair": (0.15, 0.75, 0.2), "table": (0.2, 0.3, 0.9),
    "sofa": (0.9, 0.8, 0.1), "cabinet": (0.7, 0.2, 0.8), "desk": (0.1, 0.8, 0.8),
    "shelf": (0.95, 0.55, 0.1), "toilet": (0.95, 0.95, 0.95), "bathtub": (0.45, 0.25, 0.1),
}
FLOOR_COLOR = (0.5, 0.5, 0.45)
WALL_COLOR = (0.75, 0.7, 0.6)

# objects a person can plausibly sit on / lie on; any object is a valid walk goal
ACTION_CLASSES = {
    "walk": CLASS_NAMES,
    "sit": ("bed", "chair", "sofa", "table", "desk", "toilet", "bathtub"),
    "stand up": ("bed", "chair", "sofa", "table", "desk", "toilet", "bathtub"),
    "lie": ("bed", "sofa", "table", "desk", "bathtub"),
}


class SceneGenerationError(RuntimeError):
    pass


class MotionSynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    room_min: float = 4.5
    room_max: float = 7.0
    wall_height: float = 2.0
    min_objects: int = 4
    max_objects: int = 10
    relational_prob: float = 0.5
    n_points: int = 2048
    object_share: float = 0.55
    floor_share: float = 0.3
    clearance: float = 0.5
    color_jitter: float = 0.03
    instance_jitter: float = 0.04
    frames: int = 30
    min_frames: int = 24
    n_views: int = 4
    image_size: int = 96
    feature_dim: int = 64
    token_width: int = 16
    teacher_noise: float = 0.01
    single_object: bool = False

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range must satisfy 1 <= min <= max")
        if self.room_min > self.room_max:
            raise ValueError("room_min exceeds room_max")
        if not 2 <= self.min_frames <= self.frames:
            raise ValueError("min_frames must lie in [2, frames]")


@dataclass(frozen=True)
class ObjectInstance:
    instance_id: int
    class_id: int            # 1..9
    center: np.ndarray       # (3,), box rests on the floor
    extents: np.ndarray      # (3,) full sizes
    color: np.ndarray

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id - 1]

    @property
    def box(self) -> AABB:
        return AABB(self.center - self.extents / 2, self.center + self.extents / 2)


@dataclass(frozen=True)
class SceneSpec:
    size: np.ndarray                 # (Lx, Ly, wall height); the room spans [0, Lx] x [0, Ly]
    objects: tuple[ObjectInstance, ...]
    seed: int = 0

    def instance(self, instance_id: int) -> ObjectInstance:
        for o in self.objects:
            if o.instance_id == instance_id:
                return o
        raise KeyError(f"no object instance {instance_id}")

    def same_class(self, class_id: int) -> list[ObjectInstance]:
        return [o for o in self.objects if o.class_id == class_id]


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _boxes_overlap(a: AABB, b: AABB, gap: float) -> bool:
    return bool(np.all(a.min_corner[:2] - gap < b.max_corner[:2]) and np.all(b.min_corner[:2] - gap < a.max_corner[:2]))


def generate_scene(seed: int, config: WorldConfig = WorldConfig()) -> tuple[SceneSpec, SceneCloud]:
    rng = _rng(seed)
    n_obj = 1 if config.single_object else int(rng.integers(config.min_objects, config.max_objects + 1))
    # crowded rooms get a larger floor so the layout stays feasible
    side_lo = min(config.room_max, max(config.room_min, np.sqrt(3.8 * n_obj)))
    size = np.array([rng.uniform(side_lo, config.room_max), rng.uniform(side_lo, config.room_max),
                     config.wall_height])
    classes = list(rng.choice(len(CLASS_NAMES), size=n_obj, replace=n_obj > len(CLASS_NAMES)) + 1)
    if not config.single_object and rng.random() < config.relational_prob and n_obj >= 3:
        classes[-1] = classes[int(rng.integers(0, n_obj - 1))]  # duplicate a class for relational text
    # big footprints first: rejection sampling packs far better in that order
    classes.sort(key=lambda c: -np.prod(CLASS_SIZES[CLASS_NAMES[c - 1]][:2]))
    objects: list[ObjectInstance] = []
    attempts = tries = 0
    while len(objects) < n_obj:
        attempts += 1
        tries += 1
        if attempts > 1000:
            raise SceneGenerationError(f"could not place {n_obj} objects without overlap (seed {seed})")
        if tries > 60:  # this layout is stuck, start over
            objects, tries = [], 0
        name = CLASS_NAMES[classes[len(objects)] - 1]
        ext = np.array(CLASS_SIZES[name]) * rng.uniform(0.85, 1.15, size=3)
        if rng.random() < 0.5:
            ext[[0, 1]] = ext[[1, 0]]
        lo = ext[:2] / 2 + 0.1
        hi = size[:2] - ext[:2] / 2 - 0.1
        if np.any(hi <= lo):
            continue
        c = np.array([*rng.uniform(lo, hi), ext[2] / 2])
        color = np.clip(np.array(CLASS_COLORS[name]) + rng.normal(0, config.instance_jitter, 3), 0, 1)
        cand = ObjectInstance(len(objects) + 2, int(classes[len(objects)]), c, ext, color)
        if any(_boxes_overlap(cand.box, o.box, config.clearance) for o in objects):
            continue
        objects.append(cand)
        tries = 0
    spec = SceneSpec(size, tuple(objects), seed)
    return spec, sample_cloud(spec, rng, config)


def _box_faces(o: ObjectInstance):
    """Top and four side faces as (origin, u edge, v edge, outward normal)."""
    lo, hi = o.box.min_corner, o.box.max_corner
    ex, ey, ez = hi - lo
    faces = [(np.array([lo[0], lo[1], hi[2]]), np.array([ex, 0, 0]), np.array([0, ey, 0]), np.array([0, 0, 1.0]))]
    faces.append((lo.copy(), np.array([0, ey, 0]), np.array([0, 0, ez]), np.array([-1.0, 0, 0])))
    faces.append((np.array([hi[0], lo[1], lo[2]]), np.array([0, ey, 0]), np.array([0, 0, ez]), np.array([1.0, 0, 0])))
    faces.append((lo.copy(), np.array([ex, 0, 0]), np.array([0, 0, ez]), np.array([0, -1.0, 0])))
    faces.append((np.array([lo[0], hi[1], lo[2]]), np.array([ex, 0, 0]), np.array([0, 0, ez]), np.array([0, 1.0, 0])))
    return faces


def _wall_faces(size):
    lx, ly, h = size
    return [
        (np.zeros(3), np.array([0, ly, 0]), np.array([0, 0, h]), np.array([1.0, 0, 0])),
        (np.array([lx, 0, 0]), np.array([0, ly, 0]), np.array([0, 0, h]), np.array([-1.0, 0, 0])),
        (np.zeros(3), np.array([lx, 0, 0]), np.array([0, 0, h]), np.array([0, 1.0, 0])),
        (np.array([0, ly, 0]), np.array([lx, 0, 0]), np.array([0, 0, h]), np.array([0, -1.0, 0])),
    ]


def _sample_faces(faces, n, rng):
    if n <= 0:
        return np.zeros((0, 3))
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v, _ in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.random((n, 2))
    origin = np.array([faces[i][0] for i in which])
    u = np.array([faces[i][1] for i in which])
    v = np.array([faces[i][2] for i in which])
    return origin + uv[:, :1] * u + uv[:, 1:] * v


def sample_cloud(spec: SceneSpec, rng: np.random.Generator, config: WorldConfig) -> SceneCloud:
    """Uniform surface samples, with fixed point budgets for objects, floor and walls."""
    n = config.n_points
    n_obj = int(round(n * config.object_share)) if spec.objects else 0
    n_floor = int(round(n * config.floor_share))
    n_wall = n - n_obj - n_floor
    parts, cols, inst, cls = [], [], [], []
    if n_obj:
        areas = np.array([sum(np.linalg.norm(np.cross(u, v)) for _, u, v, _ in _box_faces(o)) for o in spec.objects])
        counts = rng.multinomial(n_obj, areas / areas.sum())
        for o, k in zip(spec.objects, counts):
            parts.append(_sample_faces(_box_faces(o), k, rng))
            cols.append(np.repeat(o.color[None], k, 0))
            inst.append(np.full(k, o.instance_id))
            cls.append(np.full(k, o.class_id))
    lx, ly, _ = spec.size
    floor = (np.zeros(3), np.array([lx, 0, 0]), np.array([0, ly, 0]), np.array([0, 0, 1.0]))
    parts.append(_sample_faces([floor], n_floor, rng))
    cols.append(np.repeat(np.array([FLOOR_COLOR]), n_floor, 0))
    inst.append(np.full(n_floor, FLOOR_ID))
    cls.append(np.zeros(n_floor, dtype=int))
    parts.append(_sample_faces(_wall_faces(spec.size), n_wall, rng))
    cols.append(np.repeat(np.array([WALL_COLOR]), n_wall, 0))
    inst.append(np.full(n_wall, WALL_ID))
    cls.append(np.zeros(n_wall, dtype=int))
    colors = np.concatenate(cols) + rng.normal(0, config.color_jitter, (n, 3))
    return SceneCloud(np.concatenate(parts), np.clip(colors, 0, 1),
                      np.concatenate(inst).astype(np.int64), np.concatenate(cls).astype(np.int64))


def instance_names(spec: SceneSpec) -> dict[int, str]:
    names = {FLOOR_ID: "floor", WALL_ID: "wall"}
    names.update({o.instance_id: o.class_name for o in spec.objects})
    return names


# ---------------------------------------------------------------- teacher renders

def view_directions(n_views: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(ray direction, image-up axis, image-right axis): one top-down view, then oblique views."""
    out = [(np.array([0.0, 0.0, -1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))]
    elev = np.deg2rad(35.0)
    for i in range(1, n_views):
        az = 2.0 * np.pi * (i - 1) / max(1, n_views - 1) + np.pi / 4
        d = np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), -np.sin(elev)])
        right = np.array([-np.sin(az), np.cos(az), 0.0])
        up = np.cross(d, right)
        out.append((d, up / np.linalg.norm(up), right))
    return out


def _fit_projection(spec: SceneSpec, up: np.ndarray, right: np.ndarray, size: int) -> ViewProjection:
    lx, ly, h = spec.size
    corners = np.array([[x, y, z] for x in (0, lx) for y in (0, ly) for z in (0, h)])
    r = -(corners @ up)
    c = corners @ right
    s = 0.95 * (size - 1) / max(np.ptp(r), np.ptp(c))
    matrix = np.stack([-s * up, s * right], axis=1)
    offset = np.array([(size - 1) / 2 - s * (r.max() + r.min()) / 2, (size - 1) / 2 - s * (c.max() + c.min()) / 2])
    return ViewProjection(matrix, offset, (size, size))


def _ray_cast(spec: SceneSpec, d, up, right, proj: ViewProjection) -> np.ndarray:
    h, w = proj.image_size
    s = np.linalg.norm(proj.matrix[:, 0])
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    a_up = (proj.pixel_offset[0] - rr.ravel()) / s
    a_right = (cc.ravel() - proj.pixel_offset[1]) / s
    origin = a_up[:, None] * up + a_right[:, None] * right    # rays: origin + lam * d
    best = np.full(len(origin), np.inf)
    inst = np.full(len(origin), -1, dtype=np.int64)

    def planar(face_origin, u, v, normal, ident, two_sided=False):
        denom = d @ normal
        if abs(denom) < 1e-12 or (not two_sided and denom > 0):
            return
        lam = ((face_origin - origin) @ normal) / denom
        p = origin + lam[:, None] * d - face_origin
        fu = (p @ u) / (u @ u)
        fv = (p @ v) / (v @ v)
        hit = (fu >= 0) & (fu <= 1) & (fv >= 0) & (fv <= 1) & (lam < best)
        best[hit] = lam[hit]
        inst[hit] = ident

    lx, ly, _ = spec.size
    planar(np.zeros(3), np.array([lx, 0, 0]), np.array([0, ly, 0]), np.array([0, 0, 1.0]), FLOOR_ID)
    for face in _wall_faces(spec.size):
        planar(*face, WALL_ID)    # near walls face away from the camera and are cut away
    for o in spec.objects:
        lo, hi = o.box.min_corner, o.box.max_corner
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.where(np.abs(d) < 1e-12, 1e-12, d)
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        tn = np.minimum(t1, t2).max(axis=1)
        tf = np.maximum(t1, t2).min(axis=1)
        hit = (tn <= tf) & (tn < best)
        best[hit] = tn[hit]
        inst[hit] = o.instance_id
    return inst.reshape(h, w)


def render_views(spec: SceneSpec, n_views: int, seed: int, noise: float, encoder: FrozenTextEncoder,
                 image_size: int = 96) -> TeacherViewSet:
    """Orthographic renders whose pixels carry the class embedding of the visible surface plus noise."""
    if n_views < 1:
        raise ValueError("render_views needs at least one view")
    rng = _rng(seed)
    names = instance_names(spec)
    ids = sorted(names)
    emb = {i: encoder.class_embedding(names[i]) for i in ids}
    views = []
    for d, up, right in view_directions(n_views):
        proj = _fit_projection(spec, up, right, image_size)
        imap = _ray_cast(spec, d, up, right, proj)
        feats = np.zeros((image_size, image_size, encoder.dim))
        for i in ids:
            m = imap == i
            feats[m] = emb[i]
        if noise > 0:
            hit = imap >= 0
            noisy = feats[hit] + rng.normal(0.0, noise, size=(int(hit.sum()), encoder.dim))
            feats[hit] = noisy / np.linalg.norm(noisy, axis=1, keepdims=True)
        views.append(TeacherView(proj, imap, feats))
    return TeacherViewSet(tuple(views))


# ---------------------------------------------------------------- text

@dataclass(frozen=True)
class TextAnnotation:
    action: str
    goal_class: str
    goal_instance: int
    relation: str | None
    anchors: tuple[str, ...]
    text: str
    tokens: np.ndarray
    length: int
    ambiguous: bool = False

    @property
    def action_id(self) -> int:
        return ACTIONS.index(self.action)


NEAR_DIST, FAR_DIST, MARGIN = 1.5, 2.5, 0.25


def _planar_dist(a: ObjectInstance, b: ObjectInstance) -> float:
    return float(np.linalg.norm(a.center[:2] - b.center[:2]))


def anchor_distance(spec: SceneSpec, obj: ObjectInstance, anchor_class: str) -> float:
    anchors = [o for o in spec.objects if o.class_name == anchor_class and o.instance_id != obj.instance_id]
    return min(_planar_dist(obj, a) for a in anchors)


def relation_holds(spec: SceneSpec, goal: ObjectInstance, relation: str, anchor_class: str) -> bool:
    """True when the relation picks out ``goal`` and no other instance of its class."""
    peers = spec.same_class(goal.class_id)
    d = {o.instance_id: anchor_distance(spec, o, anchor_class) for o in peers}
    mine = d[goal.instance_id]
    others = [v for k, v in d.items() if k != goal.instance_id]
    if relation == "closest to":
        return all(mine + MARGIN < v for v in others)
    if relation == "farthest from":
        return all(mine > v + MARGIN for v in others)
    if relation == "near":
        return mine <= NEAR_DIST and all(v > NEAR_DIST + MARGIN for v in others)
    if relation == "far from":
        return mine >= FAR_DIST and all(v < FAR_DIST - MARGIN for v in others)
    raise ValueError(f"unknown relation {relation!r}")


def render_text(action: str, goal_class: str, relation: str | None = None, anchor: str | None = None) -> str:
    text = f"{ACTION_PHRASES[action]} the {goal_class}"
    if relation:
        text += f" that is {relation} the {anchor}"
    return text


def generate_text(spec: SceneSpec, goal_instance: int, action: str, seed: int, vocab: Vocabulary,
                  width: int = 16) -> TextAnnotation:
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    goal = spec.instance(goal_instance)
    rng = _rng(seed)
    relation = anchor = None
    ambiguous = False
    if len(spec.same_class(goal.class_id)) > 1:
        anchor_classes = sorted({o.class_name for o in spec.objects if o.class_id != goal.class_id})
        options = [(r, a) for a in anchor_classes for r in RELATIONS if relation_holds(spec, goal, r, a)]
        if options:
            relation, anchor = options[int(rng.integers(len(options)))]
        else:
            ambiguous = True
    text = render_text(action, goal.class_name, relation, anchor)
    tokens, length = vocab.tokenize(text, width)
    return TextAnnotation(action, goal.class_name, goal_instance, relation,
                          (anchor,) if anchor else (), text, tokens, length, ambiguous)


# ---------------------------------------------------------------- motion

@dataclass(frozen=True)
class MotionSeq:
    params: np.ndarray      # (T, 72)
    valid_mask: np.ndarray  # (T,) bool
    action_id: int

    @property
    def length(self) -> int:
        return int(self.valid_mask.sum())


def _pose_vector(**joint_aa) -> np.ndarray:
    theta = np.zeros((body.N_JOINTS, 3))
    names = body.default_template().names
    for name, aa in joint_aa.items():
        theta[names.index(name)] = aa
    return theta.reshape(-1)


def walk_pose(phase: float, amp: float) -> np.ndarray:
    s = np.sin(phase)
    swing = 0.45 * amp * s
    return _pose_vector(
        left_hip=(0, -swing, 0), right_hip=(0, swing, 0),
        left_knee=(0, 0.5 * amp * max(0.0, -s), 0), right_knee=(0, 0.5 * amp * max(0.0, s), 0),
        left_shoulder=(0, 0.35 * amp * s, 0), right_shoulder=(0, -0.35 * amp * s, 0),
        left_elbow=(0, -0.2 * amp, 0), right_elbow=(0, -0.2 * amp, 0),
    )


SIT_POSE = _pose_vector(left_hip=(0, -np.pi / 2, 0), right_hip=(0, -np.pi / 2, 0),
                        left_knee=(0, np.pi / 2, 0), right_knee=(0, np.pi / 2, 0),
                        left_elbow=(0, -0.4, 0), right_elbow=(0, -0.4, 0))
LIE_POSE = _pose_vector(left_elbow=(0, -0.2, 0), right_elbow=(0, -0.2, 0))


def frame_params(pos, yaw: float, pitch: float, pose: np.ndarray) -> np.ndarray:
    c, s = np.cos(pitch), np.sin(pitch)
    rot = body.yaw_matrix(yaw) @ np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.concatenate([np.asarray(pos, dtype=float), body.matrix_to_rot6d(rot), pose])


def _smooth(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _lerp_angle(a: float, b: float, w: float) -> float:
    diff = (b - a + np.pi) % (2 * np.pi) - np.pi
    return a + w * diff


def _free(spec: SceneSpec, xy: np.ndarray, margin: float, exclude: int | None = None) -> bool:
    lx, ly, _ = spec.size
    if not (margin <= xy[0] <= lx - margin and margin <= xy[1] <= ly - margin):
        return False
    for o in spec.objects:
        if o.instance_id == exclude:
            continue
        lo, hi = o.box.min_corner[:2] - margin, o.box.max_corner[:2] + margin
        if np.all(xy > lo) and np.all(xy < hi):
            return False
    return True


def _sdf(params, beta, goal_points) -> float:
    return float(body.body_sdf(params, beta, goal_points).data)


def _approach(spec, goal, goal_points, beta, rng, target_gap=0.015):
    """Standing spot next to the goal that puts the rest body within ``target_gap`` of a goal point."""
    height = body.standing_height(beta)
    lo, hi = goal.box.min_corner, goal.box.max_corner
    sides = [(np.array([-1.0, 0]), lo[0]), (np.array([1.0, 0]), hi[0]), (np.array([0, -1.0]), lo[1]), (np.array([0, 1.0]), hi[1])]
    for k in rng.permutation(4):
        normal, plane = sides[k]
        axis = 0 if normal[0] else 1
        other = 1 - axis
        along = rng.uniform(lo[other] + 0.15 * (hi[other] - lo[other]), hi[other] - 0.15 * (hi[other] - lo[other]))
        yaw = float(np.arctan2(-normal[1], -normal[0]))

        def at(dist):
            xy = np.zeros(2)
            xy[axis] = plane + normal[axis] * dist
            xy[other] = along
            return xy, frame_params([xy[0], xy[1], height], yaw, 0.0, np.zeros(3 * body.N_JOINTS))

        xy_far, p_far = at(1.2)
        if _sdf(p_far, beta, goal_points) < target_gap:
            continue
        near, far = 0.0, 1.2
        for _ in range(40):
            mid = 0.5 * (near + far)
            if _sdf(at(mid)[1], beta, goal_points) > target_gap:
                far = mid
            else:
                near = mid
        xy, params = at(far)
        if _free(spec, xy, 0.2, exclude=goal.instance_id):
            return xy, yaw, height, normal
    raise MotionSynthesisError("no free approach position next to the goal")


def _walk_segment(start_xy, end_xy, yaw_start, yaw_end, height, n, phase0=0.0):
    """Frames moving from start to end; heading follows the path, then turns to ``yaw_end``."""
    frames = []
    path = end_xy - start_xy
    heading = float(np.arctan2(path[1], path[0])) if np.linalg.norm(path) > 1e-6 else yaw_end
    dist = float(np.linalg.norm(path))
    for i in range(n):
        u = i / max(1, n - 1)
        w = _smooth(u)
        xy = start_xy + w * path
        speed = 6 * u * (1 - u)  # derivative of smoothstep
        phase = phase0 + 2 * np.pi * w * dist / 1.1
        yaw = _lerp_angle(_lerp_angle(yaw_start, heading, _smooth(u / 0.2)), yaw_end, _smooth((u - 0.7) / 0.3))
        bob = 0.02 * abs(np.sin(phase)) * min(1.0, speed)
        frames.append(frame_params([xy[0], xy[1], height - bob], yaw, 0.0, walk_pose(phase, min(1.0, speed))))
    return frames


def _free_start(spec, goal, rng, min_dist=1.0, margin=0.35):
    lx, ly, _ = spec.size
    for _ in range(500):
        xy = rng.uniform([margin, margin], [lx - margin, ly - margin])
        if not _free(spec, xy, margin):
            continue
        if np.linalg.norm(xy - goal.center[:2]) >= min_dist:
            return xy
    raise MotionSynthesisError("no collision-free start position")


def _seat(spec, goal, goal_points, beta, lie: bool, yaw: float):
    """Root placement on the goal's top surface, lowered until the body touches a goal point."""
    top = goal.box.max_corner[2]
    xy = goal.center[:2].copy()
    pitch = -np.pi / 2 if lie else 0.0
    pose = LIE_POSE if lie else SIT_POSE
    if lie:
        # lie along the long axis with the pelvis slightly off-center toward the feet
        long_axis = 0 if goal.extents[0] >= goal.extents[1] else 1
        yaw = 0.0 if long_axis == 0 else np.pi / 2
    hi_z, lo_z = top + 0.6, top - 0.2
    for _ in range(40):
        mid = 0.5 * (hi_z + lo_z)
        if _sdf(frame_params([xy[0], xy[1], mid], yaw, pitch, pose), beta, goal_points) > 0.01:
            hi_z = mid
        else:
            lo_z = mid
    return frame_params([xy[0], xy[1], hi_z], yaw, pitch, pose)


def _blend(a: np.ndarray, b: np.ndarray, n: int) -> list[np.ndarray]:
    """Smoothstep interpolation of position and pose, slerp of the root orientation."""
    ra = body.rot6d_to_matrix(a[3:9]).data
    rb = body.rot6d_to_matrix(b[3:9]).data
    slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([ra, rb])))
    out = []
    for i in range(1, n + 1):
        w = _smooth(i / n)
        p = (1 - w) * a + w * b
        p[3:9] = body.matrix_to_rot6d(slerp([w]).as_matrix()[0])
        out.append(p)
    return out


def synthesize_motion(spec: SceneSpec, goal_points: np.ndarray, goal_instance: int, action: str,
                      beta: np.ndarray, seed: int, config: WorldConfig = WorldConfig()) -> MotionSeq:
    """Procedural motion that ends at (walk/sit/lie) or starts from (stand up) the goal object."""
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    rng = _rng(seed)
    goal = spec.instance(goal_instance)
    t_total = config.frames
    length = int(rng.integers(config.min_frames, t_total + 1))
    height = body.standing_height(beta)
    if action == "walk":
        start = _free_start(spec, goal, rng)
        end, yaw_end, _, _ = _approach(spec, goal, goal_points, beta, rng)
        yaw0 = float(rng.uniform(-np.pi, np.pi))
        frames = _walk_segment(start, end, yaw0, yaw_end, height, length)
    elif action in ("sit", "lie"):
        start = _free_start(spec, goal, rng)
        end, yaw_face, _, _ = _approach(spec, goal, goal_points, beta, rng, target_gap=0.25)
        n_walk = int(round(0.6 * length))
        yaw_back = yaw_face + np.pi
        frames = _walk_segment(start, end, float(rng.uniform(-np.pi, np.pi)), yaw_back, height, n_walk)
        seated = _seat(spec, goal, goal_points, beta, lie=action == "lie", yaw=yaw_back)
        frames += _blend(frames[-1], seated, length - n_walk)
    else:  # stand up
        _, yaw_face, _, normal = _approach(spec, goal, goal_points, beta, rng, target_gap=0.25)
        yaw_back = yaw_face + np.pi
        seated = _seat(spec, goal, goal_points, beta, lie=False, yaw=yaw_back)
        n_rise = int(round(0.4 * length))
        step_out = goal.center[:2] + normal * (0.5 * goal.extents[:2] @ np.abs(normal) + 0.45)
        standing = frame_params([step_out[0], step_out[1], height], yaw_back, 0.0, np.zeros(3 * body.N_JOINTS))
        frames = [seated] + _blend(seated, standing, n_rise - 1)
        away = step_out + normal * rng.uniform(0.6, 1.4) + rng.normal(0, 0.2, 2)
        if not _free(spec, away, 0.3):
            away = step_out + normal * 0.5
        frames += _walk_segment(step_out, away, yaw_back, yaw_back, height, length - n_rise + 1)[1:]
    params = np.array(frames[:length])
    if len(params) < t_total:
        params = np.concatenate([params, np.repeat(params[-1:], t_total - len(params), 0)])
    mask = np.arange(t_total) < length
    return MotionSeq(params, mask, ACTIONS.index(action))


# ---------------------------------------------------------------- samples

@dataclass(frozen=True)
class DatasetSample:
    cloud: SceneCloud
    text: TextAnnotation
    motion: MotionSeq
    beta: np.ndarray
    goal_aabb: AABB
    goal_center: np.ndarray
    goal_class: int          # 1..9
    scene_index: int = 0

    @property
    def goal_points(self) -> np.ndarray:
        return self.cloud.coords[self.cloud.goal_mask]


def make_sample(spec: SceneSpec, cloud: SceneCloud, goal_instance: int, action: str, seed: int,
                vocab: Vocabulary, config: WorldConfig = WorldConfig(), scene_index: int = 0,
                beta: np.ndarray | None = None) -> DatasetSample:
    rng = _rng(seed)
    if beta is None:
        beta = rng.uniform(-0.5, 0.5, size=body.N_BETAS)
    cloud = cloud.with_goal(goal_instance)
    goal_points = cloud.coords[cloud.goal_mask]
    text = generate_text(spec, goal_instance, action, int(rng.integers(2**31)), vocab, config.token_width)
    motion = synthesize_motion(spec, goal_points, goal_instance, action, beta, int(rng.integers(2**31)), config)
    box = aabb_of(goal_points)
    return DatasetSample(cloud, text, motion, beta, box, box.center, spec.instance(goal_instance).class_id, scene_index)


def rigid_transform(yaw: float, shift) -> tuple[np.ndarray, np.ndarray]:
    rot = body.yaw_matrix(yaw)
    return rot, np.array([shift[0], shift[1], 0.0])


def apply_transform(sample: DatasetSample, rot: np.ndarray, shift: np.ndarray) -> DatasetSample:
    coords = sample.cloud.coords @ rot.T + shift
    cloud = replace(sample.cloud, coords=coords)
    p = sample.motion.params.copy()
    p[:, 0:3] = p[:, 0:3] @ rot.T + shift
    p[:, 3:6] = p[:, 3:6] @ rot.T
    p[:, 6:9] = p[:, 6:9] @ rot.T
    motion = replace(sample.motion, params=p)
    box = aabb_of(coords[cloud.goal_mask])
    return replace(sample, cloud=cloud, motion=motion, goal_aabb=box, goal_center=sample.goal_center @ rot.T + shift)


def augment(sample: DatasetSample, seed: int, max_shift: float = 1.0) -> DatasetSample:
    """One random yaw rotation and planar shift applied jointly to scene, motion and goal."""
    rng = _rng(seed)
    rot, shift = rigid_transform(rng.uniform(0.0, 2.0 * np.pi), rng.uniform(-max_shift, max_shift, 2))
    return apply_transform(sample, rot, shift)

# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

"""
Deterministic top-down tabletop world: object catalogue, gripper kinematics, renderer,
scripted expert, success predicates and the train / evaluation partition
"""

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from instructions import TEMPLATES
from utils import DataError

logger = logging.getLogger(__name__)

SKILLS = ("pick_place", "stack", "move_near", "topple", "wipe", "take_out")
SHAPES = ("disk", "square", "triangle", "bottle", "sponge", "bowl", "plate")
GRASPABLE = ("disk", "square", "triangle", "sponge")
RECEPTACLES = ("bowl", "plate")
SUPPORTING = ("square", "bowl", "plate")
BASIC_SHAPES = ("disk", "square", "triangle")
SHAPE_RADIUS = {"disk": 0.05, "square": 0.05, "triangle": 0.07, "bottle": 0.05, "sponge": 0.06,
                "bowl": 0.1, "plate": 0.1}

# 8-bit colours, pairwise at least 0.25 apart in every-channel (L-inf) distance
PALETTE = {
    "red": (230, 26, 26),
    "green": (26, 204, 26),
    "blue": (26, 51, 230),
    "yellow": (230, 230, 26),
    "purple": (153, 26, 204),
    "orange": (255, 140, 0),
    "cyan": (26, 217, 217),
    "pink": (255, 128, 191),
}
TABLE_RGB = (140, 115, 89)
DIRT_RGB = (89, 64, 38)

FRAME_SIZE = 32
WIPE_GRID = 8
STRIP_LENGTH = 5
HOME = (0.5, 0.95, 0.6, 0.0)

# kinematics
CONTACT_Z = 0.3
GRASP_RADIUS = 0.05
SUPPORT_RADIUS = 0.04
TOPPLE_MARGIN = 0.03
TOPPLE_MIN_YAW = 0.05
WIPE_SAMPLE = 0.02

# expert waypoints
MAX_XY = 0.1
MAX_Z = 0.2
TRAVEL_Z = 0.5
GRASP_Z = 0.1
PLACE_Z = 0.15
WIPE_Z = 0.2
TOPPLE_Z = 0.2
TOPPLE_YAW = 0.5
ALIGN = 0.01
Z_TOL = 1e-6
NEAR_OFFSET = 0.07
TAKE_OUT_CLEARANCE = 0.1

# success thresholds
STACK_RADIUS = 0.04
NEAR_RADIUS = 0.1
WIPE_FRACTION = 0.8

PLACEMENT_BOUNDS = (0.12, 0.88)
PLACEMENT_TRIES = 1000

HELD_OUT_COLORS = ("cyan", "pink")
HELD_OUT_SHAPES = ("triangle",)
TRAIN_SKILLS = {"A": ("pick_place", "stack"), "B": SKILLS}
SPLITS = ("in_domain", "novel_objects", "new_skills")


class SimulationError(DataError):
    """Invalid actions, unsatisfiable scenes or an expert with no applicable phase."""


@dataclass(frozen=True)
class EmbodimentSpec:
    name: str
    index: int
    gain: float                     # world units per unit of translation action
    rgb8: tuple                     # gripper colour
    glyph: str                      # plus or ring


EMBODIMENTS = {
    "A": EmbodimentSpec("A", 0, 0.5, (26, 26, 26), "plus"),
    "B": EmbodimentSpec("B", 1, 0.4, (242, 242, 242), "ring"),
}


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    shape: str
    color: str
    radius: float

    @property
    def rgb8(self):
        return PALETTE[self.color]

    def to_dict(self):
        return {"id": self.id, "shape": self.shape, "color": self.color, "radius": self.radius}


@dataclass(frozen=True)
class ObjectPose:
    x: float
    y: float
    yaw: float = 0.0
    upright: bool = True
    support: int = None


@dataclass(frozen=True)
class TaskSpec:
    """
    A skill instance: the scene's objects, argument / target ids and the instruction template
    """
    skill: str
    scene: tuple
    args: tuple
    target: int = None
    region: tuple = None            # wipe strip as (row, first column, length)
    template: int = 0

    @property
    def index(self):
        return SKILLS.index(self.skill)

    def object(self, object_id):
        for spec in self.scene:
            if spec.id == object_id:
                return spec
        raise SimulationError(f"Task {self.skill} references absent object {object_id}")

    def strip_cells(self):
        if self.region is None:
            return frozenset()
        row, col, length = self.region
        return frozenset((row, col + k) for k in range(length))

    def validate(self):
        if self.skill not in SKILLS:
            raise SimulationError(f"Invalid skill specified: {self.skill}")
        ids = [s.id for s in self.scene]
        if ids != list(range(1, len(ids) + 1)):
            raise SimulationError("Scene object ids must be 1..n in order")
        colors = [s.color for s in self.scene]
        if len(set(colors)) != len(colors):
            raise SimulationError("Scene colours must be unique")
        for object_id in self.args + ((self.target,) if self.target is not None else ()):
            self.object(object_id)
        if self.skill == "wipe" and self.region is None:
            raise SimulationError("Wipe task without a dirt strip")
        return self

    def to_dict(self):
        return {"skill": self.skill, "scene": [s.to_dict() for s in self.scene], "args": list(self.args),
                "target": self.target, "region": list(self.region) if self.region else None,
                "template": self.template}

    @classmethod
    def from_dict(cls, record):
        scene = tuple(ObjectSpec(o["id"], o["shape"], o["color"], o["radius"]) for o in record["scene"])
        region = tuple(record["region"]) if record.get("region") else None
        return cls(record["skill"], scene, tuple(record["args"]), record.get("target"), region,
                   record.get("template", 0)).validate()


@dataclass(frozen=True)
class WorldState:
    gripper: tuple                  # (x, y, z, yaw)
    gripper_open: bool
    held: int
    objects: tuple                  # ObjectPose per scene object, index = id - 1
    scene: tuple                    # ObjectSpec per scene object
    embodiment: str
    step_count: int = 0
    dirt: frozenset = field(default_factory=frozenset)
    wiped: frozenset = field(default_factory=frozenset)

    def pose(self, object_id):
        return self.objects[object_id - 1]


def _dist(ax, ay, bx, by):
    return float(np.hypot(ax - bx, ay - by))


def _make_object(object_id, shape, color):
    return ObjectSpec(object_id, shape, color, SHAPE_RADIUS[shape])


def sample_task(skill, rng, colors=None, shapes=None, arg_color=None, arg_shape=None, template=None):
    """
    Draw a task with unique colours
    :param skill: one of SKILLS
    :param rng: numpy Generator
    :param colors: colour pool for every object (None = whole palette)
    :param shapes: basic-shape pool for free choices (None = disk, square, triangle)
    :param arg_color: force the argument object's colour
    :param arg_shape: force the argument object's shape
    :param template: instruction template id (None = drawn)
    :return: TaskSpec
    """
    if skill not in SKILLS:
        raise SimulationError(f"Invalid skill specified: {skill}")
    pool = list(colors) if colors is not None else list(PALETTE)
    basic = [s for s in BASIC_SHAPES if shapes is None or s in shapes]

    arg_options, target_options = {
        "pick_place": (basic, ["plate"]),
        "stack": (basic, ["square"]),
        "move_near": (basic, basic + ["bottle"]),
        "topple": (["bottle"], None),
        "wipe": (["sponge"], None),
        "take_out": (basic, ["bowl"]),
    }[skill]
    if arg_shape is not None:
        arg_options = [arg_shape] if arg_shape in BASIC_SHAPES and skill not in ("topple", "wipe") else []
    if not arg_options or not basic:
        raise SimulationError(f"Unsatisfiable task for {skill} with shapes {shapes}")

    used = []

    def pick_color(forced=None):
        if forced is not None:
            if forced in used:
                raise SimulationError(f"Colour {forced} already used in scene")
            used.append(forced)
            return forced
        free = [c for c in pool if c not in used]
        if not free:
            raise SimulationError("Not enough colours for a scene")
        color = free[int(rng.integers(len(free)))]
        used.append(color)
        return color

    scene = [_make_object(1, arg_options[int(rng.integers(len(arg_options)))], pick_color(arg_color))]
    target = None
    if target_options is not None:
        scene.append(_make_object(2, target_options[int(rng.integers(len(target_options)))], pick_color()))
        target = 2
    scene.append(_make_object(len(scene) + 1, basic[int(rng.integers(len(basic)))], pick_color()))

    region = None
    if skill == "wipe":
        region = (int(rng.integers(1, WIPE_GRID - 1)), int(rng.integers(0, WIPE_GRID - STRIP_LENGTH + 1)),
                  STRIP_LENGTH)
    if template is None:
        template = int(rng.integers(len(TEMPLATES[skill])))
    return TaskSpec(skill, tuple(scene), (1,), target, region, template).validate()


def reset(task, emb, seed):
    """
    Place the task's objects with a seeded RNG and park the gripper at the home pose
    :param task: TaskSpec
    :param emb: embodiment name or EmbodimentSpec
    :param seed: placement seed
    :return: WorldState
    """
    task.validate()
    emb = emb.name if isinstance(emb, EmbodimentSpec) else emb
    if emb not in EMBODIMENTS:
        raise SimulationError(f"Invalid embodiment specified: {emb}")
    rng = np.random.default_rng(seed)
    min_sep = 2.0 * max(s.radius for s in task.scene)
    inside = task.args[0] if task.skill == "take_out" else None

    positions = {}
    for spec in task.scene:
        if spec.id == inside:
            continue
        for _ in range(PLACEMENT_TRIES):
            x, y = rng.uniform(*PLACEMENT_BOUNDS, size=2)
            if all(_dist(x, y, px, py) >= min_sep for px, py in positions.values()):
                positions[spec.id] = (float(x), float(y))
                break
        else:
            raise SimulationError(f"Could not place object {spec.id} after {PLACEMENT_TRIES} samples")
    if inside is not None:
        positions[inside] = positions[task.target]

    objects = tuple(ObjectPose(*positions[s.id], support=task.target if s.id == inside else None)
                    for s in task.scene)
    return WorldState(gripper=HOME, gripper_open=True, held=None, objects=objects, scene=task.scene,
                      embodiment=emb, step_count=0, dirt=task.strip_cells(), wiped=frozenset())


def _cell(x, y):
    return (min(int(y * WIPE_GRID), WIPE_GRID - 1), min(int(x * WIPE_GRID), WIPE_GRID - 1))


def _swept_cells(x0, y0, x1, y1):
    length = _dist(x0, y0, x1, y1)
    n = max(1, int(np.ceil(length / WIPE_SAMPLE)))
    return {_cell(x0 + (x1 - x0) * k / n, y0 + (y1 - y0) * k / n) for k in range(n + 1)}


def _support_at(state, x, y, exclude):
    best, best_dist = None, SUPPORT_RADIUS
    for spec, pose in zip(state.scene, state.objects):
        if spec.id == exclude or spec.shape not in SUPPORTING:
            continue
        d = _dist(x, y, pose.x, pose.y)
        if d <= best_dist:
            best, best_dist = spec.id, d
    return best


def step(state, action):
    """
    Apply one 7-D action: rotation deltas (only yaw used), translation deltas, gripper command
    :param state: WorldState
    :param action: array-like of 7 floats
    :return: next WorldState
    """
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (7,):
        raise SimulationError(f"Invalid action shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SimulationError("Non-finite action")
    gain = EMBODIMENTS[state.embodiment].gain
    x0, y0, z0, yaw0 = state.gripper
    x = float(np.clip(x0 + gain * a[3], 0.0, 1.0))
    y = float(np.clip(y0 + gain * a[4], 0.0, 1.0))
    z = float(np.clip(z0 + gain * a[5], 0.0, 1.0))
    dyaw = float(a[2])
    yaw = yaw0 + dyaw

    objects = list(state.objects)
    held, wiped = state.held, state.wiped

    if abs(dyaw) >= TOPPLE_MIN_YAW and z < CONTACT_Z:
        for i, (spec, pose) in enumerate(zip(state.scene, objects)):
            if spec.shape == "bottle" and pose.upright and spec.id != held \
                    and _dist(x, y, pose.x, pose.y) < spec.radius + TOPPLE_MARGIN:
                objects[i] = replace(pose, upright=False)

    if held is not None and state.scene[held - 1].shape == "sponge" and z < CONTACT_Z:
        wiped = wiped | _swept_cells(x0, y0, x, y)

    if held is not None:
        objects[held - 1] = replace(objects[held - 1], x=x, y=y)

    close = a[6] < 0.5
    gripper_open = not close
    if close and state.gripper_open and held is None and z < CONTACT_Z:
        candidates = [(_dist(x, y, pose.x, pose.y), spec.id) for spec, pose in zip(state.scene, objects)
                      if spec.shape in GRASPABLE and _dist(x, y, pose.x, pose.y) <= GRASP_RADIUS]
        if candidates:
            held = min(candidates)[1]
            objects[held - 1] = replace(objects[held - 1], x=x, y=y, support=None)
            for i, pose in enumerate(objects):
                if pose.support == held:
                    objects[i] = replace(pose, support=None)
    elif not close and held is not None:
        interim = replace(state, objects=tuple(objects))
        objects[held - 1] = replace(objects[held - 1], support=_support_at(interim, x, y, held))
        held = None

    return replace(state, gripper=(x, y, z, yaw), gripper_open=gripper_open, held=held,
                   objects=tuple(objects), step_count=state.step_count + 1, wiped=wiped)


def interpolate(prev, nxt):
    """
    In-between frame state: gripper (and held object) halfway, everything else as before the action
    """
    mid = tuple(0.5 * (p + n) for p, n in zip(prev.gripper, nxt.gripper))
    objects = list(prev.objects)
    if prev.held is not None:
        objects[prev.held - 1] = replace(objects[prev.held - 1], x=mid[0], y=mid[1])
    return replace(prev, gripper=mid, objects=tuple(objects))


@lru_cache(maxsize=4)
def _pixel_centers(size):
    centers = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(centers, centers)
    return xx, yy


def _rgb(rgb8):
    return np.asarray(rgb8, dtype=np.float32) / np.float32(255.0)


def shape_mask(spec, pose, size=FRAME_SIZE):
    """
    Pixels covered by an object; non-receptacles always cover their central 2x2 block
    """
    xx, yy = _pixel_centers(size)
    dx, dy = xx - pose.x, yy - pose.y
    c, s = np.cos(-pose.yaw), np.sin(-pose.yaw)
    u, v = c * dx - s * dy, s * dx + c * dy
    r = spec.radius
    if spec.shape in ("disk", "plate") or (spec.shape == "bottle" and pose.upright):
        mask = u ** 2 + v ** 2 <= r ** 2
    elif spec.shape == "bottle":
        mask = (np.abs(u) <= 2.0 * r) & (np.abs(v) <= 0.5 * r)
    elif spec.shape == "square":
        mask = np.maximum(np.abs(u), np.abs(v)) <= 0.8 * r
    elif spec.shape == "sponge":
        mask = (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.5 * r)
    elif spec.shape == "triangle":
        mask = np.ones_like(u, dtype=bool)
        for angle in (-np.pi / 2, np.pi / 6, 5 * np.pi / 6):
            mask &= u * np.cos(angle) + v * np.sin(angle) >= -0.5 * r
    elif spec.shape == "bowl":
        d2 = u ** 2 + v ** 2
        mask = (d2 <= r ** 2) & (d2 >= (0.6 * r) ** 2)
    else:
        raise ValueError(f"Invalid shape specified: {spec.shape}")
    if spec.shape not in RECEPTACLES:
        i0 = int(np.clip(np.floor(pose.y * size - 0.5), 0, size - 2))
        j0 = int(np.clip(np.floor(pose.x * size - 0.5), 0, size - 2))
        mask[i0:i0 + 2, j0:j0 + 2] = True
    return mask


def _depth(state, object_id, limit=8):
    depth, support = 0, state.pose(object_id).support
    while support is not None and limit:
        if state.scene[support - 1].shape in RECEPTACLES:
            break
        depth, support, limit = depth + 1, state.pose(support).support, limit - 1
    return depth


def gripper_pixels(state, size=FRAME_SIZE):
    """
    Pixel coordinates of the gripper glyph; arm length grows with height, a closed gripper fills the centre
    """
    x, y, z, _ = state.gripper
    gi, gj = min(int(y * size), size - 1), min(int(x * size), size - 1)
    arm = 1 + int(np.floor(2.0 * z + 0.5))
    if EMBODIMENTS[state.embodiment].glyph == "plus":
        offsets = [(k * di, k * dj) for k in range(1, arm + 1) for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))]
    else:
        offsets = [(di, dj) for di in range(-arm, arm + 1) for dj in range(-arm, arm + 1)
                   if max(abs(di), abs(dj)) == arm]
    if not state.gripper_open:
        offsets.append((0, 0))
    return [(gi + di, gj + dj) for di, dj in offsets if 0 <= gi + di < size and 0 <= gj + dj < size]


def render(state, size=FRAME_SIZE):
    """
    Rasterise a state in painter's order: table, dirt, receptacles, objects by stacking depth,
    held object, gripper
    :param state: WorldState
    :param size: frame height and width
    :return: float32 frame [size, size, 3] in [0, 1]
    """
    frame = np.empty((size, size, 3), dtype=np.float32)
    frame[:] = _rgb(TABLE_RGB)
    cell = size // WIPE_GRID
    for row, col in sorted(state.dirt - state.wiped):
        frame[row * cell:(row + 1) * cell, col * cell:(col + 1) * cell] = _rgb(DIRT_RGB)

    receptacles = [s.id for s in state.scene if s.shape in RECEPTACLES]
    others = sorted((s.id for s in state.scene if s.shape not in RECEPTACLES and s.id != state.held),
                    key=lambda i: (_depth(state, i), i))
    order = receptacles + others + ([state.held] if state.held is not None else [])
    for object_id in order:
        spec = state.scene[object_id - 1]
        frame[shape_mask(spec, state.pose(object_id), size)] = _rgb(spec.rgb8)

    color = _rgb(EMBODIMENTS[state.embodiment].rgb8)
    for i, j in gripper_pixels(state, size):
        frame[i, j] = color
    return frame


def keypoints(state):
    """
    Ground-truth keypoints: gripper as id 0, then every object centre by id
    """
    points = [(0, float(state.gripper[0]), float(state.gripper[1]))]
    points.extend((s.id, float(p.x), float(p.y)) for s, p in zip(state.scene, state.objects))
    return points


def keypoint_array(state):
    return np.asarray([[x, y] for _, x, y in keypoints(state)], dtype=np.float32)


def advance(state, action, size=FRAME_SIZE):
    """
    One action step with its two rendered frames (halfway, after)
    :param state: WorldState
    :param action: 7-D action
    :param size: frame size
    :return: (next WorldState, frames [2, size, size, 3], keypoints [2, P, 2])
    """
    nxt = step(state, action)
    mid = interpolate(state, nxt)
    frames = np.stack([render(mid, size), render(nxt, size)])
    points = np.stack([keypoint_array(mid), keypoint_array(nxt)])
    return nxt, frames, points


def palette_of(state_or_task):
    """
    Colour table used by the keypoint detector: id -> rgb8, gripper under id 0
    """
    scene = state_or_task.scene
    colors = {s.id: s.rgb8 for s in scene}
    if isinstance(state_or_task, WorldState):
        colors[0] = EMBODIMENTS[state_or_task.embodiment].rgb8
    return colors


def near_goal(anchor_x, anchor_y, offset):
    """
    Point at the given distance from an anchor, towards the table centre
    """
    dx, dy = 0.5 - anchor_x, 0.5 - anchor_y
    norm = np.hypot(dx, dy)
    ux, uy = (dx / norm, dy / norm) if norm > 1e-9 else (1.0, 0.0)
    return anchor_x + offset * ux, anchor_y + offset * uy


def position_success(task, positions):
    """
    Geometric success predicate on object centres alone (shared with the imagination judge)
    :param task: TaskSpec
    :param positions: id -> (x, y); a missing required id means failure
    :return: bool
    """
    need = task.args + ((task.target,) if task.target is not None else ())
    if any(i not in positions for i in need):
        return False
    ax, ay = positions[task.args[0]]
    if task.skill == "pick_place":
        return _dist(ax, ay, *positions[task.target]) < task.object(task.target).radius
    if task.skill == "stack":
        return _dist(ax, ay, *positions[task.target]) < STACK_RADIUS
    if task.skill == "move_near":
        return _dist(ax, ay, *positions[task.target]) < NEAR_RADIUS
    if task.skill == "take_out":
        return _dist(ax, ay, *positions[task.target]) > task.object(task.target).radius
    raise ValueError(f"Skill {task.skill} has no position predicate")


def check_success(state, task):
    """
    Skill-specific success predicate on the true state
    """
    if task.skill == "topple":
        return not state.pose(task.args[0]).upright
    if task.skill == "wipe":
        strip = task.strip_cells()
        return len(strip & state.wiped) >= WIPE_FRACTION * len(strip)
    if state.held == task.args[0]:
        return False
    positions = {s.id: (p.x, p.y) for s, p in zip(state.scene, state.objects)}
    if not position_success(task, positions):
        return False
    if task.skill == "stack":
        return state.pose(task.args[0]).support == task.target
    return True


def _action(state, delta=(0.0, 0.0, 0.0), dyaw=0.0, open_gripper=None):
    gain = EMBODIMENTS[state.embodiment].gain
    if open_gripper is None:
        open_gripper = state.gripper_open
    dx, dy, dz = delta
    return np.array([0.0, 0.0, dyaw, dx / gain, dy / gain, dz / gain, 1.0 if open_gripper else 0.0])


def hold_action(state):
    """
    Zero deltas with the gripper command matching the current gripper flag
    """
    return _action(state)


def _move(state, x, y, z):
    gx, gy, gz, _ = state.gripper
    delta = (float(np.clip(x - gx, -MAX_XY, MAX_XY)), float(np.clip(y - gy, -MAX_XY, MAX_XY)),
             float(np.clip(z - gz, -MAX_Z, MAX_Z)))
    return _action(state, delta)


def _aligned(state, x, y):
    return _dist(state.gripper[0], state.gripper[1], x, y) <= ALIGN


def _pick(state, object_id):
    if state.held is not None:
        return _action(state, open_gripper=True)
    if not state.gripper_open:
        return _action(state, open_gripper=True)
    pose = state.pose(object_id)
    if not _aligned(state, pose.x, pose.y):
        return _move(state, pose.x, pose.y, TRAVEL_Z)
    if state.gripper[2] > GRASP_Z + Z_TOL:
        return _move(state, pose.x, pose.y, GRASP_Z)
    return _action(state, open_gripper=False)


def _place(state, x, y):
    if not _aligned(state, x, y):
        return _move(state, x, y, TRAVEL_Z)
    if state.gripper[2] > PLACE_Z + Z_TOL:
        return _move(state, x, y, PLACE_Z)
    return _action(state, open_gripper=True)


def expert_action(state, task):
    """
    Scripted waypoint controller: approach, descend, grasp, lift, transport, release,
    with skill-specific variants for toppling and wiping; holds still once the task succeeds
    :param state: WorldState
    :param task: TaskSpec
    :return: 7-D action as float64 array
    """
    if check_success(state, task):
        return hold_action(state)
    arg = task.args[0]
    task.object(arg)

    if task.skill == "topple":
        pose = state.pose(arg)
        if not _aligned(state, pose.x, pose.y) or state.gripper[2] > TOPPLE_Z + Z_TOL:
            return _move(state, pose.x, pose.y, TOPPLE_Z)
        return _action(state, dyaw=TOPPLE_YAW)

    if state.held != arg:
        return _pick(state, arg)

    if task.skill == "wipe":
        remaining = sorted(task.strip_cells() - state.wiped, key=lambda rc: rc[1])
        if not remaining:
            raise SimulationError("Wipe expert has no unswept cell left but the task is not done")
        row, col = remaining[0]
        # any move that ends over the cell below contact height sweeps it, even a zero-length one
        return _move(state, (col + 0.5) / WIPE_GRID, (row + 0.5) / WIPE_GRID, WIPE_Z)

    target = state.pose(task.target)
    if task.skill in ("pick_place", "stack"):
        goal = (target.x, target.y)
    elif task.skill == "move_near":
        goal = near_goal(target.x, target.y, NEAR_OFFSET)
    elif task.skill == "take_out":
        goal = near_goal(target.x, target.y, task.object(task.target).radius + TAKE_OUT_CLEARANCE)
    else:
        raise SimulationError(f"No expert phase for skill {task.skill}")
    return _place(state, *goal)


@dataclass(frozen=True)
class SplitSpec:
    """
    Evaluation split: the (skill, embodiment) cells it covers and the attributes it holds out
    """
    name: str
    cells: tuple
    held_out_colors: tuple = ()
    held_out_shapes: tuple = ()


def training_pool(emb):
    """
    Colours and basic shapes an embodiment sees during training
    """
    if emb == "A":
        return ([c for c in PALETTE if c not in HELD_OUT_COLORS],
                [s for s in BASIC_SHAPES if s not in HELD_OUT_SHAPES])
    return list(PALETTE), list(BASIC_SHAPES)


def training_cells(skills=None, embodiments=None, embodiment_skills=None):
    """
    (skill, embodiment) cells of the training partition, optionally restricted
    :param skills: keep only these skills
    :param embodiments: keep only these embodiments
    :param embodiment_skills: {embodiment: skills} further restricting single embodiments
    :return: list of (skill, embodiment)
    """
    embodiment_skills = embodiment_skills or {}
    cells = []
    for emb in sorted(TRAIN_SKILLS):
        if embodiments and emb not in embodiments:
            continue
        allowed = embodiment_skills.get(emb)
        cells.extend((skill, emb) for skill in TRAIN_SKILLS[emb]
                     if (not skills or skill in skills) and (allowed is None or skill in allowed))
    return cells


def split_spec(name, skills=None, embodiments=None, embodiment_skills=None):
    """
    Build an evaluation split from the (possibly restricted) training partition; in_domain repeats the
    trained cells, new_skills evaluates embodiment A on the skills only other embodiments were trained on
    :param name: in_domain, novel_objects or new_skills
    :param skills: skills the model was trained on (None = all)
    :param embodiments: embodiments the model was trained on (None = all)
    :param embodiment_skills: per-embodiment skill restriction of training
    :return: SplitSpec
    """
    trained = training_cells(skills, embodiments, embodiment_skills)
    if name == "in_domain":
        cells = trained
    elif name == "novel_objects":
        cells = [(s, "A") for s in TRAIN_SKILLS["A"]]
        return SplitSpec(name, tuple(cells), HELD_OUT_COLORS, HELD_OUT_SHAPES)
    elif name == "new_skills":
        transferred = {skill for skill, emb in trained if emb != "A"}
        cells = [(s, "A") for s in SKILLS if s not in TRAIN_SKILLS["A"] and s in transferred]
    else:
        raise ValueError(f"Invalid split specified: {name}")
    return SplitSpec(name, tuple(cells))


def sample_split_task(split, skill, emb, rng, trial=0):
    """
    Draw an evaluation task for a split cell
    :param split: SplitSpec
    :param skill: skill of the cell
    :param emb: embodiment of the cell
    :param rng: numpy Generator
    :param trial: trial index, cycles through the held-out attributes of novel_objects
    :return: TaskSpec
    """
    colors, shapes = training_pool(emb)
    if split.name != "novel_objects":
        return sample_task(skill, rng, colors, shapes)
    held_out = [("color", c) for c in split.held_out_colors] + [("shape", s) for s in split.held_out_shapes]
    kind, value = held_out[trial % len(held_out)]
    if kind == "color":
        return sample_task(skill, rng, colors, shapes, arg_color=value)
    return sample_task(skill, rng, colors, shapes, arg_shape=value)

"""Synthetic lane-grid driving world.

A frame is a :class:`Scene`: one of a small vocabulary of road layouts, a
traffic light, the ego vehicle and up to ``N_SLOTS`` objects. Scenes encode
linearly into a frame latent; the physical condition ``R`` is the same
encoding minus the appearance block, split into a map channel (layout and
light one-hots) and a box channel (ego state and object slots).

Continuous fields live on a 0.25-cell lattice so that ``decode_frame`` can
snap back to the exact scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

GRID_W = 8
GRID_H = 24
N_SLOTS = 8
LATTICE = 0.25

CLASSES = ("car", "truck", "bus", "pedestrian", "sign")
VEHICLES = ("car", "truck", "bus")
LIGHTS = ("green", "yellow", "red", "none")
CLASS_SIZE = {"car": (1.0, 2.0), "truck": (1.0, 3.0), "bus": (1.0, 4.0),
              "pedestrian": (0.5, 0.5), "sign": (0.5, 0.5)}

OFF_ROAD, LANE, CROSSWALK = 0, 1, 2

# (first lane column, end lane column, crosswalk start row or None)
LAYOUTS = (
    (3, 5, None),
    (3, 5, 14),
    (2, 5, None),
    (2, 5, 12),
    (2, 6, None),
    (2, 6, 16),
    (1, 7, 10),
    (1, 7, None),
)
CROSSWALK_ROWS = 2

# latent scale per unit of each continuous field
POS_SCALE = 1.0
SIZE_SCALE = 1.0
VEL_SCALE = 1.0
V_CAP = 2.0
SIZE_MAX = 4.0

SLOT_WIDTH = 1 + len(CLASSES) + 6
D_LAYOUT = len(LAYOUTS)
D_LIGHT = len(LIGHTS)
D_MAP = D_LAYOUT + D_LIGHT
D_EGO = 4
D_BOX = D_EGO + N_SLOTS * SLOT_WIDTH
D_COND = D_MAP + D_BOX
D_APP = 8
D_LATENT = D_COND + D_APP
THETA_SLOT = 0.5

MAP_SLICE = slice(0, D_MAP)
LAYOUT_SLICE = slice(0, D_LAYOUT)
LIGHT_SLICE = slice(D_LAYOUT, D_MAP)
EGO_SLICE = slice(D_MAP, D_MAP + D_EGO)
SLOTS_SLICE = slice(D_MAP + D_EGO, D_COND)
BOX_SLICE = slice(D_MAP, D_COND)
APP_SLICE = slice(D_COND, D_LATENT)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    cls: str
    position: tuple[float, float]
    size: tuple[float, float] | None = None
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.size is None:
            object.__setattr__(self, "size", CLASS_SIZE[self.cls])

    def to_dict(self) -> dict:
        return {"class": self.cls, "position": list(self.position),
                "size": list(self.size), "velocity": list(self.velocity)}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(d["class"], tuple(d["position"]), tuple(d["size"]), tuple(d["velocity"]))


@dataclass(frozen=True)
class Ego:
    position: tuple[float, float]
    velocity: tuple[float, float]

    @property
    def speed(self) -> float:
        return float(self.velocity[1])


@dataclass(frozen=True)
class Scene:
    layout: int
    light: str
    ego: Ego
    objects: tuple[SceneObject, ...] = field(default_factory=tuple)

    def __post_init__(self):
        # slot order is canonical so equal object sets compare equal
        object.__setattr__(self, "objects", tuple(canonical_objects(self.objects)))

    def index_of(self, obj: SceneObject) -> int:
        return self.objects.index(obj)

    @property
    def lane_grid(self) -> np.ndarray:
        return lane_grid(self.layout)

    def to_dict(self) -> dict:
        return {"lane_layout": self.layout,
                "objects": [o.to_dict() for o in self.objects],
                "light_state": self.light,
                "ego": {"position": list(self.ego.position),
                        "velocity": list(self.ego.velocity)}}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(int(d["lane_layout"]), d["light_state"],
                   Ego(tuple(d["ego"]["position"]), tuple(d["ego"]["velocity"])),
                   tuple(SceneObject.from_dict(o) for o in d["objects"]))


def lane_grid(layout: int) -> np.ndarray:
    """Cell-type grid indexed ``[x, y]``."""
    a, b, cw = LAYOUTS[layout]
    grid = np.full((GRID_W, GRID_H), OFF_ROAD, dtype=np.int8)
    grid[a:b, :] = LANE
    if cw is not None:
        grid[a:b, cw:cw + CROSSWALK_ROWS] = CROSSWALK
    return grid


def has_light(layout: int) -> bool:
    return LAYOUTS[layout][2] is not None


def stop_line(layout: int) -> float | None:
    return LAYOUTS[layout][2]


def ego_lane_x(layout: int) -> float:
    return LAYOUTS[layout][1] - 0.5


def cell_type(layout: int, x: float, y: float) -> int:
    a, b, cw = LAYOUTS[layout]
    if not (a <= x < b):
        return OFF_ROAD
    if cw is not None and cw <= y < cw + CROSSWALK_ROWS:
        return CROSSWALK
    return LANE


def in_bounds(x: float, y: float) -> bool:
    return 0.0 <= x <= GRID_W and 0.0 <= y <= GRID_H


def validate_scene(scene: Scene) -> None:
    if not 0 <= scene.layout < len(LAYOUTS):
        raise SceneError(f"layout {scene.layout} not in vocabulary")
    if scene.light not in LIGHTS:
        raise SceneError(f"unknown light state {scene.light!r}")
    if has_light(scene.layout) == (scene.light == "none"):
        raise SceneError("light state inconsistent with layout")
    if len(scene.objects) > N_SLOTS:
        raise SceneError(f"{len(scene.objects)} objects exceed {N_SLOTS} slots")
    if not in_bounds(*scene.ego.position):
        raise SceneError("ego out of bounds")
    for obj in scene.objects:
        if obj.cls not in CLASSES:
            raise SceneError(f"unknown class {obj.cls!r}")
        if not in_bounds(*obj.position):
            raise SceneError(f"object out of bounds at {obj.position}")
        if min(obj.size) <= 0:
            raise SceneError("object size must be positive")


def canonical_objects(objects: Iterable[SceneObject]) -> list[SceneObject]:
    return sorted(objects, key=lambda o: (CLASSES.index(o.cls), o.position[0], o.position[1]))


def _pos_to_latent(x, y):
    return (x - GRID_W / 2) * POS_SCALE, (y - GRID_H / 2) * POS_SCALE


def _encode_slot(obj: SceneObject) -> np.ndarray:
    v = np.zeros(SLOT_WIDTH)
    v[0] = 1.0
    v[1 + CLASSES.index(obj.cls)] = 1.0
    k = 1 + len(CLASSES)
    v[k:k + 2] = _pos_to_latent(*obj.position)
    v[k + 2:k + 4] = np.asarray(obj.size) * SIZE_SCALE
    v[k + 4:k + 6] = np.asarray(obj.velocity) * VEL_SCALE
    return v


def map_embed(scene: Scene) -> np.ndarray:
    v = np.zeros(D_MAP)
    v[scene.layout] = 1.0
    v[D_LAYOUT + LIGHTS.index(scene.light)] = 1.0
    return v


def box_embed(scene: Scene) -> np.ndarray:
    v = np.zeros(D_BOX)
    v[0:2] = _pos_to_latent(*scene.ego.position)
    v[2:4] = np.asarray(scene.ego.velocity) * VEL_SCALE
    for i, obj in enumerate(scene.objects):
        v[D_EGO + i * SLOT_WIDTH:D_EGO + (i + 1) * SLOT_WIDTH] = _encode_slot(obj)
    return v


def encode_condition(scene: Scene) -> np.ndarray:
    """Physical condition ``R = [map_embed, box_embed]`` as one vector."""
    validate_scene(scene)
    return np.concatenate([map_embed(scene), box_embed(scene)])


def split_condition(R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return R[..., MAP_SLICE], R[..., BOX_SLICE]


def encode_frame(scene: Scene) -> np.ndarray:
    """Canonical frame latent (appearance block at its zero baseline)."""
    return np.concatenate([encode_condition(scene), np.zeros(D_APP)])


def context_embed(scene: Scene) -> np.ndarray:
    """Input condition ``C``: the encoded frame used as image context."""
    return encode_frame(scene)


def _snap(v: float) -> float:
    return float(np.round(v / LATTICE) * LATTICE) + 0.0


def _decode_pos(lx, ly):
    x = _snap(np.clip(lx / POS_SCALE + GRID_W / 2, 0.0, GRID_W))
    y = _snap(np.clip(ly / POS_SCALE + GRID_H / 2, 0.0, GRID_H))
    return x, y


def _decode_vel(lv):
    return tuple(_snap(np.clip(c / VEL_SCALE, -V_CAP, V_CAP)) for c in lv)


def decode_frame(latent: np.ndarray) -> Scene:
    """Nearest valid scene; total for any finite latent."""
    z = np.asarray(latent, dtype=np.float64)
    if z.shape != (D_LATENT,) and z.shape != (D_COND,):
        raise ValueError(f"expected latent of dim {D_LATENT}, got {z.shape}")
    layout = int(np.argmax(z[LAYOUT_SLICE]))
    light_act = z[LIGHT_SLICE]
    if has_light(layout):
        light = LIGHTS[int(np.argmax(light_act[:3]))]
    else:
        light = "none"
    e = z[EGO_SLICE]
    ego = Ego(_decode_pos(e[0], e[1]), _decode_vel(e[2:4]))
    objects = []
    for i in range(N_SLOTS):
        s = z[SLOTS_SLICE][i * SLOT_WIDTH:(i + 1) * SLOT_WIDTH]
        if s[0] < THETA_SLOT:
            continue
        cls = CLASSES[int(np.argmax(s[1:1 + len(CLASSES)]))]
        k = 1 + len(CLASSES)
        pos = _decode_pos(s[k], s[k + 1])
        size = tuple(_snap(np.clip(c / SIZE_SCALE, LATTICE, SIZE_MAX)) for c in s[k + 2:k + 4])
        objects.append(SceneObject(cls, pos, size, _decode_vel(s[k + 4:k + 6])))
    return Scene(layout, light, ego, tuple(objects))


@dataclass(frozen=True)
class FrameDiagnostics:
    """Raw-latent defects that decoding silently repairs."""

    out_of_bounds: int
    ambiguous: int
    ego_lost: bool
    light_mismatch: bool

    @property
    def invalid(self) -> bool:
        return bool(self.out_of_bounds or self.ambiguous or self.ego_lost or self.light_mismatch)


def frame_diagnostics(latent: np.ndarray, margin: float = 0.3, bound_tol: float = 0.5) -> FrameDiagnostics:
    """Count decode repairs: clipped positions, near-tie one-hots, lost ego."""
    z = np.asarray(latent, dtype=np.float64)

    def outside(lx, ly):
        x = lx / POS_SCALE + GRID_W / 2
        y = ly / POS_SCALE + GRID_H / 2
        return x < -bound_tol or x > GRID_W + bound_tol or y < -bound_tol or y > GRID_H + bound_tol

    def tie(acts):
        top = np.sort(acts)[-2:]
        return top[1] - top[0] < margin

    ambiguous = int(tie(z[LAYOUT_SLICE]))
    layout = int(np.argmax(z[LAYOUT_SLICE]))
    light_act = z[LIGHT_SLICE]
    light_mismatch = bool(has_light(layout) != (np.argmax(light_act) != 3))
    if has_light(layout):
        ambiguous += int(tie(light_act[:3]))
    oob = 0
    for i in range(N_SLOTS):
        s = z[SLOTS_SLICE][i * SLOT_WIDTH:(i + 1) * SLOT_WIDTH]
        if abs(s[0] - THETA_SLOT) < margin / 2:
            ambiguous += 1
        if s[0] < THETA_SLOT:
            continue
        ambiguous += int(tie(s[1:1 + len(CLASSES)]))
        k = 1 + len(CLASSES)
        oob += int(outside(s[k], s[k + 1]))
    e = z[EGO_SLICE]
    return FrameDiagnostics(oob, ambiguous, bool(outside(e[0], e[1])), light_mismatch)


# --- target edits ---------------------------------------------------------

EDIT_KINDS = ("add_object", "remove_object", "change_class", "flip_light", "shift_object")
LIGHT_FLIP = {"green": "red", "yellow": "red", "red": "green"}


@dataclass(frozen=True)
class SceneEdit:
    kind: str
    cls: str | None = None
    index: int = -1
    position: tuple[float, float] | None = None
    velocity: tuple[float, float] = (0.0, 0.0)
    offset: tuple[float, float] = (0.0, 0.0)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def apply_edit(scene: Scene, edit: SceneEdit) -> Scene:
    objs = list(scene.objects)
    if edit.kind == "add_object":
        if edit.cls is None or edit.position is None:
            raise SceneError("add_object needs a class and a position")
        if len(objs) >= N_SLOTS:
            raise SceneError("scene is full")
        objs.append(SceneObject(edit.cls, tuple(edit.position), None, tuple(edit.velocity)))
    elif edit.kind in ("remove_object", "change_class", "shift_object"):
        if not objs:
            raise SceneError(f"{edit.kind} on a scene without objects")
        if not -len(objs) <= edit.index < len(objs):
            raise SceneError(f"object index {edit.index} out of range")
        obj = objs[edit.index]
        if edit.kind == "remove_object":
            del objs[edit.index]
        elif edit.kind == "change_class":
            if edit.cls not in CLASSES:
                raise SceneError(f"unknown class {edit.cls!r}")
            objs[edit.index] = replace(obj, cls=edit.cls, size=CLASS_SIZE[edit.cls])
        else:
            x, y = obj.position
            objs[edit.index] = replace(obj, position=(x + edit.offset[0], y + edit.offset[1]))
    elif edit.kind == "flip_light":
        if scene.light == "none":
            raise SceneError("flip_light on a layout without a traffic light")
        return replace(scene, light=LIGHT_FLIP[scene.light])
    else:
        raise SceneError(f"unknown edit {edit.kind!r}")
    out = replace(scene, objects=tuple(objs))
    validate_scene(out)
    return out


def make_target(scene: Scene, edit: SceneEdit) -> tuple[Scene, np.ndarray]:
    """Edited target scene and its context embedding ``C*``."""
    target = apply_edit(scene, edit)
    return target, context_embed(target)


def target_scenes(scenes: Sequence[Scene], edit: SceneEdit) -> list[Scene]:
    """Per-frame targets for a video-level edit.

    A light flip is resolved once against the first frame, so the target
    light stays fixed while the clean light cycles. Other edits apply frame
    by frame; frames where the edit is infeasible keep their clean scene.
    """
    if edit.kind == "flip_light" and scenes[0].light != "none":
        light = LIGHT_FLIP[scenes[0].light]
        return [replace(s, light=light) if s.light != "none" else s for s in scenes]
    out = []
    for s in scenes:
        try:
            out.append(apply_edit(s, edit))
        except SceneError:
            out.append(s)
    return out


def default_edit(scene: Scene) -> SceneEdit:
    """Hazard-inducing edit: turn the light red, else drop a car ahead of ego."""
    if scene.light in ("green", "yellow"):
        return SceneEdit("flip_light")
    ex, ey = scene.ego.position
    return SceneEdit("add_object", cls="car", position=(ex, min(ey + 3.0, GRID_H)))


# --- ground-truth rollouts ------------------------------------------------

@dataclass(frozen=True)
class RiskRules:
    """Shared hazard definition used by the rollout policy and the judge."""

    rho_risk: float = 10.0
    brake_distance: float = 4.0
    lane_half_width: float = 0.5
    brake_step: float = 0.25


def risk_ahead(scene: Scene, rules: RiskRules = RiskRules()) -> bool:
    ex, ey = scene.ego.position
    sl = stop_line(scene.layout)
    if sl is not None and scene.light == "red" and 0.0 < sl - ey <= rules.rho_risk:
        return True
    for obj in scene.objects:
        if obj.cls == "sign":
            continue
        ox, oy = obj.position
        if abs(ox - ex) < rules.lane_half_width and 0.0 < oy - ey <= rules.brake_distance:
            return True
    return False


LIGHT_CYCLE = ("green",) * 5 + ("yellow",) * 2 + ("red",) * 4


def _q(v: float) -> float:
    return float(np.round(v / LATTICE) * LATTICE)


def _random_scene(rng: np.random.Generator) -> tuple[Scene, int, float]:
    layout = int(rng.integers(len(LAYOUTS)))
    a, b, cw = LAYOUTS[layout]
    phase = int(rng.integers(len(LIGHT_CYCLE)))
    light = LIGHT_CYCLE[phase] if cw is not None else "none"
    ex = ego_lane_x(layout)
    ey = _q(rng.uniform(1.0, 4.0))
    cruise = float(rng.choice([0.5, 0.75, 1.0, 1.25]))
    ego = Ego((ex, ey), (0.0, cruise))
    mid = a + (b - a) // 2
    objects: list[SceneObject] = []
    for _ in range(int(rng.integers(2, 7))):
        kind = rng.choice(["same", "oncoming", "walker", "crossing", "sign"])
        if kind == "same":
            col = int(rng.integers(mid, b))
            cls = str(rng.choice(VEHICLES))
            y = _q(rng.uniform(ey + 5.0, GRID_H - 2.0))
            objects.append(SceneObject(cls, (col + 0.5, y), None, (0.0, float(rng.choice([0.5, 0.75, 1.0])))))
        elif kind == "oncoming" and mid > a:
            col = int(rng.integers(a, mid))
            cls = str(rng.choice(VEHICLES))
            y = _q(rng.uniform(4.0, GRID_H - 1.0))
            objects.append(SceneObject(cls, (col + 0.5, y), None, (0.0, -float(rng.choice([0.5, 0.75, 1.0])))))
        elif kind == "crossing" and cw is not None:
            left = bool(rng.integers(2))
            x = a - 0.5 if left else b + 0.5
            vx = float(rng.choice([0.25, 0.5])) * (1 if left else -1)
            objects.append(SceneObject("pedestrian", (x, cw + 1.0), None, (vx, 0.0)))
        elif kind in ("walker", "crossing"):
            x = float(rng.choice([max(a - 0.5, 0.25), min(b + 0.5, GRID_W - 0.25)]))
            y = _q(rng.uniform(1.0, GRID_H - 1.0))
            objects.append(SceneObject("pedestrian", (x, y), None, (0.0, float(rng.choice([-0.5, -0.25, 0.25, 0.5])))))
        else:
            x = float(rng.choice([max(a - 0.75, 0.25), min(b + 0.75, GRID_W - 0.25)]))
            y = _q(rng.uniform(2.0, GRID_H - 2.0))
            objects.append(SceneObject("sign", (x, y)))
    scene = Scene(layout, light, ego, tuple(objects))
    validate_scene(scene)
    return scene, phase, cruise


def step_scene(scene: Scene, phase: int, cruise: float, rules: RiskRules = RiskRules()) -> tuple[Scene, int]:
    """Advance one frame: objects by their velocity, ego by its braking policy."""
    v = scene.ego.speed
    v = max(0.0, v - rules.brake_step) if risk_ahead(scene, rules) else min(cruise, v + rules.brake_step)
    ex, ey = scene.ego.position
    ego = Ego((ex, min(ey + v, float(GRID_H))), (0.0, v))
    objects = []
    for obj in scene.objects:
        x = obj.position[0] + obj.velocity[0]
        y = obj.position[1] + obj.velocity[1]
        if in_bounds(x, y):
            objects.append(replace(obj, position=(x, y)))
    phase = (phase + 1) % len(LIGHT_CYCLE)
    light = LIGHT_CYCLE[phase] if has_light(scene.layout) else "none"
    return Scene(scene.layout, light, ego, tuple(objects)), phase


@dataclass
class Video:
    """Frame latents with their decoded scenes and per-frame conditions."""

    latents: np.ndarray
    scenes: list[Scene]
    conditions: np.ndarray
    context: np.ndarray
    video_id: int = 0

    def __post_init__(self):
        if len(self.scenes) < 1 or len(self.scenes) != len(self.latents):
            raise ValueError("video needs M >= 1 frames with one scene per latent")

    @property
    def num_frames(self) -> int:
        return len(self.scenes)


def rollout_scenes(M: int, rng: np.random.Generator) -> list[Scene]:
    scene, phase, cruise = _random_scene(rng)
    scenes = [scene]
    for _ in range(M - 1):
        scene, phase = step_scene(scene, phase, cruise)
        scenes.append(scene)
    return scenes


def video_from_scenes(scenes: Sequence[Scene], video_id: int = 0) -> Video:
    latents = np.stack([encode_frame(s) for s in scenes])
    conds = np.stack([encode_condition(s) for s in scenes])
    return Video(latents, list(scenes), conds, context_embed(scenes[0]), video_id)


def rollout_dataset(n_videos: int, M: int, seed: int) -> list[Video]:
    """Ground-truth videos; video ``i`` uses the ``i``-th child of ``seed``."""
    if n_videos < 0 or M < 1:
        raise ValueError("need n_videos >= 0 and M >= 1")
    children = np.random.SeedSequence(seed).spawn(n_videos)
    return [video_from_scenes(rollout_scenes(M, np.random.default_rng(c)), i)
            for i, c in enumerate(children)]


def frame_records(videos: Sequence[Video]) -> Iterable[dict]:
    for v in videos:
        for m, s in enumerate(v.scenes):
            yield {"video_id": v.video_id, "frame_idx": m, **s.to_dict()}


def dumps_jsonl(videos: Sequence[Video]) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                   for r in frame_records(videos))


def load_jsonl(text: str) -> list[Video]:
    by_video: dict[int, list[tuple[int, Scene]]] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        if "video_id" not in r:
            continue
        by_video.setdefault(int(r["video_id"]), []).append((int(r["frame_idx"]), Scene.from_dict(r)))
    out = []
    for vid in sorted(by_video):
        frames = [s for _, s in sorted(by_video[vid], key=lambda p: p[0])]
        out.append(video_from_scenes(frames, vid))
    return out

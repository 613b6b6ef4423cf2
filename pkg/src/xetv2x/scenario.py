"""Synthetic cooperative driving scenes.

World generation (constant-velocity / constant-turn boxes on a ground plane),
per-agent sensor rendering (ray-cast LiDAR, orthographic box-painting camera),
the frame-delay V2X channel, ego-ROI ground truth and payload accounting.

Frames: the world is z-up, meters and radians. Each agent frame has its
origin on the ground below the agent, x forward, y left. Sensor data is
rounded to float32 at render time so that files round-trip exactly.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .image_bev import ImageFrame
from .numerics import ConfigError, IntegrityError, derive_seed, make_rng
from .pointpillar import PointCloud, RoiBox
from .track_engine import CLASSES, DetectionRecord, wrap_angle

RATES_HZ = (5.0, 10.0)
OBSTACLE = -1  # static occluder, never part of the ground truth
CLASS_DIMS = {0: (4.2, 1.8, 1.5), 1: (0.6, 0.6, 1.75), 2: (2.0, 0.8, 1.4), 3: (1.8, 0.6, 1.5)}
CLASS_SPEED_SCALE = {0: 1.0, 1: 0.4, 2: 1.0, 3: 0.6}
CLASS_COLOR = {0: (1.0, 0.2, 0.2), 1: (0.2, 1.0, 0.2), 2: (0.2, 0.2, 1.0), 3: (1.0, 1.0, 0.2), OBSTACLE: (0.5, 0.5, 0.5)}
REFLECTIVITY = {0: 0.8, 1: 0.5, 2: 0.7, 3: 0.6, OBSTACLE: 0.3}
GROUND_REFLECTIVITY = 0.1
AGENT_KINDS = ("ego", "cav", "rsu")

DESK_ROI = RoiBox(0.0, 25.6, -12.8, 12.8, -3.0, 5.0)


def pose_matrix(x: float, y: float, yaw: float, z: float = 0.0) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    T[:3, 3] = [x, y, z]
    return T


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


# ----------------------------------------------------------------------------
# rigs


@dataclass(frozen=True)
class LidarRig:
    height: float = 1.8
    beams: int = 16
    elev_min_deg: float = -15.0
    elev_max_deg: float = 3.0
    az_min_deg: float = -60.0
    az_max_deg: float = 60.0
    az_step_deg: float = 0.5
    max_range: float = 40.0

    def directions(self) -> np.ndarray:
        """Unit ray directions in the agent frame, (beams * azimuths, 3)."""
        el = np.deg2rad(np.linspace(self.elev_min_deg, self.elev_max_deg, self.beams))
        n_az = int(round((self.az_max_deg - self.az_min_deg) / self.az_step_deg))
        az = np.deg2rad(self.az_min_deg + self.az_step_deg * np.arange(n_az))
        E, A = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class CameraRig:
    """Orthographic camera looking along its x axis; pixels are (lateral, height) cells."""
    height: float = 1.6
    yaw_deg: float = 0.0
    width: int = 64
    height_px: int = 32
    px_lateral: float = 0.4
    px_height: float = 0.2
    top: float = 4.4  # camera-frame z of the upper image edge
    max_depth: float = 40.0

    def intrinsics(self) -> np.ndarray:
        """Maps camera-frame (y, z, 1) to pixel (u, v, 1); pixel (i, j) is centered at (j + 0.5, i + 0.5)."""
        return np.array([
            [-1.0 / self.px_lateral, 0.0, self.width / 2.0],
            [0.0, -1.0 / self.px_height, self.top / self.px_height],
            [0.0, 0.0, 1.0],
        ])

    def camera_to_agent(self) -> np.ndarray:
        return pose_matrix(0.0, 0.0, math.radians(self.yaw_deg), self.height)


@dataclass(frozen=True)
class SensorRig:
    lidar: LidarRig
    camera: CameraRig
    roi: RoiBox


def ego_rig(image_w: int = 64, image_h: int = 32) -> SensorRig:
    return SensorRig(LidarRig(), _camera(image_w, image_h), DESK_ROI)


def rsu_rig(image_w: int = 64, image_h: int = 32) -> SensorRig:
    lidar = LidarRig(height=5.0, beams=16, elev_min_deg=-40.0, elev_max_deg=-3.0, az_min_deg=-180.0,
                     az_max_deg=180.0, az_step_deg=1.0)
    cam = replace(_camera(image_w, image_h), height=5.0, top=1.2)
    return SensorRig(lidar, cam, DESK_ROI)


def cav_rig(image_w: int = 64, image_h: int = 32) -> SensorRig:
    return ego_rig(image_w, image_h)


def _camera(image_w: int, image_h: int) -> CameraRig:
    # keep the field of view fixed (25.6 m x 6.4 m) whatever the resolution
    return CameraRig(width=image_w, height_px=image_h, px_lateral=25.6 / image_w, px_height=6.4 / image_h)


# ----------------------------------------------------------------------------
# world


@dataclass
class ObjectState:
    obj_id: int
    class_id: int  # index into CLASSES, or OBSTACLE
    center: np.ndarray  # (3,), box center, world frame
    dims: np.ndarray  # (3,) l, w, h
    yaw: float
    velocity: np.ndarray  # (2,) world frame, m/s
    yaw_rate: float = 0.0


@dataclass
class AgentState:
    agent_id: str
    kind: str
    x: float
    y: float
    yaw: float
    speed: float
    rig: SensorRig

    @property
    def pose(self) -> np.ndarray:
        """agent -> world."""
        return pose_matrix(self.x, self.y, self.yaw)


@dataclass
class WorldState:
    frame_index: int
    t: float
    objects: list[ObjectState]
    agents: list[AgentState]

    def __post_init__(self):
        ids = [o.obj_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise IntegrityError("object ids must be unique")
        if sum(a.kind == "ego" for a in self.agents) != 1:
            raise IntegrityError("exactly one ego agent required")
        for o in self.objects:
            if not (np.all(np.isfinite(o.center)) and np.isfinite(o.yaw)):
                raise IntegrityError(f"non-finite pose for object {o.obj_id}")

    @property
    def ego(self) -> AgentState:
        return next(a for a in self.agents if a.kind == "ego")

    def agent(self, agent_id: str) -> AgentState:
        return next(a for a in self.agents if a.agent_id == agent_id)


@dataclass
class AgentFrame:
    agent_id: str
    frame_index: int
    t: float
    cloud: PointCloud
    image: ImageFrame
    pose: np.ndarray  # agent -> world
    lidar_hits: dict[int, int] = field(default_factory=dict)
    pixel_hits: dict[int, int] = field(default_factory=dict)
    cache: dict = field(default_factory=dict, repr=False, compare=False)  # derived data, e.g. pillars

    @property
    def calib(self) -> tuple[np.ndarray, np.ndarray]:
        return self.image.intrinsics, self.image.extrinsics


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "intersection"
    rate_hz: float = 10.0
    duration_s: float = 4.0
    other_kind: str = "rsu"
    num_objects: tuple[int, int] = (3, 5)
    speed: tuple[float, float] = (0.5, 2.0)
    class_weights: tuple[float, ...] = (0.7, 0.1, 0.1, 0.1)
    turn_fraction: float = 0.25
    occluder: bool = True
    hidden_object: bool = True
    hidden_speed: tuple[float, float] = (0.3, 0.8)
    ego_speed: float = 0.0
    other_speed: float = 0.0
    min_hits: int = 5
    min_pixels: int = 20
    image_w: int = 64
    image_h: int = 32

    def __post_init__(self):
        if self.rate_hz not in RATES_HZ:
            raise ConfigError(f"rate must be one of {RATES_HZ} Hz, got {self.rate_hz}")
        if self.duration_s <= 0:
            raise ConfigError("duration must be positive")
        if self.other_kind not in ("rsu", "cav"):
            raise ConfigError(f"other agent kind must be rsu or cav, got {self.other_kind!r}")
        if len(self.class_weights) != len(CLASSES) or min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
            raise ConfigError("class_weights needs one nonnegative weight per class")

    @property
    def num_frames(self) -> int:
        return int(round(self.duration_s * self.rate_hz))

    @property
    def frame_ms(self) -> float:
        return 1000.0 / self.rate_hz


PRESETS = {
    "intersection": ScenarioSpec(),
    "moving": ScenarioSpec(name="moving", rate_hz=5.0, duration_s=4.0, speed=(3.0, 6.0), hidden_speed=(2.0, 2.8),
                           num_objects=(4, 6)),
    "v2v": ScenarioSpec(name="v2v", rate_hz=5.0, duration_s=5.0, other_kind="cav", speed=(2.0, 5.0),
                        occluder=False, hidden_object=False, ego_speed=3.0, other_speed=3.0, num_objects=(4, 6)),
}


def get_preset(name: str) -> ScenarioSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


# occluder and hidden object sit at fixed places relative to the ego start:
# the hidden car stays inside the occluder's shadow for both ego sensors
OCCLUDER_CENTER = (9.25, 3.0)
OCCLUDER_DIMS = (2.5, 8.0, 3.2)
RSU_POSE = (12.8, -14.0, math.pi / 2)


def _radius(o: ObjectState) -> float:
    return 0.5 * math.hypot(o.dims[0], o.dims[1])


def _conflicts(o: ObjectState, placed: list[ObjectState], times: np.ndarray, margin: float) -> bool:
    """True if o comes within ``margin`` of any placed object (footprint circles) at any sampled time."""
    for t in times:
        a = _advance(o, t)
        for p in placed:
            b = _advance(p, t)
            if np.hypot(*(a.center[:2] - b.center[:2])) < _radius(a) + _radius(b) + margin:
                return True
    return False


def generate_scenario(spec: ScenarioSpec, seed: int) -> list[WorldState]:
    """World states for every frame; deterministic per (spec, seed).

    Traffic positions are drawn for mid-sequence and rolled back to t = 0,
    rejecting trajectories that come close to already placed objects.
    """
    rng = make_rng(derive_seed(seed, "world", spec.name))
    dt = 1.0 / spec.rate_hz
    times = np.linspace(0.0, spec.duration_s, 9)
    ego = AgentState("ego", "ego", 0.0, 0.0, 0.0, spec.ego_speed, ego_rig(spec.image_w, spec.image_h))
    if spec.other_kind == "rsu":
        other = AgentState("rsu", "rsu", *RSU_POSE, 0.0, rsu_rig(spec.image_w, spec.image_h))
    else:
        other = AgentState("cav", "cav", 30.0, 3.5, math.pi, spec.other_speed, cav_rig(spec.image_w, spec.image_h))
    objects: list[ObjectState] = []
    # agents as static footprints so nothing spawns on top of them
    placed = [ObjectState(0, OBSTACLE, np.array([a.x, a.y, 0.0]), np.array([4.5, 2.0, 1.5]), a.yaw,
                          a.speed * np.array([math.cos(a.yaw), math.sin(a.yaw)])) for a in (ego, other)]
    next_id = 1
    if spec.occluder:
        l, w, h = OCCLUDER_DIMS
        objects.append(ObjectState(next_id, OBSTACLE, np.array([*OCCLUDER_CENTER, h / 2]), np.array(OCCLUDER_DIMS),
                                   0.0, np.zeros(2)))
        next_id += 1
    if spec.hidden_object:
        l, w, h = CLASS_DIMS[0]
        c = np.array([rng.uniform(12.8, 14.0), rng.uniform(1.8, 3.4)])
        v = np.array([rng.uniform(*spec.hidden_speed), 0.0])
        objects.append(ObjectState(next_id, 0, np.array([*c, h / 2]), np.array(CLASS_DIMS[0]), 0.0, v))
        next_id += 1
    placed += objects
    weights = np.asarray(spec.class_weights) / sum(spec.class_weights)
    n = int(rng.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    extent_x = (3.0, 24.0 + spec.ego_speed * spec.duration_s * 0.5)
    for _ in range(n):
        cls = int(rng.choice(len(CLASSES), p=weights))
        l, w, h = CLASS_DIMS[cls]
        for _attempt in range(100):
            c = np.array([rng.uniform(*extent_x), rng.uniform(-11.0, 11.0)])
            if spec.ego_speed > 0:
                yaw = float(rng.choice([0.0, math.pi]))
            else:
                yaw = float(rng.choice([0.0, math.pi / 2, math.pi, -math.pi / 2]))
            yaw += rng.uniform(-0.1, 0.1)
            speed = rng.uniform(*spec.speed) * CLASS_SPEED_SCALE[cls]
            yaw_rate = rng.uniform(-0.3, 0.3) if rng.uniform() < spec.turn_fraction else 0.0
            mid = ObjectState(next_id, cls, np.array([*c, h / 2]), np.array((l, w, h)), yaw,
                              speed * np.array([math.cos(yaw), math.sin(yaw)]), yaw_rate)
            o = _advance(mid, -0.5 * spec.duration_s)
            if not _conflicts(o, placed, times, 0.5):
                objects.append(o)
                placed.append(o)
                next_id += 1
                break
    worlds = []
    for k in range(spec.num_frames):
        t = k * dt
        objs = [_advance(o, t) for o in objects]
        agents = [_advance_agent(a, t) for a in (ego, other)]
        worlds.append(WorldState(k, t, objs, agents))
    return worlds


def _advance(o: ObjectState, t: float) -> ObjectState:
    speed = float(np.hypot(*o.velocity))
    if o.yaw_rate == 0.0 or speed == 0.0:
        c = o.center.copy()
        c[:2] += o.velocity * t
        return replace(o, center=c)
    # constant-turn arc
    yaw = o.yaw + o.yaw_rate * t
    R = speed / o.yaw_rate
    c = o.center.copy()
    c[0] += R * (math.sin(yaw) - math.sin(o.yaw))
    c[1] += -R * (math.cos(yaw) - math.cos(o.yaw))
    return replace(o, center=c, yaw=wrap_angle(yaw), velocity=speed * np.array([math.cos(yaw), math.sin(yaw)]))


def _advance_agent(a: AgentState, t: float) -> AgentState:
    return replace(a, x=a.x + a.speed * t * math.cos(a.yaw), y=a.y + a.speed * t * math.sin(a.yaw))


# ----------------------------------------------------------------------------
# rendering


def _ray_box(o: np.ndarray, d: np.ndarray, ob: ObjectState) -> np.ndarray:
    """Entry distance of each ray into an oriented box (inf on miss); rays starting inside miss."""
    c, s = math.cos(ob.yaw), math.sin(ob.yaw)
    rel = o - ob.center
    lo = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]], axis=-1)
    ld = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=-1)
    ld = np.where(np.abs(ld) < 1e-12, 1e-12, ld)
    half = ob.dims / 2.0
    t1 = (-half - lo) / ld
    t2 = (half - lo) / ld
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(hit, tmin, np.inf)


def _first_hits(o: np.ndarray, d: np.ndarray, objects: list[ObjectState]):
    t = np.full(len(o), np.inf)
    idx = np.full(len(o), -1, dtype=np.int64)
    for i, ob in enumerate(objects):
        ti = _ray_box(o, d, ob)
        closer = ti < t
        t[closer] = ti[closer]
        idx[closer] = i
    return t, idx


def render_sensors(w: WorldState, agent: AgentState) -> AgentFrame:
    """Ray-cast LiDAR and orthographic camera for one agent, stamped with the world time."""
    rig = agent.rig
    pose = agent.pose
    R = pose[:3, :3]
    # lidar
    dirs = rig.lidar.directions() @ R.T
    origin = pose[:3, 3] + R @ np.array([0.0, 0.0, rig.lidar.height])
    o = np.broadcast_to(origin, dirs.shape)
    t, idx = _first_hits(o, dirs, w.objects)
    with np.errstate(divide="ignore"):
        tg = np.where(dirs[:, 2] < -1e-12, -origin[2] / dirs[:, 2], np.inf)
    ground = tg < t
    t = np.where(ground, tg, t)
    idx = np.where(ground, -1, idx)
    keep = t <= rig.lidar.max_range
    pts_w = o[keep] + t[keep, None] * dirs[keep]
    pts = (pts_w - pose[:3, 3]) @ R  # world -> agent
    refl = np.array([REFLECTIVITY[w.objects[i].class_id] if i >= 0 else GROUND_REFLECTIVITY for i in idx[keep]])
    cloud = PointCloud(_f32(np.concatenate([pts, refl[:, None]], axis=1)))
    lidar_hits: dict[int, int] = {}
    for i in idx[keep]:
        if i >= 0:
            oid = w.objects[i].obj_id
            lidar_hits[oid] = lidar_hits.get(oid, 0) + 1
    # camera
    cam = rig.camera
    cam_to_world = pose @ cam.camera_to_agent()
    jj, ii = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height_px) + 0.5)
    yc = (cam.width / 2.0 - jj) * cam.px_lateral
    zc = cam.top - ii * cam.px_height
    pc = np.stack([np.zeros_like(yc), yc, zc], axis=-1).reshape(-1, 3)
    po = pc @ cam_to_world[:3, :3].T + cam_to_world[:3, 3]
    pd = np.broadcast_to(cam_to_world[:3, 0], po.shape)
    t, idx = _first_hits(po, pd, w.objects)
    hit = t <= cam.max_depth
    img = np.zeros((cam.height_px * cam.width, 3))
    pixel_hits: dict[int, int] = {}
    for p in np.nonzero(hit)[0]:
        ob = w.objects[idx[p]]
        img[p] = np.asarray(CLASS_COLOR[ob.class_id]) * (1.0 - 0.5 * t[p] / cam.max_depth)
        pixel_hits[ob.obj_id] = pixel_hits.get(ob.obj_id, 0) + 1
    data = _f32(img.reshape(cam.height_px, cam.width, 3).transpose(2, 0, 1))
    image = ImageFrame(data, cam.intrinsics(), cam_to_world, cam.max_depth)
    return AgentFrame(agent.agent_id, w.frame_index, w.t, cloud, image, pose,
                      dict(sorted(lidar_hits.items())), dict(sorted(pixel_hits.items())))


def visible_objects(frame: AgentFrame, min_hits: int = 5, min_pixels: int = 20) -> set[int]:
    ids = {i for i, n in frame.lidar_hits.items() if n >= min_hits}
    ids |= {i for i, n in frame.pixel_hits.items() if n >= min_pixels}
    return ids


# ----------------------------------------------------------------------------
# ground truth


def object_record(o: ObjectState) -> DetectionRecord:
    return DetectionRecord(o.class_id, tuple(float(v) for v in o.center), tuple(float(v) for v in o.dims), o.yaw, 1.0,
                           o.obj_id)


def build_gt(world: WorldState, roi_ego: RoiBox, visibility: dict[str, set[int]]) -> list[DetectionRecord]:
    """Objects seen by any agent (any modality), restricted to the ego ROI; sorted by id."""
    seen = set().union(*visibility.values()) if visibility else set()
    to_ego = np.linalg.inv(world.ego.pose)
    out = []
    for o in world.objects:
        if o.class_id == OBSTACLE or o.obj_id not in seen:
            continue
        p = to_ego[:3, :3] @ o.center + to_ego[:3, 3]
        if roi_ego.contains(p):
            out.append(object_record(o))
    return sorted(out, key=lambda r: r.track_id)


# ----------------------------------------------------------------------------
# latency channel


@dataclass
class LatencyChannel:
    delay_frames: int
    queue: deque = field(default_factory=deque)
    last_k: Optional[int] = None

    def __post_init__(self):
        if self.delay_frames < 0:
            raise ConfigError("delay must be nonnegative")


def channel_step(ch: LatencyChannel, produced: Optional[AgentFrame], k: int) -> Optional[AgentFrame]:
    """Push the frame produced at ego index k; return the one produced at k - delay (if any)."""
    if ch.last_k is not None and k <= ch.last_k:
        raise IntegrityError(f"frame index {k} pushed after {ch.last_k}")
    ch.last_k = k
    ch.queue.append((k, produced))
    target = k - ch.delay_frames
    while ch.queue and ch.queue[0][0] < target:
        ch.queue.popleft()
    if ch.queue and ch.queue[0][0] == target:
        return ch.queue.popleft()[1]
    return None


# ----------------------------------------------------------------------------
# payload


@dataclass(frozen=True)
class PayloadWidths:
    raw_sample: int = 4  # bytes per image channel sample
    point: int = 16  # x, y, z, intensity as float32
    feature: int = 2  # float16 feature value
    record: int = 41  # frame u32, class u8, 8 x f32, track id u32
    header: int = 16


@dataclass(frozen=True)
class PayloadReport:
    level: str
    bytes_per_frame: int


def payload_account(frame: AgentFrame, feats, dets, widths: PayloadWidths = PayloadWidths(),
                    modalities=("image", "lidar")) -> list[PayloadReport]:
    """Bytes per frame for sending raw sensor data, feature pyramids, or detections.

    feats: iterable of pyramids, each a list of FeatureMap or arrays.
    ``modalities`` selects which raw streams count (pass the matching pyramids).
    """
    raw = 0
    if "image" in modalities:
        raw += frame.image.data.size * widths.raw_sample
    if "lidar" in modalities:
        raw += len(frame.cloud.points) * widths.point
    n_feat = sum(int(np.asarray(getattr(f, "data", f)).size) for pyr in feats for f in pyr)
    inst = widths.header + len(dets) * widths.record
    return [PayloadReport("raw", raw), PayloadReport("feature", n_feat * widths.feature), PayloadReport("instance", inst)]


# ----------------------------------------------------------------------------
# full scenario: worlds + rendered frames + GT, and its file format


@dataclass
class Scenario:
    spec: ScenarioSpec
    seed: int
    worlds: list[WorldState]
    frames: dict[str, list[AgentFrame]]
    gt: list[list[DetectionRecord]]

    @property
    def other_id(self) -> str:
        return next(a.agent_id for a in self.worlds[0].agents if a.kind != "ego")

    def __len__(self) -> int:
        return len(self.worlds)


def simulate(spec: ScenarioSpec, seed: int) -> Scenario:
    worlds = generate_scenario(spec, seed)
    frames: dict[str, list[AgentFrame]] = {a.agent_id: [] for a in worlds[0].agents}
    gt = []
    for w in worlds:
        vis = {}
        for a in w.agents:
            f = render_sensors(w, a)
            frames[a.agent_id].append(f)
            vis[a.agent_id] = visible_objects(f, spec.min_hits, spec.min_pixels)
        gt.append(build_gt(w, w.ego.rig.roi, vis))
    return Scenario(spec, seed, worlds, frames, gt)


FORMAT = "xetv2x-scenario"
VERSION = 1


def _rig_to_dict(rig: SensorRig) -> dict:
    return asdict(rig)


def _rig_from_dict(d: dict) -> SensorRig:
    return SensorRig(LidarRig(**d["lidar"]), CameraRig(**d["camera"]), RoiBox(**d["roi"]))


def save_scenario(scn: Scenario, path) -> tuple[Path, Path]:
    """Write ``path`` (JSON, sorted keys) and ``path.bin`` (little-endian float32 sensor arrays)."""
    path = Path(path)
    side = path.with_name(path.name + ".bin")
    chunks: list[bytes] = []
    offset = 0

    def put(a: np.ndarray) -> list:
        nonlocal offset
        b = np.ascontiguousarray(a, dtype="<f4").tobytes()
        chunks.append(b)
        ref = [offset, list(a.shape)]
        offset += len(b)
        return ref

    frames = []
    for k, w in enumerate(scn.worlds):
        sensors = {}
        for aid, fl in scn.frames.items():
            f = fl[k]
            sensors[aid] = {
                "t": f.t,
                "points": put(f.cloud.points),
                "image": put(f.image.data),
                "intrinsics": f.image.intrinsics.tolist(),
                "extrinsics": f.image.extrinsics.tolist(),
                "max_depth": f.image.max_depth,
                "lidar_hits": {str(i): n for i, n in f.lidar_hits.items()},
                "pixel_hits": {str(i): n for i, n in f.pixel_hits.items()},
            }
        frames.append({
            "k": w.frame_index,
            "t": w.t,
            "objects": [{"id": o.obj_id, "class": o.class_id, "center": o.center.tolist(), "dims": o.dims.tolist(),
                         "yaw": o.yaw, "velocity": o.velocity.tolist(), "yaw_rate": o.yaw_rate} for o in w.objects],
            "agents": [{"agent_id": a.agent_id, "x": a.x, "y": a.y, "yaw": a.yaw, "speed": a.speed} for a in w.agents],
            "sensors": sensors,
            "gt": [r.track_id for r in scn.gt[k]],
        })
    a0 = scn.worlds[0].agents
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "seed": scn.seed,
        "spec": asdict(scn.spec),
        "classes": list(CLASSES),
        "agents": [{"agent_id": a.agent_id, "kind": a.kind, "rig": _rig_to_dict(a.rig)} for a in a0],
        "sidecar": side.name,
        "frames": frames,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
    side.write_bytes(b"".join(chunks))
    return path, side


def load_scenario(path) -> Scenario:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise ConfigError(f"{path} is not a version-{VERSION} scenario file")
    blob = (path.parent / doc["sidecar"]).read_bytes()

    def get(ref) -> np.ndarray:
        off, shape = ref
        n = int(np.prod(shape))
        return np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)

    spec_d = dict(doc["spec"])
    for key in ("num_objects", "speed", "class_weights", "hidden_speed"):
        spec_d[key] = tuple(spec_d[key])
    spec = ScenarioSpec(**spec_d)
    meta = {a["agent_id"]: a for a in doc["agents"]}
    worlds, gt = [], []
    frames: dict[str, list[AgentFrame]] = {aid: [] for aid in meta}
    for fr in doc["frames"]:
        objs = [ObjectState(o["id"], o["class"], np.array(o["center"]), np.array(o["dims"]), o["yaw"],
                            np.array(o["velocity"]), o["yaw_rate"]) for o in fr["objects"]]
        agents = [AgentState(a["agent_id"], meta[a["agent_id"]]["kind"], a["x"], a["y"], a["yaw"], a["speed"],
                             _rig_from_dict(meta[a["agent_id"]]["rig"])) for a in fr["agents"]]
        w = WorldState(fr["k"], fr["t"], objs, agents)
        worlds.append(w)
        by_id = {o.obj_id: o for o in objs}
        gt.append([object_record(by_id[i]) for i in fr["gt"]])
        for aid, s in fr["sensors"].items():
            img = ImageFrame(get(s["image"]), np.array(s["intrinsics"]), np.array(s["extrinsics"]), s["max_depth"])
            frames[aid].append(AgentFrame(aid, fr["k"], s["t"], PointCloud(get(s["points"])), img,
                                          w.agent(aid).pose, {int(i): n for i, n in s["lidar_hits"].items()},
                                          {int(i): n for i, n in s["pixel_hits"].items()}))
    return Scenario(spec, doc["seed"], worlds, frames, gt)

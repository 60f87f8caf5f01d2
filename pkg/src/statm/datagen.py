"""Deterministic bouncing-sprite videos with exact masks, boxes, and flow.

Objects move at constant velocity with elastic wall reflection and no
inter-object collision response, so trajectories stay analytic and
crossings produce occlusion-and-reappearance events. Higher object
index paints over lower (fixed depth order); masks use label k+1 for
object k, 0 for background. Flow at a pixel is the frame-to-frame
displacement of the object visible there (zero on background).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from statm.errors import ConfigurationError

SHAPES = ("square", "circle", "triangle")

DEFAULT_PALETTE = (
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.15),
    (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.80, 0.15, 0.85),
    (0.10, 0.85, 0.85),
)


@dataclass
class SceneSpec:
    frame_hw: int = 32
    min_objects: int = 2
    max_objects: int = 4
    shapes: Sequence[str] = SHAPES
    min_speed: float = 0.5
    max_speed: float = 2.0
    min_size: float = 3.0
    max_size: float = 6.0
    palette: Sequence[Tuple[float, float, float]] = DEFAULT_PALETTE
    entry_schedule: Sequence[Tuple[int, int]] = ()  # (object index, entry frame)
    occlusion_allowed: bool = True
    frames: int = 12

    def __post_init__(self):
        if self.frame_hw < 4:
            raise ConfigurationError(f"SceneSpec: frame_hw {self.frame_hw} too small")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ConfigurationError("SceneSpec: bad object count range")
        if self.min_speed < 0 or self.max_speed < self.min_speed:
            raise ConfigurationError("SceneSpec: bad speed range")
        if self.min_size < 1 or self.max_size < self.min_size:
            raise ConfigurationError("SceneSpec: bad size range")
        if 2 * self.max_size >= self.frame_hw:
            raise ConfigurationError(
                f"SceneSpec: objects of size {self.max_size} do not fit in "
                f"{self.frame_hw}px frames")
        if self.frames < 1:
            raise ConfigurationError("SceneSpec: frames must be >= 1")
        for obj, frame in self.entry_schedule:
            if not (0 <= frame < self.frames):
                raise ConfigurationError(
                    f"SceneSpec: entry frame {frame} outside video")
            if obj < 0 or obj >= self.max_objects:
                raise ConfigurationError(f"SceneSpec: entry object {obj} out of range")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigurationError(f"SceneSpec: unknown shape '{s}'")


@dataclass
class VideoSample:
    frames: np.ndarray     # (T, H, W, 3) float32 in [0, 1]
    masks: np.ndarray      # (T, H, W) int32, 0 = background
    boxes: np.ndarray      # (K, 4) float32 normalized first-frame boxes
    box_valid: np.ndarray  # (K,) uint8, 0 for objects absent at frame 0
    flow: np.ndarray       # (T, H, W, 2) float32 (dy, dx) per frame


def _silhouette(shape: str, cy: float, cx: float, s: float, hw: int) -> np.ndarray:
    py, px = np.meshgrid(np.arange(hw) + 0.5, np.arange(hw) + 0.5, indexing="ij")
    if shape == "square":
        return (np.abs(py - cy) <= s) & (np.abs(px - cx) <= s)
    if shape == "circle":
        return (py - cy) ** 2 + (px - cx) ** 2 <= s * s
    # upward triangle: apex at (cy - s, cx), base at cy + s
    inside_y = (py >= cy - s) & (py <= cy + s)
    return inside_y & (np.abs(px - cx) <= (py - cy + s) / 2.0)


def _reflect(pos: float, vel: float, lo: float, hi: float) -> Tuple[float, float]:
    pos += vel
    # a slow object cannot cross both walls in one step at valid sizes
    if pos < lo:
        pos = 2 * lo - pos
        vel = -vel
    elif pos > hi:
        pos = 2 * hi - pos
        vel = -vel
    return pos, vel


@dataclass
class _Object:
    shape: str
    color: Tuple[float, float, float]
    size: float
    pos: np.ndarray   # (T+1, 2) (y, x) centers
    entry: int


def _draw_objects(spec: SceneSpec, rng: np.random.Generator) -> List[_Object]:
    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    entry = {obj: fr for obj, fr in spec.entry_schedule}
    hw = spec.frame_hw
    objs: List[_Object] = []
    for i in range(k):
        shape = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
        color = spec.palette[i % len(spec.palette)]
        size = float(rng.uniform(spec.min_size, spec.max_size))
        lo, hi = size, hw - size
        y = float(rng.uniform(lo, hi))
        x = float(rng.uniform(lo, hi))
        speed = float(rng.uniform(spec.min_speed, spec.max_speed))
        ang = float(rng.uniform(0, 2 * np.pi))
        vy, vx = speed * np.sin(ang), speed * np.cos(ang)
        pos = np.zeros((spec.frames + 1, 2))
        pos[0] = (y, x)
        for t in range(spec.frames):
            y, vy = _reflect(y, vy, lo, hi)
            x, vx = _reflect(x, vx, lo, hi)
            pos[t + 1] = (y, x)
        objs.append(_Object(shape, color, size, pos, entry.get(i, 0)))
    return objs


def _trajectories_overlap(objs: List[_Object]) -> bool:
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            d = np.linalg.norm(objs[i].pos - objs[j].pos, axis=-1)
            if np.any(d < objs[i].size + objs[j].size):
                return True
    return False


def _simulate(spec: SceneSpec, rng: np.random.Generator) -> List[_Object]:
    for _ in range(200):
        objs = _draw_objects(spec, rng)
        if spec.occlusion_allowed or not _trajectories_overlap(objs):
            return objs
    raise ConfigurationError(
        "SceneSpec unsatisfiable: cannot place objects without any occlusion")


def render_objects(objs: List[_Object], spec: SceneSpec) -> VideoSample:
    """Rasterize simulated objects (higher index occludes lower)."""
    hw, t_total = spec.frame_hw, spec.frames
    frames = np.zeros((t_total, hw, hw, 3), dtype=np.float32)
    masks = np.zeros((t_total, hw, hw), dtype=np.int32)
    flow = np.zeros((t_total, hw, hw, 2), dtype=np.float32)
    for t in range(t_total):
        for i, o in enumerate(objs):
            if t < o.entry:
                continue
            sil = _silhouette(o.shape, o.pos[t, 0], o.pos[t, 1], o.size, hw)
            frames[t][sil] = o.color
            masks[t][sil] = i + 1
            flow[t][sil] = (o.pos[t + 1] - o.pos[t]).astype(np.float32)
    boxes = np.zeros((len(objs), 4), dtype=np.float32)
    box_valid = np.zeros((len(objs),), dtype=np.uint8)
    for i, o in enumerate(objs):
        if o.entry > 0:
            continue
        sil = _silhouette(o.shape, o.pos[0, 0], o.pos[0, 1], o.size, hw)
        ys, xs = np.nonzero(sil)
        if ys.size == 0:
            continue
        boxes[i] = (xs.min() / hw, ys.min() / hw, (xs.max() + 1) / hw,
                    (ys.max() + 1) / hw)
        box_valid[i] = 1
    return VideoSample(frames, masks, boxes, box_valid, flow)


def generate_video(spec: SceneSpec, seed: int) -> VideoSample:
    """Render one video; identical (spec, seed) gives identical output."""
    rng = np.random.default_rng(seed)
    return render_objects(_simulate(spec, rng), spec)


def generate_dataset(spec: SceneSpec, count: int, seed: int) -> List[VideoSample]:
    """Videos 0..count-1 rendered with seeds seed..seed+count-1."""
    if count < 1:
        raise ConfigurationError(f"generate_dataset: count {count} must be >= 1")
    return [generate_video(spec, seed + i) for i in range(count)]


def dataset_to_entries(videos: Sequence[VideoSample]) -> Dict[str, np.ndarray]:
    """Flatten videos into uniquely named container entries."""
    out: Dict[str, np.ndarray] = {"meta_count": np.array([len(videos)], np.int32)}
    for v, sample in enumerate(videos):
        pre = f"video{v:04d}/"
        out[pre + "frames"] = sample.frames
        out[pre + "masks"] = sample.masks
        out[pre + "boxes"] = sample.boxes
        out[pre + "box_valid"] = sample.box_valid
        out[pre + "flow"] = sample.flow
    return out


def entries_to_dataset(entries: Dict[str, np.ndarray]) -> List[VideoSample]:
    if "meta_count" not in entries:
        raise ConfigurationError("dataset container missing 'meta_count'")
    count = int(entries["meta_count"][0])
    videos = []
    for v in range(count):
        pre = f"video{v:04d}/"
        try:
            videos.append(VideoSample(
                frames=entries[pre + "frames"],
                masks=entries[pre + "masks"],
                boxes=entries[pre + "boxes"],
                box_valid=entries[pre + "box_valid"],
                flow=entries[pre + "flow"],
            ))
        except KeyError as e:
            raise ConfigurationError(f"dataset container missing entry {e}") from None
    return videos

"""Procedural scenes with analytically consistent color, depth and normals.

Scenes are ray cast in camera space (+x right, +y down, +z forward). A
ground plane, an optional back wall and up to six primitives (spheres,
yawed boxes, upright panels) are shaded with a Lambertian model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, MetricDepth, NormalMap, depth_normal_inconsistency

MAGIC = b"OSMP"
VERSION = 1
PRIMITIVES = ("sphere", "box", "plane")
PALETTE = {
    "red": (0.85, 0.2, 0.15),
    "green": (0.2, 0.75, 0.3),
    "blue": (0.2, 0.35, 0.9),
    "yellow": (0.9, 0.8, 0.2),
    "white": (0.9, 0.9, 0.9),
    "purple": (0.6, 0.3, 0.75),
}
MAX_OBJECTS = 6
VOCABULARY = tuple(
    list(PRIMITIVES)
    + [f"count_{i}" for i in range(MAX_OBJECTS + 1)]
    + list(PALETTE)
    + ["wall", "open"]
)
GROUND_ALBEDO = (0.55, 0.5, 0.45)
WALL_ALBEDO = (0.7, 0.72, 0.78)
SKY_TOP = np.array([0.45, 0.65, 0.95])
SKY_HORIZON = np.array([0.85, 0.9, 0.97])
AMBIENT = 0.15


class ContainerError(ValueError):
    pass


@dataclass
class SceneObject:
    primitive: str
    position: tuple[float, float]  # (lateral, forward) of the footprint on the ground, meters
    size: float
    yaw: float
    albedo: str

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if self.albedo not in PALETTE:
            raise ValueError(f"unknown albedo {self.albedo!r}")


@dataclass
class SceneSpec:
    seed: int
    camera_height: float = 1.2
    pitch: float = 0.25
    back_wall: bool = True
    wall_distance: float = 8.0
    objects: list[SceneObject] = field(default_factory=list)
    light: tuple[float, float, float] = (0.3, -1.0, -0.4)
    fov_deg: float = 60.0
    include_ground: bool = True

    def __post_init__(self):
        if not 0 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError(f"object count must be in [0, {MAX_OBJECTS}]")

    @property
    def tags(self) -> list[str]:
        tokens = {obj.primitive for obj in self.objects} | {obj.albedo for obj in self.objects}
        tokens.add(f"count_{len(self.objects)}")
        tokens.add("wall" if self.back_wall else "open")
        return sorted(tokens, key=VOCABULARY.index)

    @classmethod
    def random(cls, seed: int) -> "SceneSpec":
        rng = np.random.default_rng(seed)
        wall = bool(rng.random() < 0.6)
        wall_distance = float(rng.uniform(6.0, 9.0))
        count = int(rng.integers(1, MAX_OBJECTS + 1))
        objects = []
        for _ in range(count):
            forward = float(rng.uniform(2.5, 5.5))
            lateral = float(rng.uniform(-0.4, 0.4) * forward)
            objects.append(
                SceneObject(
                    primitive=str(rng.choice(PRIMITIVES)),
                    position=(lateral, forward),
                    size=float(rng.uniform(0.45, 0.9)),
                    yaw=float(rng.uniform(-np.pi / 3, np.pi / 3)),
                    albedo=str(rng.choice(list(PALETTE))),
                )
            )
        light = np.array([rng.uniform(-0.6, 0.6), -1.0, rng.uniform(-0.8, 0.1)])
        return cls(
            seed=seed,
            camera_height=float(rng.uniform(1.0, 1.6)),
            pitch=float(rng.uniform(0.15, 0.35)),
            back_wall=wall,
            wall_distance=wall_distance,
            objects=objects,
            light=tuple(light / np.linalg.norm(light)),
        )


@dataclass
class Sample:
    color: np.ndarray
    depth: MetricDepth
    normal: NormalMap
    intrinsics: Intrinsics
    tags: list[str]
    # render-time surface labels (0 = sky); not persisted in the container
    surface_id: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.values.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        same = lambda a, b: a.shape == b.shape and np.array_equal(a, b, equal_nan=True)  # noqa: E731
        return (
            same(self.color, other.color)
            and same(self.depth.values, other.depth.values)
            and same(self.depth.valid, other.depth.valid)
            and same(self.normal.vectors, other.normal.vectors)
            and same(self.normal.valid, other.normal.valid)
            and self.intrinsics == other.intrinsics
            and self.tags == other.tags
        )


def _frame(pitch: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World up, horizontal forward and right axes expressed in camera coordinates."""
    c, s = np.cos(pitch), np.sin(pitch)
    up = np.array([0.0, -c, -s])
    forward = np.array([0.0, -s, c])
    right = np.array([1.0, 0.0, 0.0])
    return up, forward, right


def _hit_plane(rays, normal, offset):
    """Rays r (3,N) with r_z = 1 against {X : normal . X = offset}; returns t."""
    denom = normal @ rays
    with np.errstate(divide="ignore", invalid="ignore"):
        t = offset / denom
    t[~np.isfinite(t) | (t <= 1e-6)] = np.inf
    return t


def _hit_sphere(rays, center, radius):
    a = np.sum(rays * rays, axis=0)
    b = -2.0 * (center @ rays)
    c = center @ center - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(rays.shape[1], np.inf)
    ok = disc >= 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - root) / (2 * a)
    t[ok & (t0 > 1e-6)] = t0[ok & (t0 > 1e-6)]
    pts = rays * np.where(np.isfinite(t), t, 0.0)
    normals = (pts - center[:, None]) / radius
    return t, normals


def _hit_box(rays, center, axes, half):
    """Oriented box via the slab method; ``axes`` rows are the box axes."""
    o = -(axes @ center)  # ray origin (camera at 0) in box frame
    d = axes @ rays
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half[:, None] - o[:, None]) / d
        t2 = (half[:, None] - o[:, None]) / d
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    near = tmin.max(axis=0)
    far = tmax.min(axis=0)
    hit = (near <= far) & (near > 1e-6)
    t = np.where(hit, near, np.inf)
    face = tmin.argmax(axis=0)
    sign = -np.sign(d[face, np.arange(rays.shape[1])])
    normals = axes[face].T * sign
    return t, normals, 2 * face + (sign > 0)


def _hit_panel(rays, center, normal, along, up, half_w, half_h):
    t = _hit_plane(rays, normal, float(normal @ center))
    pts = rays * np.where(np.isfinite(t), t, 0.0)
    rel = pts - center[:, None]
    inside = (np.abs(along @ rel) <= half_w) & (np.abs(up @ rel) <= half_h)
    t = np.where(inside, t, np.inf)
    return t, np.repeat(normal[:, None], rays.shape[1], axis=1)


def render(spec: SceneSpec, height: int, width: int) -> Sample:
    """Ray cast ``spec``; values are quantized to float32 to match the container."""
    K = Intrinsics.from_fov(height, width, spec.fov_deg)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)]).reshape(3, -1)
    npix = rays.shape[1]
    up, forward, right = _frame(spec.pitch)
    best_t = np.full(npix, np.inf)
    best_n = np.zeros((3, npix))
    best_albedo = np.zeros((3, npix))
    best_id = np.zeros(npix, dtype=np.int64)

    def consider(t, normals, albedo, surface):
        closer = t < best_t
        best_t[closer] = t[closer]
        best_n[:, closer] = normals[:, closer]
        best_albedo[:, closer] = np.asarray(albedo)[:, None]
        best_id[closer] = surface[closer] if np.ndim(surface) else surface

    if spec.include_ground:
        t = _hit_plane(rays, up, -spec.camera_height)
        consider(t, np.repeat(up[:, None], npix, axis=1), GROUND_ALBEDO, 1)
    if spec.back_wall:
        t = _hit_plane(rays, forward, spec.wall_distance)
        consider(t, np.repeat(-forward[:, None], npix, axis=1), WALL_ALBEDO, 2)
    ground_point = lambda lat, fwd: -spec.camera_height * up + lat * right + fwd * forward  # noqa: E731
    for index, obj in enumerate(spec.objects):
        surface = 10 * (index + 1)
        foot = ground_point(*obj.position)
        cy, sy = np.cos(obj.yaw), np.sin(obj.yaw)
        yaw_right = cy * right + sy * forward
        yaw_forward = -sy * right + cy * forward
        albedo = PALETTE[obj.albedo]
        if obj.primitive == "sphere":
            t, normals = _hit_sphere(rays, foot + obj.size * up, obj.size)
        elif obj.primitive == "box":
            half = np.array([obj.size, 0.6 * obj.size, 0.8 * obj.size])
            axes = np.stack([yaw_right, up, yaw_forward])
            t, normals, face = _hit_box(rays, foot + half[1] * up, axes, half)
            surface = surface + face
        else:
            half_h = 1.2 * obj.size
            t, normals = _hit_panel(rays, foot + half_h * up, yaw_forward, yaw_right, up, obj.size, half_h)
        consider(t, normals, albedo, surface)

    valid = np.isfinite(best_t)
    facing = np.sum(best_n * rays, axis=0) > 0
    best_n[:, facing] *= -1.0
    light = np.asarray(spec.light, dtype=np.float64)
    light = -light / np.linalg.norm(light)  # direction toward the light
    shade = np.maximum(0.0, light @ best_n)
    color = best_albedo * shade + AMBIENT * best_albedo
    rows = (v.reshape(-1) / max(height - 1, 1))[None, :]
    sky = SKY_TOP[:, None] * (1 - rows) + SKY_HORIZON[:, None] * rows
    color = np.where(valid[None, :], color, sky)
    color = np.clip(color, 0.0, 1.0).reshape(3, height, width)
    depth = np.where(valid, best_t, np.nan).reshape(height, width)
    normals = np.where(valid[None, :], best_n, 0.0).reshape(3, height, width)
    valid = valid.reshape(height, width)
    q = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    return Sample(
        color=q(color),
        depth=MetricDepth(q(depth), valid),
        normal=NormalMap(q(normals), valid.copy()),
        intrinsics=K,
        tags=spec.tags,
        surface_id=np.where(valid, best_id.reshape(height, width), 0),
    )


def interior_mask(sample: Sample) -> np.ndarray:
    """Valid pixels whose 3x3 neighbourhood lies on a single smooth surface.

    Requires the render-time ``surface_id`` map (box faces count as separate
    surfaces); image-border pixels are excluded.
    """
    if sample.surface_id is None:
        raise ValueError("interior_mask needs a rendered sample with surface ids")
    ids = sample.surface_id
    h, w = ids.shape
    mask = np.zeros((h, w), dtype=bool)
    core = ids[1:-1, 1:-1]
    same = core > 0
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            same &= ids[1 + dv : h - 1 + dv, 1 + du : w - 1 + du] == core
    mask[1:-1, 1:-1] = same
    return mask & sample.depth.valid


def interior_inconsistency(sample: Sample) -> float:
    """Depth-normal inconsistency of a sample's own ground truth on interior pixels."""
    normals = NormalMap(sample.normal.vectors, sample.normal.valid & interior_mask(sample))
    return depth_normal_inconsistency(sample.depth, normals, sample.intrinsics)[0]


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------


def encode_sample(sample: Sample) -> bytes:
    h, w = sample.shape
    chunks = [MAGIC, struct.pack("<III", VERSION, h, w)]
    chunks.append(sample.color.astype("<f4").tobytes())
    depth = np.where(sample.depth.valid, sample.depth.values, np.nan)
    chunks.append(depth.astype("<f4").tobytes())
    chunks.append(sample.normal.vectors.astype("<f4").tobytes())
    chunks.append(sample.depth.valid.astype(np.uint8).tobytes())
    chunks.append(sample.intrinsics.as_array().astype("<f8").tobytes())
    chunks.append(struct.pack("<I", len(sample.tags)))
    for tag in sample.tags:
        raw = tag.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
    return b"".join(chunks)


def decode_sample(blob: bytes, source: str = "<bytes>") -> Sample:
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise ContainerError(f"{source}: truncated {what} at offset {offset} (need {n} bytes)")
        chunk = blob[offset : offset + n]
        offset += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise ContainerError(f"{source}: bad magic {magic!r} at offset 0, expected {MAGIC.decode()!r}")
    version, h, w = struct.unpack("<III", take(12, "header"))
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported container version {version} at offset 4 (supported: {VERSION})")
    plane = lambda n, what: np.frombuffer(take(4 * n, what), dtype="<f4").astype(np.float64)  # noqa: E731
    color = plane(3 * h * w, "color plane").reshape(3, h, w)
    depth = plane(h * w, "depth plane").reshape(h, w)
    normal = plane(3 * h * w, "normal plane").reshape(3, h, w)
    valid = np.frombuffer(take(h * w, "validity plane"), dtype=np.uint8).reshape(h, w).astype(bool)
    fx, fy, cx, cy = np.frombuffer(take(32, "intrinsics"), dtype="<f8")
    (count,) = struct.unpack("<I", take(4, "tag count"))
    tags = []
    for _ in range(count):
        (length,) = struct.unpack("<I", take(4, "tag length"))
        tags.append(take(length, "tag").decode("utf-8"))
    if offset != len(blob):
        raise ContainerError(f"{source}: {len(blob) - offset} trailing bytes at offset {offset}")
    return Sample(
        color=color,
        depth=MetricDepth(depth, valid),
        normal=NormalMap(normal, valid.copy()),
        intrinsics=Intrinsics(float(fx), float(fy), float(cx), float(cy)),
        tags=tags,
    )


def write_sample(path: str | Path, sample: Sample) -> str:
    """Write ``sample`` and return the SHA-256 of the bytes written."""
    blob = encode_sample(sample)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_sample(path: str | Path) -> Sample:
    return decode_sample(Path(path).read_bytes(), str(path))


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_samples(count: int, seed: int, height: int = 32, width: int = 32) -> list[Sample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [render(SceneSpec.random(scene_seed(seed, i)), height, width) for i in range(count)]


def _render_index(args: tuple[int, int, int, int]) -> Sample:
    seed, index, height, width = args
    return render(SceneSpec.random(scene_seed(seed, index)), height, width)


def generate_dataset(count: int, seed: int, height: int, width: int, out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """Render ``count`` scenes into ``out_dir`` and write ``manifest.jsonl``.

    With ``jobs > 1`` rendering runs in a process pool; output order and bytes
    do not depend on ``jobs``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(seed, i, height, width) for i in range(count)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rendered = list(pool.map(_render_index, tasks))
    else:
        rendered = map(_render_index, tasks)
    manifest = []
    for index, sample in enumerate(rendered):
        name = f"sample_{index:05d}.osmp"
        try:
            digest = write_sample(out / name, sample)
        except OSError as exc:
            raise OSError(f"failed writing sample {index} to {out / name}: {exc}") from exc
        manifest.append({"index": index, "file": name, "tags": sample.tags, "sha256": digest})
    with open(out / "manifest.jsonl", "w") as fh:
        for entry in manifest:
            fh.write(json.dumps(entry) + "\n")
    return manifest


def load_dataset(directory: str | Path) -> list[Sample]:
    directory = Path(directory)
    with open(directory / "manifest.jsonl") as fh:
        entries = [json.loads(line) for line in fh if line.strip()]
    return [read_sample(directory / e["file"]) for e in entries]

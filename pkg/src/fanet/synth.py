"""Deterministic synthetic re-ID benchmark.

Each camera is a scene with its own hue, texture and illumination gain. Each
person is a three-colour sprite (head, torso, legs). A sample composites one
sprite onto one scene with scale/position jitter, records the exact sprite
footprint as the ground-truth mask, then applies the camera gain and pixel
noise to the image alone.
"""

from __future__ import annotations

import colorsys
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imageio import encode_pgm, encode_ppm, read_image

MASK64 = (1 << 64) - 1
TEXTURES = ("stripes", "checker", "gradient", "speckle")
MANIFEST_HEADER = "path\tperson_id\tcamera_id\tsplit\tmask_path"
MAX_JITTER_TRIES = 8
COVERAGE_RANGE = (0.15, 0.60)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *values: int) -> int:
    s = splitmix64(master & MASK64)
    for v in values:
        s = splitmix64(s ^ (v & MASK64))
    return s


@dataclass(frozen=True)
class SceneSpec:
    camera_id: int
    base_hue: float
    texture: str
    gain: float
    noise: float = 0.02

    @classmethod
    def for_camera(cls, camera_id: int, noise: float = 0.02) -> "SceneSpec":
        rng = np.random.default_rng(derive_seed(0x5CE7E, camera_id))
        return cls(
            camera_id=camera_id,
            base_hue=(camera_id * 0.6180339887) % 1.0,
            texture=TEXTURES[camera_id % len(TEXTURES)],
            gain=float(rng.uniform(0.6, 1.4)),
            noise=noise,
        )


@dataclass(frozen=True)
class SpriteSpec:
    person_id: int
    head: tuple[float, float, float]
    torso: tuple[float, float, float]
    legs: tuple[float, float, float]
    aspect: float

    @classmethod
    def for_person(cls, person_id: int) -> "SpriteSpec":
        rng = np.random.default_rng(derive_seed(0x5B817E, person_id))
        skin = colorsys.hsv_to_rgb(rng.uniform(0.02, 0.11), rng.uniform(0.25, 0.6), rng.uniform(0.45, 0.95))

        def cloth():
            return colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.35, 1.0), rng.uniform(0.3, 1.0))

        return cls(person_id, tuple(skin), tuple(cloth()), tuple(cloth()), float(rng.uniform(0.92, 1.08)))


@dataclass
class Sample:
    image: np.ndarray  # [3,H,W] float32 in [0,1]
    person_id: int
    camera_id: int
    gt_mask: np.ndarray  # [1,H,W] float32 in {0,1}
    split: str = "train"


class RenderError(RuntimeError):
    pass


# ---------------------------------------------------------------- rendering


def _background(scene: SceneSpec, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = np.array(colorsys.hsv_to_rgb(scene.base_hue, 0.65, 0.75))
    alt = np.array(colorsys.hsv_to_rgb((scene.base_hue + 0.08) % 1.0, 0.45, 0.45))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if scene.texture == "stripes":
        period = 10.0
        t = ((xx + yy * 0.5 + rng.uniform(0, period)) % period) < period / 2
    elif scene.texture == "checker":
        size = 8
        oy, ox = rng.integers(0, size, 2)
        t = (((yy + oy) // size + (xx + ox) // size) % 2) == 0
    elif scene.texture == "gradient":
        t = np.clip(yy / h + rng.uniform(-0.15, 0.15) + 0.1 * np.sin(xx / w * np.pi), 0, 1)
    else:
        t = rng.random((h, w)) < 0.35
    t = t.astype(np.float64)[None]
    return base[:, None, None] * (1 - t) + alt[:, None, None] * t


def _sprite(sprite: SpriteSpec, h: int, w: int, scale: float, cx: float, cy: float):
    """Rasterize the sprite; returns (colour image, boolean mask) or None if out of frame."""
    sh = scale * h
    a = sprite.aspect
    top = cy - sh / 2
    half_torso = 0.16 * sh * a
    if top < 0 or top + sh > h or cx - half_torso < 0 or cx + half_torso > w:
        return None
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    head_ry, head_rx = 0.07 * sh, 0.065 * sh * a
    head = ((yy - (top + head_ry)) / head_ry) ** 2 + ((xx - cx) / head_rx) ** 2 <= 1.0
    torso = (yy >= top + 0.14 * sh) & (yy < top + 0.52 * sh) & (np.abs(xx - cx) < half_torso)
    leg_w, gap = 0.12 * sh * a, 0.02 * sh * a
    in_legs_y = (yy >= top + 0.52 * sh) & (yy < top + sh)
    left = in_legs_y & (xx >= cx - gap - leg_w) & (xx < cx - gap)
    right = in_legs_y & (xx >= cx + gap) & (xx < cx + gap + leg_w)
    legs = left | right
    img = np.zeros((3, h, w))
    for part, colour in ((legs, sprite.legs), (torso, sprite.torso), (head, sprite.head)):
        img[:, part] = np.asarray(colour)[:, None]
    return img, head | torso | legs


def render_sample(scene: SceneSpec, sprite: SpriteSpec, seed: int, height: int = 128, width: int = 48) -> Sample:
    """Composite ``sprite`` onto ``scene``; a pure function of its arguments."""
    rng = np.random.default_rng(seed)
    bg = _background(scene, height, width, rng)
    for _ in range(MAX_JITTER_TRIES):
        scale = rng.uniform(0.5, 0.9)
        cx = width / 2 + rng.uniform(-0.15, 0.15) * width
        cy = height / 2 + rng.uniform(-0.15, 0.15) * height
        drawn = _sprite(sprite, height, width, scale, cx, cy)
        if drawn is None:
            continue
        colour, mask = drawn
        cover = mask.mean()
        if COVERAGE_RANGE[0] <= cover <= COVERAGE_RANGE[1]:
            break
    else:
        raise RenderError(f"sprite {sprite.person_id} did not fit camera {scene.camera_id} after {MAX_JITTER_TRIES} jitters")
    m = mask[None].astype(np.float64)
    img = bg * (1 - m) + colour * m
    img = img * scene.gain + rng.normal(0.0, scene.noise, img.shape)
    return Sample(
        image=np.clip(img, 0.0, 1.0).astype(np.float32),
        person_id=sprite.person_id,
        camera_id=scene.camera_id,
        gt_mask=m.astype(np.float32),
    )


# ---------------------------------------------------------------- dataset


@dataclass(frozen=True)
class DatasetSpec:
    n_persons: int = 32
    n_cameras: int = 6
    images_per_pair: int = 6
    height: int = 128
    width: int = 48
    seed: int = 0
    n_train_persons: int | None = None
    train_cameras: tuple[int, ...] | None = None
    noise: float = 0.02

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ValueError("need at least two cameras for cross-camera matching")
        if self.n_persons < 2 or self.images_per_pair < 1:
            raise ValueError("need at least two persons and one image per (person, camera)")
        if self.train_cameras is not None:
            cams = set(self.train_cameras)
            if not cams or not cams < set(range(self.n_cameras)):
                raise ValueError(f"train_cameras {self.train_cameras} must be a proper subset of 0..{self.n_cameras - 1}")
            if self.n_cameras - len(cams) < 2:
                raise ValueError("unseen-scene mode needs at least two test cameras")

    @property
    def train_person_count(self) -> int:
        return self.n_train_persons if self.n_train_persons is not None else self.n_persons // 2

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            lines.append(f"{k} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ManifestRow:
    path: str
    person_id: int
    camera_id: int
    split: str
    mask_path: str


def plan_samples(spec: DatasetSpec) -> list[tuple[int, int, int, str]]:
    """(person, camera, index, split) for every sample, in manifest order."""
    n_train = spec.train_person_count
    if not 1 <= n_train < spec.n_persons:
        raise ValueError(f"train persons {n_train} must leave test persons out of {spec.n_persons}")
    all_cams = range(spec.n_cameras)
    train_cams = set(spec.train_cameras) if spec.train_cameras is not None else set(all_cams)
    test_cams = set(all_cams) - train_cams if spec.train_cameras is not None else set(all_cams)
    plan = []
    for pid in range(spec.n_persons):
        is_train = pid < n_train
        for cid in all_cams:
            if cid not in (train_cams if is_train else test_cams):
                continue
            for idx in range(spec.images_per_pair):
                if is_train:
                    split = "train"
                else:
                    split = "query" if idx == 0 else "gallery"
                plan.append((pid, cid, idx, split))
    return plan


def _render_one(args) -> tuple[bytes, bytes]:
    spec, pid, cid, idx = args
    s = render_sample(
        SceneSpec.for_camera(cid, spec.noise),
        SpriteSpec.for_person(pid),
        derive_seed(spec.seed, pid, cid, idx),
        spec.height,
        spec.width,
    )
    return encode_ppm(s.image), encode_pgm(s.gt_mask)


def generate_dataset(spec: DatasetSpec, out_dir: str | os.PathLike, workers: int = 1) -> list[ManifestRow]:
    """Render every sample and write images/, masks/, manifest.tsv and spec.txt."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    plan = plan_samples(spec)
    jobs = [(spec, pid, cid, idx) for pid, cid, idx, _ in plan]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            encoded = list(ex.map(_render_one, jobs, chunksize=16))
    else:
        encoded = [_render_one(j) for j in jobs]

    rows = []
    for (pid, cid, idx, split), (img_bytes, mask_bytes) in zip(plan, encoded):
        stem = f"p{pid:04d}_c{cid:02d}_{idx:03d}"
        rel, mrel = f"images/{stem}.ppm", f"masks/{stem}.pgm"
        (out / rel).write_bytes(img_bytes)
        (out / mrel).write_bytes(mask_bytes)
        rows.append(ManifestRow(rel, pid, cid, split, mrel))
    write_manifest(out / "manifest.tsv", rows)
    (out / "spec.txt").write_text(spec.to_text())
    return rows


def write_manifest(path: str | os.PathLike, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(MANIFEST_HEADER + "\n")
        for r in rows:
            f.write(f"{r.path}\t{r.person_id}\t{r.camera_id}\t{r.split}\t{r.mask_path}\n")


def read_manifest(path: str | os.PathLike) -> list[ManifestRow]:
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header {header!r}")
        rows = []
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            rows.append(ManifestRow(parts[0], int(parts[1]), int(parts[2]), parts[3], parts[4]))
    return rows


@dataclass
class Dataset:
    """A generated benchmark loaded into memory."""

    root: Path
    rows: list[ManifestRow]
    images: np.ndarray  # [N,3,H,W]
    masks: np.ndarray  # [N,1,H,W]
    person_ids: np.ndarray = field(init=False)
    camera_ids: np.ndarray = field(init=False)
    splits: np.ndarray = field(init=False)

    def __post_init__(self):
        self.person_ids = np.array([r.person_id for r in self.rows], dtype=np.int64)
        self.camera_ids = np.array([r.camera_id for r in self.rows], dtype=np.int64)
        self.splits = np.array([r.split for r in self.rows])

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    @property
    def n_cameras(self) -> int:
        return int(self.camera_ids.max()) + 1


def load_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    rows = read_manifest(root / "manifest.tsv")
    images = np.stack([read_image(root / r.path) for r in rows]) if rows else np.zeros((0, 3, 1, 1), np.float32)
    masks = np.stack([read_image(root / r.mask_path) for r in rows]) if rows else np.zeros((0, 1, 1, 1), np.float32)
    return Dataset(root, rows, images, masks)

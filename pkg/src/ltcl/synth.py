"""Synthetic long-tailed image data with cross-class shared visual motifs.

Classes are defined by small motif stamps composited onto noisy backgrounds.
Some motifs are drawn from a pool shared across classes, so a rarely seen
class can still contain patterns that frequent classes exhibit in abundance;
that is the structure patch-level transfer is supposed to exploit. The rest
of the module provides the augmentation pipeline (random resized crop, flip,
brightness/contrast jitter), normalized patch-box sampling, bilinear crop
and resize, and bit-exact dataset persistence.

Everything is a pure function of explicit seeds: per-image generators are
derived from (dataset seed, image index), so serial and parallel generation
produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, SamplingError

# seed-derivation roles, fixed forever for reproducibility
_ROLE_MOTIF = 1
_ROLE_SHARE = 2
_ROLE_IMAGE = 3

_MAGIC = b"LTCL"
_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class PatchBox:
    """Axis-aligned rectangle in normalized image coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        eps = 1e-9
        if self.w <= 0 or self.h <= 0:
            raise ConfigError(f"patch box must have positive extent, got {self}")
        if (
            self.cx - self.w / 2 < -eps
            or self.cy - self.h / 2 < -eps
            or self.cx + self.w / 2 > 1 + eps
            or self.cy + self.h / 2 > 1 + eps
        ):
            raise ConfigError(f"patch box extends outside the unit square: {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2


FULL_BOX = PatchBox(0.5, 0.5, 1.0, 1.0)


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) array by bilinear interpolation of pixel centers."""
    h, w = src.shape[:2]
    src = np.asarray(src, dtype=np.float64)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    return _sample_grid(src, ys, xs)


def _sample_grid(src: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = src.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    wy = fy[:, None, None]
    wx = fx[None, :, None]
    top = src[y0c][:, x0c] * (1 - wx) + src[y0c][:, x1c] * wx
    bot = src[y1c][:, x0c] * (1 - wx) + src[y1c][:, x1c] * wx
    return top * (1 - wy) + bot * wy


def crop_resize(pixels: np.ndarray, box: PatchBox, out_size: int) -> np.ndarray:
    """Bilinear crop of a normalized box, resized to out_size and clamped to [0,1]."""
    src = np.asarray(pixels, dtype=np.float64)
    h, w = src.shape[:2]
    y0, y1 = box.y0 * h, box.y1 * h
    x0, x1 = box.x0 * w, box.x1 * w
    ys = y0 + (np.arange(out_size) + 0.5) * ((y1 - y0) / out_size) - 0.5
    xs = x0 + (np.arange(out_size) + 0.5) * ((x1 - x0) / out_size) - 0.5
    return np.clip(_sample_grid(src, ys, xs), 0.0, 1.0)


def _sample_box(rng: np.random.Generator, scale_range, aspect_range, attempts=100) -> PatchBox:
    lo, hi = scale_range
    a_lo, a_hi = aspect_range
    if not (0 < lo <= hi <= 1):
        raise ConfigError(f"scale range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    for _ in range(attempts):
        area = rng.uniform(lo, hi)
        aspect = np.exp(rng.uniform(np.log(a_lo), np.log(a_hi)))
        bw = float(np.sqrt(area * aspect))
        bh = float(np.sqrt(area / aspect))
        if bw > 1.0 or bh > 1.0:
            continue
        cx = rng.uniform(bw / 2, 1 - bw / 2)
        cy = rng.uniform(bh / 2, 1 - bh / 2)
        return PatchBox(float(cx), float(cy), bw, bh)
    raise SamplingError(
        f"no feasible box after {attempts} attempts for scale={scale_range}, aspect={aspect_range}"
    )


def sample_patch_boxes(
    count: int,
    scale_range=(0.05, 0.6),
    aspect_range=(3 / 4, 4 / 3),
    seed: int | np.random.Generator = 0,
) -> list[PatchBox]:
    """Sample `count` boxes with area inside scale_range, fully contained."""
    if count < 1:
        raise ConfigError(f"need at least one box, got {count}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [_sample_box(rng, scale_range, aspect_range) for _ in range(count)]


# ---------------------------------------------------------------------------
# pattern bank


@dataclass(frozen=True)
class Motif:
    pixels: np.ndarray  # (side, side, 3) in [0, 1]
    alpha: np.ndarray  # (side, side) in [0, 1]


@dataclass(frozen=True)
class PatternBank:
    """Motif stamps plus the class -> motif-id assignment."""

    motifs: tuple[Motif, ...]
    sharing_map: dict[int, tuple[int, ...]]  # class label (1-based) -> motif ids
    num_motifs: int
    num_classes: int
    sharing_degree: int
    motifs_per_class: int
    pool_size: int
    seed: int

    def bank_hash(self) -> str:
        h = hashlib.sha256()
        for m in self.motifs:
            h.update(np.ascontiguousarray(m.pixels, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(m.alpha, dtype=np.float64).tobytes())
        h.update(json.dumps({str(k): list(v) for k, v in sorted(self.sharing_map.items())}).encode())
        return h.hexdigest()

    def head_classes(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_classes // 2 + 1))

    def tail_classes(self) -> tuple[int, ...]:
        return tuple(range(self.num_classes // 2 + 1, self.num_classes + 1))


def expected_pairwise_overlap(num_motifs: int, num_classes: int, sharing_degree: int,
                              motifs_per_class: int = 3) -> float:
    """Mean motif overlap between two classes under independent pool draws."""
    if sharing_degree == 0:
        return 0.0
    d = min(sharing_degree, motifs_per_class)
    pool = num_motifs - num_classes * (motifs_per_class - d)
    return d * d / pool


_MOTIF_SIDE = 8


def _make_motif(rng: np.random.Generator) -> Motif:
    side = _MOTIF_SIDE
    yy, xx = np.mgrid[0:side, 0:side]
    cy, cx = (side - 1) / 2, (side - 1) / 2
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    kind = rng.integers(0, 6)
    if kind == 0:  # disc
        mask = (r <= side * 0.42).astype(float)
    elif kind == 1:  # ring
        mask = ((r <= side * 0.46) & (r >= side * 0.22)).astype(float)
    elif kind == 2:  # cross
        t = side // 4
        mask = ((np.abs(yy - cy) <= t / 1.5) | (np.abs(xx - cx) <= t / 1.5)).astype(float)
    elif kind == 3:  # diagonal stripes
        mask = (((yy + xx) // 2) % 2 == 0).astype(float)
    elif kind == 4:  # frame
        b = 1 + int(rng.integers(0, 2))
        mask = np.zeros((side, side))
        mask[:b], mask[-b:], mask[:, :b], mask[:, -b:] = 1, 1, 1, 1
    else:  # checker
        c = 2
        mask = (((yy // c) + (xx // c)) % 2 == 0).astype(float)
    color = rng.uniform(0.15, 0.95, size=3)
    grain = bilinear_resize(rng.uniform(0.6, 1.0, size=(3, 3, 3)), side, side)
    pixels = np.clip(color[None, None, :] * grain, 0.0, 1.0)
    return Motif(pixels=pixels, alpha=mask)


def build_pattern_bank(
    num_motifs: int,
    num_classes: int,
    sharing_degree: int,
    seed: int,
    motifs_per_class: int = 3,
) -> PatternBank:
    """Build motif stamps and a class assignment with head/tail sharing.

    With sharing_degree >= 1, each class takes `sharing_degree` motifs from a
    common pool and the rest from a private block, and the assignment is
    resampled until every tail class shares at least one pool motif with a
    head class. With sharing_degree == 0 the classes get disjoint motif sets
    (shrunk to fit the bank if necessary).
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")

    if sharing_degree == 0:
        per_class = min(motifs_per_class, num_motifs // num_classes)
        if per_class < 1:
            raise ConfigError(
                f"disjoint assignment infeasible: {num_motifs} motifs for {num_classes} classes"
            )
        sharing_map = {
            k: tuple(range((k - 1) * per_class, k * per_class))
            for k in range(1, num_classes + 1)
        }
        pool_size = 0
    else:
        d = min(sharing_degree, motifs_per_class)
        private_per_class = motifs_per_class - d
        pool_size = num_motifs - num_classes * private_per_class
        if pool_size < d:
            raise ConfigError(
                f"sharing pool of {pool_size} motifs cannot supply {d} picks per class"
            )
        rng = np.random.default_rng(np.random.SeedSequence((seed, _ROLE_SHARE)))
        heads = set(range(1, num_classes // 2 + 1))
        for _ in range(1000):
            picks = {
                k: tuple(sorted(rng.choice(pool_size, size=d, replace=False).tolist()))
                for k in range(1, num_classes + 1)
            }
            head_pool = set().union(*(picks[k] for k in heads))
            if all(set(picks[k]) & head_pool for k in range(1, num_classes + 1) if k not in heads):
                break
        else:
            raise ConfigError("could not satisfy head/tail motif sharing after 1000 draws")
        sharing_map = {}
        for k in range(1, num_classes + 1):
            private = tuple(
                pool_size + (k - 1) * private_per_class + i for i in range(private_per_class)
            )
            sharing_map[k] = picks[k] + private

    motifs = tuple(
        _make_motif(np.random.default_rng(np.random.SeedSequence((seed, _ROLE_MOTIF, i))))
        for i in range(num_motifs)
    )
    return PatternBank(
        motifs=motifs,
        sharing_map=sharing_map,
        num_motifs=num_motifs,
        num_classes=num_classes,
        sharing_degree=sharing_degree,
        motifs_per_class=motifs_per_class,
        pool_size=pool_size,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class DatasetSpec:
    """Class cardinalities and image geometry of a synthetic dataset."""

    class_counts: tuple[int, ...]  # non-increasing, class k has class_counts[k-1]
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    test_per_class: int = 20

    def __post_init__(self):
        if len(self.class_counts) < 2:
            raise ConfigError("need at least two classes")
        if any(c < 1 for c in self.class_counts):
            raise ConfigError(f"class counts must be positive, got {self.class_counts}")
        if any(a < b for a, b in zip(self.class_counts, self.class_counts[1:])):
            raise ConfigError(f"class counts must be non-increasing, got {self.class_counts}")
        if self.channels != 3:
            raise ConfigError("only 3-channel images are supported")
        if self.image_size < 2 + _MOTIF_SIDE:
            raise ConfigError(
                f"image size {self.image_size} too small to place a {_MOTIF_SIDE}-px motif"
            )

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    @property
    def total(self) -> int:
        return sum(self.class_counts)

    @property
    def imbalance_ratio(self) -> float:
        return self.class_counts[0] / self.class_counts[-1]

    @classmethod
    def exponential(
        cls,
        num_classes: int = 20,
        n_max: int = 500,
        imbalance_ratio: int = 100,
        image_size: int = 32,
        seed: int = 0,
        test_per_class: int = 20,
    ) -> "DatasetSpec":
        if n_max % imbalance_ratio != 0:
            raise ConfigError(
                f"n_max={n_max} must be divisible by imbalance_ratio={imbalance_ratio}"
            )
        counts = [
            int(round(n_max * imbalance_ratio ** (-(k - 1) / (num_classes - 1))))
            for k in range(1, num_classes + 1)
        ]
        counts[0] = n_max
        counts[-1] = n_max // imbalance_ratio
        return cls(
            class_counts=tuple(counts),
            image_size=image_size,
            seed=seed,
            test_per_class=test_per_class,
        )


@dataclass(frozen=True)
class SynthImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int  # 1-based class id
    motif_placements: tuple[tuple[int, PatchBox], ...]


def _perlin_background(rng: np.random.Generator, size: int) -> np.ndarray:
    field = np.zeros((size, size))
    for grid, weight in ((4, 0.55), (8, 0.3), (16, 0.15)):
        coarse = rng.uniform(0.0, 1.0, size=(grid, grid, 1))
        field += weight * bilinear_resize(coarse, size, size)[:, :, 0]
    tint = rng.uniform(-0.08, 0.08, size=3)
    img = 0.25 + 0.5 * field[:, :, None] + tint[None, None, :]
    return np.clip(img, 0.0, 1.0)


def _render_image(spec: DatasetSpec, bank: PatternBank, label: int, index: int) -> SynthImage:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, _ROLE_IMAGE, index)))
    size = spec.image_size
    img = _perlin_background(rng, size)
    placements: list[tuple[int, PatchBox]] = []
    for motif_id in bank.sharing_map[label]:
        motif = bank.motifs[motif_id]
        side = int(rng.integers(_MOTIF_SIDE - 1, _MOTIF_SIDE + 4))  # scale jitter 7..11
        if side > size:
            raise ConfigError(f"image size {size} too small for motif side {side}")
        stamp = bilinear_resize(motif.pixels, side, side)
        alpha = bilinear_resize(motif.alpha[:, :, None], side, side)
        best = None
        for _ in range(20):
            y = int(rng.integers(0, size - side + 1))
            x = int(rng.integers(0, size - side + 1))
            box = PatchBox((x + side / 2) / size, (y + side / 2) / size, side / size, side / size)
            worst = max((_box_iou(box, b) for _, b in placements), default=0.0)
            if best is None or worst < best[0]:
                best = (worst, y, x, box)
            if worst < 0.3:
                break
        _, y, x, box = best
        region = img[y:y + side, x:x + side, :]
        img[y:y + side, x:x + side, :] = (1 - alpha) * region + alpha * stamp
        placements.append((motif_id, box))
    img += rng.normal(0.0, 0.02, size=img.shape)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SynthImage(pixels=pixels, label=label, motif_placements=tuple(placements))


def _box_iou(a: PatchBox, b: PatchBox) -> float:
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass
class SynthDataset:
    spec: DatasetSpec
    bank: PatternBank
    train: list[SynthImage] = field(default_factory=list)
    test: list[SynthImage] = field(default_factory=list)

    def train_pixels(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.train])

    def train_labels(self) -> np.ndarray:
        return np.array([im.label for im in self.train], dtype=np.int64)

    def test_pixels(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.test])

    def test_labels(self) -> np.ndarray:
        return np.array([im.label for im in self.test], dtype=np.int64)

    def save(self, out_dir: str | Path) -> None:
        save_dataset(self, out_dir)


def generate_dataset(spec: DatasetSpec, bank: PatternBank, threads: int = 1) -> SynthDataset:
    """Render the full train/test corpus; a pure function of (spec, bank)."""
    if bank.num_classes != spec.num_classes:
        raise ConfigError(
            f"bank has {bank.num_classes} classes but spec has {spec.num_classes}"
        )
    jobs: list[tuple[int, int, bool]] = []  # (label, global index, is_test)
    index = 0
    for k, count in enumerate(spec.class_counts, start=1):
        for i in range(count + spec.test_per_class):
            jobs.append((k, index, i >= count))
            index += 1

    def render(job):
        label, idx, _ = job
        return _render_image(spec, bank, label, idx)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(render, jobs))
    else:
        images = [render(j) for j in jobs]

    ds = SynthDataset(spec=spec, bank=bank)
    for (label, idx, is_test), img in zip(jobs, images):
        (ds.test if is_test else ds.train).append(img)
    return ds


def nearest_centroid_accuracy(dataset: SynthDataset) -> float:
    """Raw-pixel nearest-centroid baseline on the balanced test split."""
    train_x = dataset.train_pixels().reshape(len(dataset.train), -1).astype(np.float64)
    train_y = dataset.train_labels()
    centroids = np.stack([
        train_x[train_y == k].mean(axis=0) for k in range(1, dataset.spec.num_classes + 1)
    ])
    test_x = dataset.test_pixels().reshape(len(dataset.test), -1).astype(np.float64)
    d2 = ((test_x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1) + 1
    return float((pred == dataset.test_labels()).mean())


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_aspect: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    out_size: int = 32

    @classmethod
    def identity(cls, out_size: int) -> "AugmentationPolicy":
        return cls(crop_scale=(1.0, 1.0), crop_aspect=(1.0, 1.0), flip_prob=0.0,
                   brightness=0.0, contrast=0.0, out_size=out_size)


@dataclass(frozen=True)
class AugmentedView:
    pixels: np.ndarray  # (out, out, 3) float64 in [0, 1]
    box: PatchBox
    flipped: bool
    brightness: float
    contrast: float


def _augment_view(pixels: np.ndarray, policy: AugmentationPolicy,
                  rng: np.random.Generator) -> AugmentedView:
    box = _sample_box(rng, policy.crop_scale, policy.crop_aspect)
    out = crop_resize(pixels, box, policy.out_size)
    flipped = bool(rng.random() < policy.flip_prob)
    if flipped:
        out = out[:, ::-1, :].copy()
    fb = float(rng.uniform(1 - policy.brightness, 1 + policy.brightness))
    fc = float(rng.uniform(1 - policy.contrast, 1 + policy.contrast))
    out = out * fb
    mean = out.mean()
    out = mean + (out - mean) * fc
    out = np.clip(out, 0.0, 1.0)
    return AugmentedView(pixels=out, box=box, flipped=flipped, brightness=fb, contrast=fc)


def augment_two_views(image: SynthImage | np.ndarray, policy: AugmentationPolicy,
                      seed) -> tuple[AugmentedView, AugmentedView]:
    """Two independently augmented views of one image, derived from one seed."""
    ss_a, ss_b = np.random.SeedSequence(seed).spawn(2)
    pixels = image.pixels if isinstance(image, SynthImage) else image
    pix = np.asarray(pixels, dtype=np.float64)
    view_a = _augment_view(pix, policy, np.random.default_rng(ss_a))
    view_b = _augment_view(pix, policy, np.random.default_rng(ss_b))
    return view_a, view_b


# ---------------------------------------------------------------------------
# persistence


def write_tensor_file(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.array(_FORMAT_VERSION, dtype="<u2").tobytes())
        fh.write(np.array(arr.ndim, dtype="<u2").tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        fh.write(arr.tobytes())


def read_tensor_file(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise DataFormatError(f"bad magic bytes {magic!r} in {path}")
        version = int(np.frombuffer(fh.read(2), dtype="<u2")[0])
        if version != _FORMAT_VERSION:
            raise DataFormatError(f"unsupported tensor file version {version}")
        ndim = int(np.frombuffer(fh.read(2), dtype="<u2")[0])
        shape = tuple(int(x) for x in np.frombuffer(fh.read(4 * ndim), dtype="<u4"))
        data = np.frombuffer(fh.read(), dtype="<f4")
        if data.size != int(np.prod(shape)):
            raise DataFormatError(f"payload size {data.size} does not match shape {shape}")
        return data.reshape(shape).copy()


def _bank_to_json(bank: PatternBank) -> dict:
    return {
        "num_motifs": bank.num_motifs,
        "num_classes": bank.num_classes,
        "sharing_degree": bank.sharing_degree,
        "motifs_per_class": bank.motifs_per_class,
        "pool_size": bank.pool_size,
        "seed": bank.seed,
        "sharing_map": {str(k): list(v) for k, v in sorted(bank.sharing_map.items())},
        "motifs": [
            {"pixels": m.pixels.tolist(), "alpha": m.alpha.tolist()} for m in bank.motifs
        ],
    }


def _bank_from_json(obj: dict) -> PatternBank:
    motifs = tuple(
        Motif(pixels=np.array(m["pixels"], dtype=np.float64),
              alpha=np.array(m["alpha"], dtype=np.float64))
        for m in obj["motifs"]
    )
    return PatternBank(
        motifs=motifs,
        sharing_map={int(k): tuple(v) for k, v in obj["sharing_map"].items()},
        num_motifs=obj["num_motifs"],
        num_classes=obj["num_classes"],
        sharing_degree=obj["sharing_degree"],
        motifs_per_class=obj["motifs_per_class"],
        pool_size=obj["pool_size"],
        seed=obj["seed"],
    )


def _placements_to_json(images: list[SynthImage]) -> list:
    return [
        [[mid, box.cx, box.cy, box.w, box.h] for mid, box in im.motif_placements]
        for im in images
    ]


def save_dataset(ds: SynthDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": {
            "class_counts": list(ds.spec.class_counts),
            "image_size": ds.spec.image_size,
            "channels": ds.spec.channels,
            "seed": ds.spec.seed,
            "test_per_class": ds.spec.test_per_class,
        },
        "bank_hash": ds.bank.bank_hash(),
        "bank": _bank_to_json(ds.bank),
        "splits": {
            "train": {
                "file": "train.ltcl",
                "labels": [im.label for im in ds.train],
                "placements": _placements_to_json(ds.train),
            },
            "test": {
                "file": "test.ltcl",
                "labels": [im.label for im in ds.test],
                "placements": _placements_to_json(ds.test),
            },
        },
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )
    write_tensor_file(out / "train.ltcl", ds.train_pixels())
    write_tensor_file(out / "test.ltcl", ds.test_pixels())


def load_dataset(in_dir: str | Path) -> SynthDataset:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = DatasetSpec(
        class_counts=tuple(manifest["spec"]["class_counts"]),
        image_size=manifest["spec"]["image_size"],
        channels=manifest["spec"]["channels"],
        seed=manifest["spec"]["seed"],
        test_per_class=manifest["spec"]["test_per_class"],
    )
    bank = _bank_from_json(manifest["bank"])
    if bank.bank_hash() != manifest["bank_hash"]:
        raise DataFormatError("bank hash mismatch in manifest")
    ds = SynthDataset(spec=spec, bank=bank)
    for split_name, target in (("train", ds.train), ("test", ds.test)):
        split = manifest["splits"][split_name]
        pixels = read_tensor_file(root / split["file"])
        if pixels.shape[0] != len(split["labels"]):
            raise DataFormatError(f"{split_name}: labels and pixels disagree")
        for i, label in enumerate(split["labels"]):
            placements = tuple(
                (int(mid), PatchBox(cx, cy, w, h))
                for mid, cx, cy, w, h in split["placements"][i]
            )
            target.append(SynthImage(pixels=pixels[i], label=int(label),
                                     motif_placements=placements))
    return ds

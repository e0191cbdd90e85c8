"""Dataset loading, splitting and the synthetic blob generator.

On-disk contract: 8-bit binary PGM (P5) for images and masks, CSV for
group maps (``name,group_id``) and split files (``name,split``), canonical
JSON for :class:`SplitManifest`. PNG is read through Pillow when installed.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DataError, FormatError, ManifestError

IMAGE_EXTS = (".pgm", ".png")
SPLITS = ("train", "val", "test")
MASK_THRESHOLD = 128


def derive_seed(master: int, stream: str) -> int:
    """Independent 32-bit seed for a named RNG stream (``init``, ``shuffle``, ``synth``...).

    ``SeedSequence(master, spawn_key=(crc32(stream),))`` so streams never
    collide and each stays stable when others are added.
    """
    key = zlib.crc32(stream.encode("utf-8"))
    return int(np.random.SeedSequence(master, spawn_key=(key,)).generate_state(1)[0])


# --- PGM -------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM as a ``uint8`` array of shape (h, w)."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic in (b"P6", b"P3"):
        raise FormatError(f"{path}: colour PNM ({magic.decode()}) is not grayscale")
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        (w, h, maxval), pos = _pgm_tokens(data, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise FormatError(f"{path}: malformed PGM header") from e
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return img


def write_pgm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError(f"write_pgm needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as e:  # pragma: no cover
            raise FormatError(f"{path}: PNG support needs Pillow") from e
        with Image.open(path) as im:
            if im.mode not in ("L", "1"):
                raise FormatError(f"{path}: image mode {im.mode} is not grayscale")
            return np.asarray(im.convert("L"), dtype=np.uint8)
    return read_pgm(path)


def to_uint8_image(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def to_uint8_mask(mask) -> np.ndarray:
    return (np.asarray(mask, dtype=bool) * 255).astype(np.uint8)


# --- samples and datasets ---------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray  # float64 in [0, 1]
    mask: np.ndarray   # uint8 in {0, 1}
    group_id: str
    name: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.shape != self.mask.shape:
            raise DataError(f"{self.name}: image shape {self.image.shape} != mask shape {self.mask.shape}")
        if np.any(self.mask > 1):
            raise DataError(f"{self.name}: mask is not binary")


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.samples]

    def by_name(self) -> dict[str, Sample]:
        return {s.name: s for s in self.samples}

    def subset(self, names) -> "Dataset":
        index = self.by_name()
        missing = [n for n in names if n not in index]
        if missing:
            raise ManifestError(f"unknown sample names: {missing[:5]}")
        return Dataset([index[n] for n in names])

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]) if self.samples else np.zeros((0, 0, 0))

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples]) if self.samples else np.zeros((0, 0, 0), np.uint8)


def read_group_map(path) -> dict[str, str]:
    groups = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[:2] == ["name", "group_id"]:
                continue
            if len(row) < 2:
                raise DataError(f"{path}: group map rows need two columns, got {row}")
            groups[row[0].strip()] = row[1].strip()
    return groups


def write_group_map(path, groups: dict[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("name", "group_id"))
        for name in sorted(groups):
            w.writerow((name, groups[name]))


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


def load_dataset(image_dir, mask_dir, group_map_file=None) -> Dataset:
    """Pair every image with the same-named mask.

    Images are scaled to [0, 1]; masks are foreground where the 8-bit value
    is >= 128. Samples without a group-map entry form their own group.
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    groups = read_group_map(group_map_file) if group_map_file else {}
    samples = []
    for img_path in _image_files(image_dir):
        mask_path = mask_dir / img_path.name
        if not mask_path.is_file():
            raise DataError(f"no mask for image {img_path.name} in {mask_dir}")
        img = read_image(img_path)
        mask = read_image(mask_path)
        if img.shape != mask.shape:
            raise DataError(f"{img_path.name}: image shape {img.shape} != mask shape {mask.shape}")
        name = img_path.stem
        samples.append(Sample(img / 255.0, (mask >= MASK_THRESHOLD).astype(np.uint8), groups.get(name, name), name))
    samples.sort(key=lambda s: s.name)
    return Dataset(samples)


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write ``images/``, ``masks/`` and ``groups.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in dataset:
        write_pgm(out / "images" / f"{s.name}.pgm", to_uint8_image(s.image))
        write_pgm(out / "masks" / f"{s.name}.pgm", to_uint8_mask(s.mask))
    write_group_map(out / "groups.csv", {s.name: s.group_id for s in dataset})


def load_dataset_dir(root) -> Dataset:
    """Load the ``images/`` + ``masks/`` (+ optional ``groups.csv``) layout."""
    root = Path(root)
    groups = root / "groups.csv"
    return load_dataset(root / "images", root / "masks", groups if groups.is_file() else None)


# --- resizing ----------------------------------------------------------------

def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-centre alignment: output centre maps onto the matching input position
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def bilinear(image, target: tuple[int, int]) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    th, tw = target
    if (th, tw) == (h, w):
        return img.copy()
    ys = np.clip(_source_coords(th, h), 0, h - 1)
    xs = np.clip(_source_coords(tw, w), 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def nearest(mask, target: tuple[int, int]) -> np.ndarray:
    m = np.asarray(mask)
    h, w = m.shape
    th, tw = target
    ys = np.minimum(np.floor((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    xs = np.minimum(np.floor((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return m[np.ix_(ys, xs)]


def resize_bilinear(sample: Sample, target: tuple[int, int]) -> Sample:
    """Bilinear image, nearest-neighbour mask (re-binarised)."""
    th, tw = target
    if th < 2 or tw < 2:
        raise DataError(f"resize target must be at least 2x2, got {target}")
    image = np.clip(bilinear(sample.image, target), 0.0, 1.0)
    mask = (nearest(sample.mask, target) > 0).astype(np.uint8)
    return Sample(image, mask, sample.group_id, sample.name)


def resize_dataset(dataset: Dataset, target: tuple[int, int]) -> Dataset:
    return Dataset([resize_bilinear(s, target) for s in dataset])


# --- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class ByFraction:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0


@dataclass(frozen=True)
class ByGroup:
    assignment: dict  # group id -> "train" | "val" | "test"; unlisted groups go to train


@dataclass(frozen=True)
class ByManifest:
    path: str


@dataclass
class SplitManifest:
    splits: dict[str, list[str]]
    policy: dict = field(default_factory=dict)

    def __getitem__(self, key) -> list[str]:
        return self.splits[key]

    def validate(self, dataset: Dataset | None = None) -> None:
        seen = {}
        for split, names in self.splits.items():
            for n in names:
                if n in seen:
                    raise ManifestError(f"sample {n} appears in both {seen[n]} and {split}")
                seen[n] = split
        if dataset is None:
            return
        index = dataset.by_name()
        unknown = [n for n in seen if n not in index]
        if unknown:
            raise ManifestError(f"manifest names unknown samples: {unknown[:5]}")
        if self.policy.get("kind") == "by_group":
            owner = {}
            for n, split in seen.items():
                g = index[n].group_id
                if owner.setdefault(g, split) != split:
                    raise ManifestError(f"group {g} appears in both {owner[g]} and {split}")

    def to_json(self) -> str:
        return json.dumps({"policy": self.policy, "splits": self.splits}, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls({k: list(v) for k, v in d["splits"].items()}, d.get("policy", {}))


def _read_manifest_file(path) -> SplitManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    if path.suffix.lower() == ".json":
        try:
            m = SplitManifest.from_json(path.read_text())
        except (ValueError, KeyError) as e:
            raise ManifestError(f"{path}: invalid manifest JSON: {e}") from e
    else:
        splits = {s: [] for s in SPLITS}
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[:2] == ["name", "split"]:
                    continue
                if len(row) < 2 or row[1].strip() not in SPLITS:
                    raise ManifestError(f"{path}: bad manifest row {row}")
                splits[row[1].strip()].append(row[0].strip())
        m = SplitManifest(splits)
    m.policy = {"kind": "by_manifest", "source": path.name}
    return m


def split(dataset: Dataset, policy) -> SplitManifest:
    names = dataset.names
    if isinstance(policy, ByFraction):
        fr = tuple(float(f) for f in policy.fractions)
        if len(fr) != 3 or any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ValueError(f"fractions must be three non-negative values summing to 1, got {fr}")
        order = np.random.default_rng(policy.seed).permutation(len(names))
        shuffled = [names[i] for i in order]
        n_train = int(round(fr[0] * len(names)))
        n_val = min(int(round(fr[1] * len(names))), len(names) - n_train)
        manifest = SplitManifest(
            {"train": sorted(shuffled[:n_train]),
             "val": sorted(shuffled[n_train:n_train + n_val]),
             "test": sorted(shuffled[n_train + n_val:])},
            {"kind": "by_fraction", "fractions": list(fr), "seed": policy.seed},
        )
    elif isinstance(policy, ByGroup):
        bad = {v for v in policy.assignment.values() if v not in SPLITS}
        if bad:
            raise ValueError(f"group assignments must be one of {SPLITS}, got {sorted(bad)}")
        splits = {s: [] for s in SPLITS}
        for s in dataset:
            splits[policy.assignment.get(s.group_id, "train")].append(s.name)
        manifest = SplitManifest(splits, {"kind": "by_group", "assignment": dict(sorted(policy.assignment.items()))})
    elif isinstance(policy, ByManifest):
        manifest = _read_manifest_file(policy.path)
    else:
        raise TypeError(f"unknown split policy {policy!r}")
    manifest.validate(dataset)
    return manifest


# --- synthetic data ------------------------------------------------------------

@dataclass(frozen=True)
class BlobSpec:
    """Ellipse geometry as fractions of the image side."""

    min_axis: float = 0.08
    max_axis: float = 0.2
    background: float = 0.25
    foreground: tuple[float, float] = (0.6, 0.8)

    def area_bounds(self, size: int, blob_count_range: tuple[int, int]) -> tuple[float, float]:
        """Foreground-fraction bounds, allowing one pixel of rasterisation slack per axis."""
        a_lo, a_hi = self.min_axis * size, self.max_axis * size
        lo = math.pi * max(a_lo - 1, 0) ** 2 / size**2
        hi = blob_count_range[1] * math.pi * (a_hi + 1) ** 2 / size**2
        return lo, min(hi, 1.0)


def _ellipse(size: int, rng: np.random.Generator, spec: BlobSpec) -> np.ndarray:
    a, b = rng.uniform(spec.min_axis * size, spec.max_axis * size, size=2)
    r = max(a, b)
    cy, cx = rng.uniform(r, size - 1 - r, size=2)
    theta = rng.uniform(0, math.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synth_blobs(n_samples: int, size: int = 64, blob_count_range=(1, 3), noise_sigma: float = 0.05,
                seed: int = 0, spec: BlobSpec = BlobSpec(), prefix: str = "synth") -> Dataset:
    """Dark background with brighter random ellipses; mask is their union.

    Gaussian noise of std ``noise_sigma`` is added and the image clipped to
    [0, 1]. Each sample is its own group.
    """
    if size < 4 or size * spec.min_axis < 1:
        raise ValueError(f"size {size} too small for the blob geometry")
    lo, hi = blob_count_range
    rng = np.random.default_rng(seed)
    samples = []
    width = max(4, len(str(max(n_samples - 1, 0))))
    for i in range(n_samples):
        image = np.full((size, size), spec.background)
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(lo, hi + 1))):
            e = _ellipse(size, rng, spec)
            image[e] = rng.uniform(*spec.foreground)
            mask |= e
        if noise_sigma > 0:
            image = image + rng.normal(0.0, noise_sigma, size=image.shape)
        name = f"{prefix}_{i:0{width}d}"
        samples.append(Sample(np.clip(image, 0.0, 1.0), mask.astype(np.uint8), name, name))
    return Dataset(samples)


# --- batching ------------------------------------------------------------------

class Batch(NamedTuple):
    images: np.ndarray   # (n, 1, h, w)
    labels: np.ndarray   # (n, h, w) integer class labels
    names: list


def batch_iter(dataset: Dataset, names=None, batch_size: int = 32, shuffle_seed: int | None = None) -> Iterator[Batch]:
    """Mini-batches over ``names`` (default: all samples); the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    index = dataset.by_name()
    names = list(dataset.names if names is None else names)
    if shuffle_seed is not None:
        names = [names[i] for i in np.random.default_rng(shuffle_seed).permutation(len(names))]
    for start in range(0, len(names), batch_size):
        chunk = [index[n] for n in names[start:start + batch_size]]
        yield Batch(
            np.stack([s.image for s in chunk])[:, None],
            np.stack([s.mask for s in chunk]).astype(np.intp),
            [s.name for s in chunk],
        )

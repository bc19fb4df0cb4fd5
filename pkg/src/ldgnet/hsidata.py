"""Hyperspectral scenes: containers, file I/O, patches, augmentation, splits
and a synthetic cross-scene generator."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CUBE_MAGIC = b"HSIC1\n"
LABEL_MAGIC = b"HSIL1\n"


class FormatError(ValueError):
    """Malformed HSIC1/HSIL1 file."""


@dataclass(frozen=True)
class HsiCube:
    """Reflectance cube stored band-sequential: ``values`` has shape (d, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"cube must be (d, H, W) with every extent >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cube values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LabelRaster:
    """Per-pixel class ids, 0 = unlabeled."""

    ids: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.ids)
        if a.ndim != 2:
            raise ValueError("label raster must be 2-d")
        if a.size and (a.min() < 0 or a.max() > 65535):
            raise ValueError("label ids must fit in an unsigned 16-bit integer")
        a = a.astype(np.int64)
        a.setflags(write=False)
        object.__setattr__(self, "ids", a)

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.ids.max()) if self.ids.size else 0

    def labeled_coords(self) -> np.ndarray:
        """(n, 2) array of (row, col) for labeled pixels, row-major order."""
        return np.argwhere(self.ids > 0)


@dataclass(frozen=True)
class DomainPair:
    source: tuple[HsiCube, LabelRaster]
    target: tuple[HsiCube, LabelRaster]
    num_classes: int

    def __post_init__(self):
        for cube, labels in (self.source, self.target):
            check_pair(cube, labels, self.num_classes)
        if self.source[0].bands != self.target[0].bands:
            raise ValueError("source and target must have the same band count")


@dataclass(frozen=True)
class Patch:
    values: np.ndarray  # (d, s, s)
    label: int

    @property
    def size(self) -> int:
        return self.values.shape[1]


def check_pair(cube: HsiCube, labels: LabelRaster, num_classes: int | None = None) -> None:
    if (cube.height, cube.width) != (labels.height, labels.width):
        raise ValueError(
            f"labels {labels.ids.shape} do not match cube {cube.height}x{cube.width}"
        )
    if num_classes is not None and labels.num_classes > num_classes:
        raise ValueError(f"label id {labels.num_classes} exceeds class count {num_classes}")


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _split_header(raw: bytes, magic: bytes) -> tuple[dict, bytes]:
    if not raw.startswith(magic):
        raise FormatError(f"bad magic: expected {magic!r}")
    rest = raw[len(magic):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad header: {e}") from e
    return header, rest[nl + 1:]


def encode_cube(cube: HsiCube) -> bytes:
    header = {"h": cube.height, "w": cube.width, "d": cube.bands, "dtype": "f32", "layout": "bsq"}
    line = json.dumps(header, separators=(",", ":")).encode()
    return CUBE_MAGIC + line + b"\n" + cube.values.astype("<f4").tobytes()


def decode_cube(raw: bytes) -> HsiCube:
    header, payload = _split_header(raw, CUBE_MAGIC)
    try:
        h, w, d = int(header["h"]), int(header["w"]), int(header["d"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"header missing dimensions: {header}") from e
    if header.get("dtype", "f32") != "f32" or header.get("layout", "bsq") != "bsq":
        raise FormatError("only f32 band-sequential cubes are supported")
    want = h * w * d * 4
    if len(payload) < want:
        raise FormatError(f"truncated payload: {len(payload)} bytes, header needs {want}")
    if len(payload) > want:
        raise FormatError(f"payload has {len(payload) - want} trailing bytes")
    vals = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    return HsiCube(vals.astype(np.float64))


def save_cube(cube: HsiCube, path) -> None:
    atomic_write_bytes(path, encode_cube(cube))


def load_cube(path) -> HsiCube:
    return decode_cube(Path(path).read_bytes())


def encode_labels(labels: LabelRaster) -> bytes:
    line = json.dumps({"h": labels.height, "w": labels.width}, separators=(",", ":")).encode()
    return LABEL_MAGIC + line + b"\n" + labels.ids.astype("<u2").tobytes()


def decode_labels(raw: bytes) -> LabelRaster:
    header, payload = _split_header(raw, LABEL_MAGIC)
    try:
        h, w = int(header["h"]), int(header["w"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"header missing dimensions: {header}") from e
    want = h * w * 2
    if len(payload) != want:
        raise FormatError(f"label payload is {len(payload)} bytes, header needs {want}")
    return LabelRaster(np.frombuffer(payload, dtype="<u2").reshape(h, w))


def save_labels(labels: LabelRaster, path) -> None:
    atomic_write_bytes(path, encode_labels(labels))


def load_labels(path) -> LabelRaster:
    return decode_labels(Path(path).read_bytes())


PAIR_FILES = {
    "source": ("source.hsic", "source.hsil"),
    "target": ("target.hsic", "target.hsil"),
}


def save_pair(pair: DomainPair, directory) -> None:
    directory = Path(directory)
    for side, (cname, lname) in PAIR_FILES.items():
        cube, labels = getattr(pair, side)
        save_cube(cube, directory / cname)
        save_labels(labels, directory / lname)


def load_pair(directory, num_classes: int | None = None) -> DomainPair:
    directory = Path(directory)
    sides = {}
    for side, (cname, lname) in PAIR_FILES.items():
        sides[side] = (load_cube(directory / cname), load_labels(directory / lname))
    if num_classes is None:
        num_classes = max(sides["source"][1].num_classes, sides["target"][1].num_classes)
    return DomainPair(sides["source"], sides["target"], num_classes)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def normalize(cube: HsiCube) -> HsiCube:
    """Scale each band independently to [0, 1]; constant bands become 0."""
    v = cube.values
    lo = v.min(axis=(1, 2), keepdims=True)
    span = v.max(axis=(1, 2), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return HsiCube(np.where(span > 0, (v - lo) / safe, 0.0))


def mirror_indices(center: int, s: int, n: int) -> np.ndarray:
    """Indices of a length-``s`` window centred at ``center`` on an axis of
    length ``n``, reflected about the borders (edge sample not repeated)."""
    return _reflect(np.arange(center - s // 2, center + s // 2 + 1), n)


def _gather(values: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """The single raster accessor: rows/cols are (..., s) index windows and the
    result is (d, ..., s, s)."""
    return values[:, rows[..., :, None], cols[..., None, :]]


def extract_patch(cube: HsiCube, row: int, col: int, s: int, labels: LabelRaster | None = None) -> Patch:
    if s < 1 or s % 2 == 0:
        raise ValueError(f"patch size must be odd, got {s}")
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise IndexError(f"pixel ({row}, {col}) outside {cube.height}x{cube.width} raster")
    rows = mirror_indices(row, s, cube.height)
    cols = mirror_indices(col, s, cube.width)
    label = int(labels.ids[row, col]) if labels is not None else 0
    return Patch(_gather(cube.values, rows, cols), label)


def extract_patches(cube: HsiCube, coords: np.ndarray, s: int) -> np.ndarray:
    """Stack of patches for an (n, 2) coordinate array -> (n, d, s, s)."""
    if s < 1 or s % 2 == 0:
        raise ValueError(f"patch size must be odd, got {s}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) == 0:
        return np.zeros((0, cube.bands, s, s))
    off = np.arange(s) - s // 2
    rows = _reflect(coords[:, :1] + off, cube.height)
    cols = _reflect(coords[:, 1:] + off, cube.width)
    return np.moveaxis(_gather(cube.values, rows, cols), 0, 1)


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def augment_patch(patch: Patch, rng) -> Patch:
    """Random horizontal/vertical flips, a global gain in [0.9, 1.1] and
    per-value additive noise in [-0.02, 0.02]."""
    v = patch.values
    if rng.random() < 0.5:
        v = v[:, :, ::-1]
    if rng.random() < 0.5:
        v = v[:, ::-1, :]
    gain = rng.uniform(0.9, 1.1)
    noise = rng.uniform(-0.02, 0.02, size=v.shape)
    return Patch(v * gain + noise, patch.label)


def augment_batch(patches: np.ndarray, rng) -> np.ndarray:
    """Vectorised augmentation of an (n, d, s, s) stack, one draw set per patch."""
    out = np.empty_like(patches)
    for i in range(len(patches)):
        out[i] = augment_patch(Patch(patches[i], 0), rng).values
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split_train_val(labels: LabelRaster, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split of labeled pixels into flat-index train/val sets.

    Each class keeps round(fraction * n_c) pixels for training, clamped so both
    sides receive at least one pixel.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    flat = labels.ids.ravel()
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(flat[flat > 0]):
        members = np.flatnonzero(flat == c)
        if len(members) < 2:
            raise ValueError(f"class {c} has fewer than 2 labeled pixels")
        n_train = int(np.floor(fraction * len(members) + 0.5))
        n_train = min(max(n_train, 1), len(members) - 1)
        perm = rng.permutation(members)
        train.append(perm[:n_train])
        val.append(perm[n_train:])
    if not train:
        raise ValueError("no labeled pixels to split")
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


# ---------------------------------------------------------------------------
# synthetic cross-scene generator
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Parameters of a synthetic source/target scene pair.

    Shift parameters are per band (scalars broadcast).  The target scene uses
    the same class mean spectra as the source, then every value is mapped
    through ``gain * v + offset + nonlinearity * v**2``.
    """

    classes: int = 5
    bands: int = 16
    source_hw: tuple[int, int] = (48, 48)
    target_hw: tuple[int, int] = (48, 48)
    class_means: np.ndarray | None = None
    cov_scale: float = 0.05
    gain: float | np.ndarray = 1.1
    offset: float | np.ndarray = 0.1
    nonlinearity: float | np.ndarray = 0.05
    blobs: int = 12
    border: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 1 or self.bands < 1:
            raise ValueError("classes and bands must be >= 1")
        for hw in (self.source_hw, self.target_hw):
            if len(hw) != 2 or min(hw) < 1:
                raise ValueError(f"bad scene size {hw}")
        if self.cov_scale <= 0:
            raise ValueError("cov_scale must be positive")
        if np.any(np.asarray(self.gain) <= 0):
            raise ValueError("gain must be positive")
        if self.blobs < self.classes:
            raise ValueError("need at least one blob per class")
        if self.class_means is not None:
            if np.shape(self.class_means) != (self.classes, self.bands):
                raise ValueError("class_means must be (classes, bands)")
        for name in ("gain", "offset", "nonlinearity"):
            shape = np.shape(getattr(self, name))
            if shape not in ((), (self.bands,)):
                raise ValueError(f"{name} must be a scalar or have one value per band")

    def to_json(self) -> dict:
        def plain(v):
            return np.asarray(v).tolist() if v is not None else None

        return {
            "classes": self.classes,
            "bands": self.bands,
            "source_hw": list(self.source_hw),
            "target_hw": list(self.target_hw),
            "class_means": plain(self.class_means),
            "cov_scale": self.cov_scale,
            "gain": plain(self.gain),
            "offset": plain(self.offset),
            "nonlinearity": plain(self.nonlinearity),
            "blobs": self.blobs,
            "border": self.border,
            "seed": self.seed,
        }


def smooth_class_means(classes: int, bands: int, rng: np.random.Generator) -> np.ndarray:
    """Plausible reflectance curves: a baseline plus a few Gaussian bumps."""
    grid = np.linspace(0.0, 1.0, bands)
    means = np.empty((classes, bands))
    for c in range(classes):
        curve = np.full(bands, rng.uniform(0.2, 0.4))
        for _ in range(3):
            centre = rng.uniform(0.0, 1.0)
            width = rng.uniform(0.08, 0.3)
            curve += rng.uniform(-0.2, 0.35) * np.exp(-0.5 * ((grid - centre) / width) ** 2)
        means[c] = np.clip(curve, 0.05, 0.95)
    return means


def _blob_layout(hw, classes, blobs, border, rng) -> tuple[np.ndarray, np.ndarray]:
    """Voronoi blobs: returns (class map 1..C over every pixel, label map with
    blob borders left unlabeled)."""
    h, w = hw
    seeds = np.column_stack([rng.uniform(0, h, blobs), rng.uniform(0, w, blobs)])
    blob_class = np.concatenate([rng.permutation(classes), rng.integers(0, classes, blobs - classes)])
    rr, cc = np.mgrid[0:h, 0:w]
    pts = np.stack([rr.ravel() + 0.5, cc.ravel() + 0.5], axis=1)
    dist = np.sqrt(((pts[:, None, :] - seeds[None, :, :]) ** 2).sum(-1))
    order = np.argsort(dist, axis=1, kind="stable")
    nearest = order[:, 0]
    cls = blob_class[nearest] + 1
    if blobs > 1 and border > 0:
        gap = np.take_along_axis(dist, order[:, 1:2], 1)[:, 0] - np.take_along_axis(dist, order[:, :1], 1)[:, 0]
        labels = np.where(gap < border, 0, cls)
    else:
        labels = cls
    return cls.reshape(h, w), labels.reshape(h, w)


def shift_values(values: np.ndarray, gain, offset, nonlinearity) -> np.ndarray:
    """Per-band map v -> gain*v + offset + nonlinearity*v**2 on a (d, H, W) array."""
    d = values.shape[0]

    def band(p):
        return np.broadcast_to(np.asarray(p, dtype=np.float64), (d,)).reshape(d, 1, 1)

    return band(gain) * values + band(offset) + band(nonlinearity) * values**2


def _render_scene(hw, means, spec, rng, shift: bool):
    cls_map, labels = _blob_layout(hw, spec.classes, spec.blobs, spec.border, rng)
    mu = means[cls_map - 1]  # H, W, d
    vals = mu + spec.cov_scale * rng.standard_normal(mu.shape)
    vals = np.moveaxis(vals, -1, 0)
    if shift:
        vals = shift_values(vals, spec.gain, spec.offset, spec.nonlinearity)
    # quantise to the storage precision so in-memory and on-disk scenes agree
    return HsiCube(vals.astype(np.float32).astype(np.float64)), LabelRaster(labels)


def generate_synthetic_pair(spec: SynthSpec) -> DomainPair:
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    mean_rng, src_rng, tgt_rng = (np.random.default_rng(s) for s in root.spawn(3))
    if spec.class_means is None:
        means = smooth_class_means(spec.classes, spec.bands, mean_rng)
    else:
        means = np.asarray(spec.class_means, dtype=np.float64)
    source = _render_scene(spec.source_hw, means, spec, src_rng, shift=False)
    target = _render_scene(spec.target_hw, means, spec, tgt_rng, shift=True)
    return DomainPair(source, target, spec.classes)

"""Paired (intensity crop, complex target) samples, their container file and splits.

Container layout (little-endian)::

    magic  b"SPR1"
    u16    version        1 -> 128 x 128 arrays, 2 -> extents stored below
    u32    sample count
    [v2]   u16 input extent, u16 target extent
    per sample:
        u16 id length, UTF-8 id, u8 encoding tag,
        float32 input[k, k], float32 target_re[s, s], float32 target_im[s, s]

Synthesis settings and per-sample exposure factors live in a JSON sidecar
``<file>.json`` so the full-frame measurement can be regenerated later.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import optics
from .optics import ComplexField, IntensityMeasurement

MAGIC = b"SPR1"
VERSION_FIXED = 1
VERSION_SIZED = 2
FIXED_EXTENT = 128

ENCODINGS = ("phase-only", "magnitude-phase")
_TAG = {name: i for i, name in enumerate(ENCODINGS)}

RASTER_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
RAW_SUFFIXES = (".f32", ".raw")
LUMA_601 = (0.299, 0.587, 0.114)


class DatasetFormatError(ValueError):
    """Malformed, truncated or incompatible container file."""


@dataclass(frozen=True)
class SourceImage:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError("source image must be a nonempty 2-D array")
        if not np.isfinite(v).all() or v.min() < 0 or v.max() > 1:
            raise ValueError("source values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def extent(self) -> int:
        return self.values.shape[0]


@dataclass
class Sample:
    id: str
    input: np.ndarray
    target_re: np.ndarray
    target_im: np.ndarray
    encoding: str = "phase-only"

    def __post_init__(self):
        if self.encoding not in _TAG:
            raise ValueError(f"unknown encoding {self.encoding!r}")
        self.input = np.asarray(self.input, dtype=np.float32)
        self.target_re = np.asarray(self.target_re, dtype=np.float32)
        self.target_im = np.asarray(self.target_im, dtype=np.float32)
        if self.target_re.shape != self.target_im.shape:
            raise ValueError("target_re and target_im differ in shape")

    @property
    def target(self) -> np.ndarray:
        return self.target_re.astype(np.float64) + 1j * self.target_im.astype(np.float64)


@dataclass
class FoldPlan:
    K: int
    train: list[list[str]]
    test: list[list[str]]


@dataclass
class SynthesisConfig:
    """Forward-model settings shared by every sample of a dataset.

    ``defocus_distance == 0`` disables defocus (identity kernel).
    ``scale=None`` picks the per-sample automatic exposure.
    """

    encoding: str = "phase-only"
    object_extent: int = 128
    dft_size: int = 762
    crop: int = 128
    cap: int = optics.CAP_12BIT
    defocus_distance: float = 30e-3
    wavelength: float = optics.WAVELENGTH_HENE
    pitch: float = optics.SLM_PITCH
    curvature: float = 1.0
    coords: str = "physical"
    scale: float | None = None

    def __post_init__(self):
        if self.encoding not in _TAG:
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.dft_size < 2 * self.object_extent:
            raise optics.OversamplingError(
                f"dft_size {self.dft_size} < 2 x object extent {self.object_extent}")
        if self.crop > self.dft_size or (self.dft_size - self.crop) % 2:
            raise ValueError("crop must not exceed dft_size and must share its parity")
        if self.defocus_distance < 0:
            raise ValueError("defocus distance must be >= 0")

    def kernel(self) -> optics.DefocusKernel:
        if self.defocus_distance == 0:
            return optics.identity_kernel(self.object_extent)
        return optics.defocus_kernel(self.wavelength, self.defocus_distance, self.pitch,
                                     self.curvature, self.object_extent, self.coords)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SynthesisConfig:
        return cls(**d)


DESK_SYNTHESIS = dict(object_extent=32, dft_size=192, crop=32)


# -- ingestion and preprocessing ---------------------------------------------

def load_raster(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG/PGM raster or a raw float32 dump with a ``<file>.shape`` sidecar.

    Integer rasters are scaled by their dtype maximum; raw dumps are returned
    as is.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix in RAW_SUFFIXES:
            side = Path(str(path) + ".shape")
            h, w = (int(t) for t in side.read_text().split()[:2])
            data = np.fromfile(path, dtype="<f4")
            if data.size != h * w:
                raise DatasetFormatError(f"{path}: {data.size} values, sidecar says {h}x{w}")
            return data.reshape(h, w).astype(np.float64)
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except (OSError, ValueError) as e:
        if isinstance(e, DatasetFormatError):
            raise
        raise DatasetFormatError(f"unreadable raster {path}: {e}") from e
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float64) / np.iinfo(arr.dtype).max
    if arr.dtype == bool:
        return arr.astype(np.float64)
    return arr.astype(np.float64)


def preprocess(raw: np.ndarray, extent: int = FIXED_EXTENT) -> SourceImage:
    """Luminance, bilinear resize to ``extent`` x ``extent`` and clamp to [0, 1].

    Integer input is scaled by its dtype maximum (so 8-bit 255 becomes 1.0);
    float input is taken to be in [0, 1] already.
    """
    a = np.asarray(raw)
    if a.size == 0 or a.ndim not in (2, 3):
        raise ValueError(f"expected a nonempty 2-D or 3-D raster, got shape {a.shape}")
    if np.issubdtype(a.dtype, np.integer):
        a = a.astype(np.float64) / np.iinfo(a.dtype).max
    else:
        a = a.astype(np.float64)
    if a.ndim == 3:
        a = a[..., :3] @ np.array(LUMA_601) if a.shape[2] >= 3 else a[..., 0]
    if a.shape != (extent, extent):
        im = Image.fromarray(a.astype(np.float32), mode="F")
        a = np.asarray(im.resize((extent, extent), Image.BILINEAR), dtype=np.float64)
    return SourceImage(np.clip(a, 0.0, 1.0))


def load_sources(directory: str | os.PathLike, extent: int = FIXED_EXTENT) -> list[tuple[str, SourceImage]]:
    """All rasters in ``directory`` (sorted by name) as ``(id, SourceImage)``."""
    d = Path(directory)
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in RASTER_SUFFIXES + RAW_SUFFIXES)
    return [(p.stem, preprocess(load_raster(p), extent)) for p in files]


# -- synthetic corpus ---------------------------------------------------------

def _gaussian_blur(a: np.ndarray, sigma: float) -> np.ndarray:
    r = max(1, int(3 * sigma))
    t = np.arange(-r, r + 1)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    a = np.apply_along_axis(np.convolve, 0, np.pad(a, ((r, r), (0, 0)), mode="edge"), g, "valid")
    return np.apply_along_axis(np.convolve, 1, np.pad(a, ((0, 0), (r, r)), mode="edge"), g, "valid")


def _convex_polygon(n: int, rng: np.random.Generator) -> np.ndarray:
    c = rng.uniform(0.25, 0.75, 2) * n
    radius = rng.uniform(0.12, 0.3) * n
    m = int(rng.integers(3, 7))
    # jittered but evenly spread angles keep the polygon from degenerating
    angles = (np.arange(m) + rng.uniform(-0.3, 0.3, m)) * (2 * np.pi / m) + rng.uniform(0, 2 * np.pi)
    verts = c + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    neg = np.ones((n, n), dtype=bool)
    pos = np.ones((n, n), dtype=bool)
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        cross = (b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])
        neg &= cross <= 0
        pos &= cross >= 0
    return (neg | pos).astype(np.float64)


def synthetic_source(extent: int, rng: np.random.Generator) -> SourceImage:
    """Soft-edged convex polygons shaded by smooth blobs on a zero background.

    Objects on a flat background keep most pixels away from the phase value
    pi, where the linear phase metrics wrap.
    """
    n = extent
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.zeros((n, n))
    for _ in range(rng.integers(1, 4)):
        img = np.maximum(img, rng.uniform(0.2, 1.0) * _convex_polygon(n, rng))
    inside = img > 0
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(0.2 * n, 0.8 * n, 2)
        s = rng.uniform(0.06, 0.15) * n
        img += rng.uniform(-0.3, 0.3) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s)) * inside
    img = _gaussian_blur(img, max(0.5, n / 64))
    return SourceImage(np.clip(img, 0.0, 1.0))


def synthetic_corpus(n: int, extent: int = FIXED_EXTENT, seed: int = 0) -> list[tuple[str, SourceImage]]:
    return [(f"syn-{i:05d}", synthetic_source(extent, np.random.default_rng([seed, i])))
            for i in range(n)]


# -- encodings and synthesis -------------------------------------------------

def _check_unit(s: SourceImage | np.ndarray) -> np.ndarray:
    v = s.values if isinstance(s, SourceImage) else np.asarray(s, dtype=np.float64)
    if v.size and (v.min() < 0 or v.max() > 1):
        raise ValueError("encoding input must lie in [0, 1]")
    return v


def encode_phase_only(s: SourceImage | np.ndarray) -> ComplexField:
    return ComplexField(np.exp(2j * np.pi * _check_unit(s)))


def encode_magnitude_phase(s: SourceImage | np.ndarray) -> ComplexField:
    v = _check_unit(s)
    return ComplexField(v * np.exp(2j * np.pi * v))


def encode(s: SourceImage | np.ndarray, encoding: str) -> ComplexField:
    if encoding == "phase-only":
        return encode_phase_only(s)
    if encoding == "magnitude-phase":
        return encode_magnitude_phase(s)
    raise ValueError(f"unknown encoding {encoding!r}")


def _as_stored(x: ComplexField) -> ComplexField:
    # round to float32 first so re-simulating the stored target is exact
    return ComplexField.from_parts(x.re.astype(np.float32), x.im.astype(np.float32))


def full_measurement(target: ComplexField | np.ndarray, cfg: SynthesisConfig,
                     scale: float | None = None) -> IntensityMeasurement:
    """Uncropped N x N quantised frame for an (undefocused) target."""
    x = target if isinstance(target, ComplexField) else ComplexField(target)
    k = cfg.kernel()
    I = optics.oversampled_intensity(optics.apply_defocus(x, k), cfg.dft_size)
    return optics.quantize_saturate(
        I, cap=cfg.cap, scale=cfg.scale if scale is None else scale,
        object_extent=cfg.object_extent, dft_size=cfg.dft_size, crop_extent=cfg.crop,
        defocus=None if cfg.defocus_distance == 0 else k.params())


def synthesize_sample(s: SourceImage, cfg: SynthesisConfig, id: str = "sample") -> tuple[Sample, float]:
    """One sample plus the exposure factor used for it."""
    if s.extent != cfg.object_extent:
        raise ValueError(f"source extent {s.extent} != object extent {cfg.object_extent}")
    target = _as_stored(encode(s, cfg.encoding))
    m = full_measurement(target, cfg)
    crop = optics.center_crop(m, cfg.crop).astype(np.float32)
    return Sample(id, crop, target.re, target.im, cfg.encoding), m.scale


@dataclass
class Dataset:
    samples: list[Sample]
    config: SynthesisConfig | None = None
    scales: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self, ids: Iterable[str]) -> list[Sample]:
        lookup = {s.id: s for s in self.samples}
        return [lookup[i] for i in ids]

    def measurement(self, sample: Sample) -> IntensityMeasurement:
        """Regenerate the full-frame measurement of ``sample``."""
        if self.config is None or sample.id not in self.scales:
            raise DatasetFormatError(f"no synthesis metadata for sample {sample.id!r}")
        return full_measurement(ComplexField(sample.target), self.config, self.scales[sample.id])


def build_dataset(sources: Sequence[tuple[str, SourceImage]], cfg: SynthesisConfig) -> Dataset:
    samples, scales = [], {}
    for sid, src in sources:
        sample, scale = synthesize_sample(src, cfg, sid)
        samples.append(sample)
        scales[sid] = scale
    return Dataset(samples, cfg, scales)


# -- container format --------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return Path(str(path) + ".json")


def write_dataset(data: Dataset | Sequence[Sample], path: str | os.PathLike) -> None:
    """Write the container and, when metadata is present, its JSON sidecar."""
    ds = data if isinstance(data, Dataset) else Dataset(list(data))
    path = Path(path)
    samples = ds.samples
    k_shapes = {s.input.shape for s in samples}
    t_shapes = {s.target_re.shape for s in samples}
    if len(k_shapes) > 1 or len(t_shapes) > 1:
        raise ValueError("all samples in one file must share extents")
    k = next(iter(k_shapes), (FIXED_EXTENT, FIXED_EXTENT))
    t = next(iter(t_shapes), (FIXED_EXTENT, FIXED_EXTENT))
    if k[0] != k[1] or t[0] != t[1]:
        raise ValueError("samples must be square")
    fixed = k[0] == FIXED_EXTENT and t[0] == FIXED_EXTENT
    parts = [MAGIC, struct.pack("<HI", VERSION_FIXED if fixed else VERSION_SIZED, len(samples))]
    if not fixed:
        parts.append(struct.pack("<HH", k[0], t[0]))
    for s in samples:
        sid = s.id.encode("utf-8")
        parts.append(struct.pack("<H", len(sid)) + sid + struct.pack("<B", _TAG[s.encoding]))
        for arr in (s.input, s.target_re, s.target_im):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    if ds.config is not None:
        meta = {"synthesis": ds.config.to_dict(), "scales": ds.scales, **ds.extra}
        _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


class _Reader:
    def __init__(self, buf: bytes, name: str):
        self.buf, self.pos, self.name = buf, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"{self.name}: truncated payload at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_dataset(path: str | os.PathLike, cap: int | None = None) -> Dataset:
    """Parse a container; inputs are validated against ``cap``, else the sidecar's, else 12-bit."""
    path = Path(path)
    side = _sidecar(path)
    meta = json.loads(side.read_text()) if side.exists() else None
    if cap is None:
        cap = int(meta["synthesis"].get("cap", optics.CAP_12BIT)) if meta else optics.CAP_12BIT
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DatasetFormatError(f"cannot read {path}: {e}") from e
    r = _Reader(buf, str(path))
    if r.take(4) != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not an SPR1 file")
    version, count = r.unpack("<HI")
    if version == VERSION_FIXED:
        k = t = FIXED_EXTENT
    elif version == VERSION_SIZED:
        k, t = r.unpack("<HH")
    else:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    samples = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        try:
            sid = r.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise DatasetFormatError(f"{path}: sample id is not UTF-8") from e
        (tag,) = r.unpack("<B")
        if tag >= len(ENCODINGS):
            raise DatasetFormatError(f"{path}: unknown encoding tag {tag}")
        arrs = [np.frombuffer(r.take(4 * e * e), dtype="<f4").reshape(e, e).astype(np.float32)
                for e in (k, t, t)]
        x = arrs[0]
        if not (np.isfinite(x).all() and (x == np.round(x)).all() and x.min(initial=0) >= 0
                and x.max(initial=0) <= cap):
            raise DatasetFormatError(f"{path}: sample {sid!r} input is not integral in [0, {cap}]")
        samples.append(Sample(sid, *arrs, encoding=ENCODINGS[tag]))
    if r.pos != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    ds = Dataset(samples)
    if meta is not None:
        ds.config = SynthesisConfig.from_dict(meta.pop("synthesis"))
        ds.scales = {str(k_): float(v) for k_, v in meta.pop("scales", {}).items()}
        ds.extra = meta
    return ds


# -- splits ------------------------------------------------------------------

def split_kfold(ids: Sequence[str], K: int, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then contiguous chunks; fold ``f`` tests on chunk ``f``."""
    ids = list(ids)
    if K < 2:
        raise ValueError("K must be >= 2")
    if K > len(ids):
        raise ValueError(f"K={K} exceeds the number of samples {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = [[ids[i] for i in c] for c in np.array_split(order, K)]
    test = chunks
    train = [[i for j, c in enumerate(chunks) if j != f for i in c] for f in range(K)]
    return FoldPlan(K, train, test)


def saturation_fraction(ds: Dataset) -> float:
    """Fraction of capped bins over the full frames of every sample."""
    if not ds.samples:
        return 0.0
    hits = total = 0
    for s in ds.samples:
        m = ds.measurement(s)
        hits += int(m.saturated.sum())
        total += m.values.size
    return hits / total


def crop_saturation_fraction(samples: Sequence[Sample], cap: int = optics.CAP_12BIT) -> float:
    if not samples:
        return 0.0
    return math.fsum(float((s.input >= cap).mean()) for s in samples) / len(samples)

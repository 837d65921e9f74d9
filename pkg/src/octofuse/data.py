"""Synthetic multi-modal volumes, 2.5-D slabs, histogram equalization, OMMV files.

OMMV layout (all little-endian)::

    b"OMMV" | u32 version | u32 manifest length | manifest (UTF-8 JSON)
    | M·D·H·W float64 modality values (modality-major, then z, y, x)
    | D·H·W int32 labels

The manifest carries ``M, D, H, W, K, polarity, seed, dtype, label_dtype``
plus optional ``modality_names``, ``voxel_size``, ``volume_id`` and
``lesions``.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataError, FormatError

MAGIC = b"OMMV"
VERSION = 1
_HEADER = struct.Struct("<4sII")
BACKGROUND_RANGE = (0.3, 0.6)
CONTRAST_RANGE = (0.15, 0.3)


@dataclass
class Lesion:
    center: tuple[float, float, float]  # z, y, x in voxel units
    radii: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radii": list(self.radii)}


@dataclass
class MultiModalVolume:
    modalities: np.ndarray  # M × D × H × W, values in [0, 1]
    labels: np.ndarray  # D × H × W, ints in [0, K)
    polarity: tuple[int, ...]
    n_classes: int = 2
    seed: int = 0
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    volume_id: str = ""
    modality_names: tuple[str, ...] = ()
    lesions: list[Lesion] = field(default_factory=list)

    def __post_init__(self):
        self.modalities = np.asarray(self.modalities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.polarity = tuple(int(p) for p in self.polarity)
        if self.modalities.ndim != 4:
            raise ConfigurationError(f"modalities must be M×D×H×W, got shape {self.modalities.shape}")
        if self.labels.shape != self.modalities.shape[1:]:
            raise ConfigurationError(f"labels {self.labels.shape} do not match modalities {self.modalities.shape[1:]}")
        if min(self.modalities.shape) < 1:
            raise ConfigurationError(f"volume extents must be ≥ 1, got {self.modalities.shape}")
        if len(self.polarity) != self.n_modalities:
            raise ConfigurationError(f"{len(self.polarity)} polarity signs for {self.n_modalities} modalities")
        if not self.modality_names:
            self.modality_names = tuple(f"m{i}" for i in range(self.n_modalities))

    @property
    def n_modalities(self) -> int:
        return self.modalities.shape[0]

    @property
    def depth(self) -> int:
        return self.modalities.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.modalities.shape[1:])

    def equals(self, other: "MultiModalVolume") -> bool:
        return (
            self.modalities.shape == other.modalities.shape
            and self.modalities.tobytes() == other.modalities.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
            and self.polarity == other.polarity
            and self.n_classes == other.n_classes
            and self.seed == other.seed
        )


def parse_polarity(text: str) -> tuple[int, ...]:
    signs = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok in ("+", "+1", "1"):
            signs.append(1)
        elif tok in ("-", "-1", "−", "−1"):
            signs.append(-1)
        else:
            raise ConfigurationError(f"bad polarity token {tok!r}; use '+' or '-'")
    return tuple(signs)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def rasterize_lesions(lesions: Sequence[Lesion], shape: tuple[int, int, int]) -> np.ndarray:
    d, h, w = shape
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    mask = np.zeros(shape, dtype=bool)
    for les in lesions:
        (cz, cy, cx), (rz, ry, rx) = les.center, les.radii
        mask |= ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
    return mask


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int, int]) -> np.ndarray:
    d, h, w = shape
    raw = gaussian_filter(rng.standard_normal(shape), sigma=(1.0, h / 6.0, w / 6.0), mode="wrap")
    lo, hi = raw.min(), raw.max()
    unit = (raw - lo) / (hi - lo) if hi > lo else np.full(shape, 0.5)
    return BACKGROUND_RANGE[0] + (BACKGROUND_RANGE[1] - BACKGROUND_RANGE[0]) * unit


def generate_volume(
    seed: int,
    index: int,
    n_modalities: int,
    dims: tuple[int, int, int],
    lesion_count: tuple[int, int] = (1, 3),
    lesion_radius: tuple[float, float] = (1.5, 4.0),
    noise_sigma: float = 0.05,
    polarity: Sequence[int] | None = None,
    max_redraws: int = 100,
) -> MultiModalVolume:
    """One volume drawn from the RNG stream keyed by ``(seed, index)``."""
    d, h, w = dims
    polarity = tuple(polarity) if polarity is not None else (1,) * n_modalities
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    n_les = int(rng.integers(lesion_count[0], lesion_count[1] + 1))
    lesions = []
    for _ in range(n_les):
        ry, rx = rng.uniform(*lesion_radius, size=2)
        rz = rng.uniform(1.0, max(1.0, d / 2.0))
        cz = float(rng.integers(d))
        cy = rng.uniform(min(ry, h / 2), max(h - 1 - ry, h / 2))
        cx = rng.uniform(min(rx, w / 2), max(w - 1 - rx, w / 2))
        lesions.append(Lesion((cz, float(cy), float(cx)), (float(rz), float(ry), float(rx))))
    mask = rasterize_lesions(lesions, dims)
    mods = np.empty((n_modalities, d, h, w))
    for m in range(n_modalities):
        delta = rng.uniform(*CONTRAST_RANGE)
        for _ in range(max_redraws):
            clean = _smooth_field(rng, dims) + polarity[m] * delta * mask
            inside, outside = clean[mask], clean[~mask]
            if outside.size == 0 or polarity[m] * (inside.mean() - outside.mean()) > 0:
                break
        else:
            raise RuntimeError(f"could not draw a background honoring polarity for modality {m}")
        noisy = clean + rng.normal(0.0, noise_sigma, size=dims) if noise_sigma > 0 else clean
        mods[m] = np.clip(noisy, 0.0, 1.0)
    return MultiModalVolume(
        modalities=mods,
        labels=mask.astype(np.int32),
        polarity=polarity,
        n_classes=2,
        seed=int(seed),
        volume_id=f"vol{index:04d}",
        lesions=lesions,
    )


def generate_synthetic(
    seed: int,
    n_volumes: int,
    n_modalities: int,
    dims: tuple[int, int, int],
    lesion_count: tuple[int, int] = (1, 3),
    lesion_radius: tuple[float, float] = (1.5, 4.0),
    noise_sigma: float = 0.05,
    polarity: Sequence[int] | None = None,
    workers: int = 1,
) -> list[MultiModalVolume]:
    """Ellipsoid lesions over smooth backgrounds with per-modality contrast sign.

    Each modality adds ``polarity[m]·Δ`` (Δ ∈ [0.15, 0.3]) inside lesions to a
    smooth field spanning [0.3, 0.6], then Gaussian noise, then clamps to
    [0, 1]. Volume ``i`` depends only on ``(seed, i)``, so ``workers > 1``
    yields the same result as a sequential run.
    """
    d, h, w = dims
    if n_volumes < 1 or n_modalities < 1:
        raise ConfigurationError("need at least one volume and one modality")
    if d < 1 or h < 16 or w < 16 or h % 16 or w % 16:
        raise ConfigurationError(f"dims {dims}: D ≥ 1 and H, W positive multiples of 16 required")
    polarity = tuple(polarity) if polarity is not None else (1,) * n_modalities
    if len(polarity) != n_modalities or any(p not in (1, -1) for p in polarity):
        raise ConfigurationError(f"polarity {polarity} must hold {n_modalities} signs of ±1")
    if lesion_radius[0] < 1.0 or lesion_radius[1] < lesion_radius[0]:
        raise ConfigurationError(f"lesion radius range {lesion_radius} invalid (min ≥ 1)")
    if lesion_count[0] < 1 or lesion_count[1] < lesion_count[0]:
        raise ConfigurationError(f"lesion count range {lesion_count} invalid")
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be ≥ 0")
    make = partial(
        generate_volume,
        seed,
        n_modalities=n_modalities,
        dims=tuple(dims),
        lesion_count=tuple(lesion_count),
        lesion_radius=tuple(lesion_radius),
        noise_sigma=noise_sigma,
        polarity=polarity,
    )
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(make, range(n_volumes)))
    return [make(i) for i in range(n_volumes)]


# ---------------------------------------------------------------------------
# Slicing and enhancement
# ---------------------------------------------------------------------------


def slab_indices(depth: int, z: int) -> tuple[int, int, int]:
    if not 0 <= z < depth:
        raise IndexError(f"slice {z} out of range for depth {depth}")
    return max(z - 1, 0), z, min(z + 1, depth - 1)


def extract_25d(volume: MultiModalVolume, modality: int, z: int) -> np.ndarray:
    """3×H×W stack of slices z-1, z, z+1; edge slices are duplicated."""
    if not 0 <= modality < volume.n_modalities:
        raise IndexError(f"modality {modality} out of range for M={volume.n_modalities}")
    return volume.modalities[modality][list(slab_indices(volume.depth, z))].copy()


def hist_equalize(image: np.ndarray, bins: int = 256) -> np.ndarray:
    """Map each quantized level to the inclusive CDF of the image's histogram."""
    image = np.asarray(image, dtype=np.float64)
    if np.isnan(image).any():
        raise DataError("hist_equalize: NaN in input")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise DataError(f"hist_equalize: values must lie in [0, 1], got [{image.min()}, {image.max()}]")
    levels = np.minimum((image * bins).astype(np.int64), bins - 1)
    counts = np.bincount(levels.ravel(), minlength=bins)
    cdf = np.cumsum(counts) / levels.size
    return cdf[levels]


def equalize_volume(volume: MultiModalVolume, modalities: Sequence[int], bins: int = 256) -> MultiModalVolume:
    """Append per-slice equalized copies of the chosen modalities as extra modalities."""
    extra = [np.stack([hist_equalize(s, bins) for s in volume.modalities[m]]) for m in modalities]
    return MultiModalVolume(
        modalities=np.concatenate([volume.modalities, np.stack(extra)]) if extra else volume.modalities,
        labels=volume.labels,
        polarity=volume.polarity + tuple(volume.polarity[m] for m in modalities),
        n_classes=volume.n_classes,
        seed=volume.seed,
        voxel_size=volume.voxel_size,
        volume_id=volume.volume_id,
        modality_names=volume.modality_names + tuple(f"{volume.modality_names[m]}_eq" for m in modalities),
        lesions=volume.lesions,
    )


def volume_slices(volume: MultiModalVolume) -> tuple[np.ndarray, np.ndarray]:
    """All 2.5-D samples of a volume: inputs ``D×M×3×H×W`` and labels ``D×H×W``."""
    d = volume.depth
    idx = np.array([slab_indices(d, z) for z in range(d)])
    x = volume.modalities[:, idx]  # M × D × 3 × H × W
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)), volume.labels


# ---------------------------------------------------------------------------
# OMMV files
# ---------------------------------------------------------------------------


def write_volume(path, volume: MultiModalVolume) -> None:
    m, d, h, w = volume.modalities.shape
    manifest = {
        "M": m,
        "D": d,
        "H": h,
        "W": w,
        "K": volume.n_classes,
        "polarity": list(volume.polarity),
        "seed": volume.seed,
        "dtype": "<f8",
        "label_dtype": "<i4",
        "modality_names": list(volume.modality_names),
        "voxel_size": list(volume.voxel_size),
        "volume_id": volume.volume_id,
        "lesions": [les.to_dict() for les in volume.lesions],
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = volume.modalities.astype("<f8").tobytes() + volume.labels.astype("<i4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, VERSION, len(text)) + text + payload)


def read_volume(path) -> MultiModalVolume:
    blob = Path(path).read_bytes()
    where = str(path)
    if len(blob) < _HEADER.size:
        raise FormatError(f"{where}: truncated header, expected {_HEADER.size} bytes, got {len(blob)}")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{where}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{where}: unsupported version {version} at byte 4")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise FormatError(f"{where}: truncated manifest, expected {start + mlen} bytes, got {len(blob)}")
    try:
        man = json.loads(blob[start : start + mlen].decode("utf-8"))
        m, d, h, w, k = (int(man[key]) for key in ("M", "D", "H", "W", "K"))
        polarity = man["polarity"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: unreadable manifest at byte {start}: {exc}") from None
    if min(m, d, h, w) < 1:
        raise FormatError(f"{where}: manifest at byte {start} declares empty volume M={m} D={d} H={h} W={w}")
    if len(polarity) != m:
        raise FormatError(f"{where}: manifest at byte {start} lists {len(polarity)} polarity signs for M={m}")
    if man.get("dtype", "<f8") != "<f8" or man.get("label_dtype", "<i4") != "<i4":
        raise FormatError(f"{where}: unsupported dtypes {man.get('dtype')}/{man.get('label_dtype')}")
    base = start + mlen
    n_vals = m * d * h * w
    expected = base + 8 * n_vals + 4 * d * h * w
    if len(blob) != expected:
        kind = "truncated" if len(blob) < expected else "trailing bytes in"
        raise FormatError(f"{where}: {kind} payload, expected {expected} bytes, got {len(blob)}")
    mods = np.frombuffer(blob, dtype="<f8", count=n_vals, offset=base).reshape(m, d, h, w)
    labels = np.frombuffer(blob, dtype="<i4", count=d * h * w, offset=base + 8 * n_vals).reshape(d, h, w)
    return MultiModalVolume(
        modalities=mods.astype(np.float64),
        labels=labels.astype(np.int32),
        polarity=tuple(polarity),
        n_classes=k,
        seed=int(man.get("seed", 0)),
        voxel_size=tuple(man.get("voxel_size", (1.0, 1.0, 1.0))),
        volume_id=man.get("volume_id", ""),
        modality_names=tuple(man.get("modality_names", ())),
        lesions=[Lesion(tuple(x["center"]), tuple(x["radii"])) for x in man.get("lesions", [])],
    )


def write_dataset(directory, volumes: Sequence[MultiModalVolume]) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, v in enumerate(volumes):
        p = out / f"{v.volume_id or f'vol{i:04d}'}.ommv"
        write_volume(p, v)
        paths.append(p)
    return paths


def read_dataset(directory) -> list[MultiModalVolume]:
    paths = sorted(Path(directory).glob("*.ommv"))
    if not paths:
        raise ConfigurationError(f"no .ommv volumes under {directory}")
    return [read_volume(p) for p in paths]

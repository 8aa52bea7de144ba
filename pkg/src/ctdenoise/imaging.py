"""CT slice data types, HU windowing, synthetic phantoms, and slice file I/O.

Images are 2-D arrays of Hounsfield units (HU).  Network-facing images are
windowed into [0, 1].  Slices are stored on disk in a small binary format
(``ASC1`` magic, little-endian header, float32 payload) so round trips are
bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# Default display/training window and the air/tissue cut used for masking.
HU_WINDOW = (-1000.0, 2000.0)
FOREGROUND_THRESHOLD_HU = -500.0

# Tissue palette for synthetic phantoms: (mean HU, noise std HU).
TISSUE_AIR = (-1000.0, 10.0)
TISSUE_MUSCLE = (40.0, 44.73)
TISSUE_LIVER = (60.0, 63.23)
TISSUE_BONE = (400.0, 30.0)

SLICE_MAGIC = b"ASC1"
_HEADER = struct.Struct("<II")


class SliceIOError(Exception):
    """Base class for slice file format errors."""


class BadMagicError(SliceIOError):
    """File does not start with the ``ASC1`` magic bytes."""


class HeaderError(SliceIOError):
    """Header dimensions are unusable (zero, too small, or not /16)."""


class PayloadSizeError(SliceIOError):
    """Payload length disagrees with the header dimensions."""


def _first_nonfinite(values: np.ndarray) -> tuple[int, int] | None:
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        return int(r), int(c)
    return None


@dataclass
class Slice:
    """A single CT slice in Hounsfield units, row-major (H, W) float32.

    Height and width must be at least 16 and divisible by 16 so that four
    exact 2x down-samplings exist.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"slice must be 2-D, got shape {self.values.shape}")
        h, w = self.values.shape
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise ValueError(
                f"slice dimensions must be >= 16 and divisible by 16, got {h}x{w}"
            )
        bad = _first_nonfinite(self.values)
        if bad is not None:
            raise ValueError(f"non-finite HU value at pixel {bad}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class NormalizedImage:
    """A windowed image with every value in [0, 1], same layout as Slice.
    Stored at double precision so windowing round trips are lossless."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {self.values.shape}")
        bad = _first_nonfinite(self.values)
        if bad is not None:
            raise ValueError(f"non-finite value at pixel {bad}")
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"values outside [0, 1]: min={lo}, max={hi}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class Mask:
    """Boolean per-pixel mask; shape must match the image it was taken from."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.values.shape}")


@dataclass(frozen=True)
class TissueRegion:
    """One piecewise-constant region of a phantom.

    ``shape`` is "ellipse" with params (cy, cx, ry, rx) or "rect" with
    params (top, left, bottom, right), bottom/right exclusive, all in pixels.
    """

    shape: str
    params: tuple[float, ...]
    mean_hu: float
    noise_std_hu: float

    def __post_init__(self) -> None:
        if self.shape not in ("ellipse", "rect"):
            raise ValueError(f"unknown region shape {self.shape!r}")
        n = 4
        if len(self.params) != n:
            raise ValueError(f"{self.shape} region needs {n} params, got {len(self.params)}")
        if self.noise_std_hu < 0:
            raise ValueError("region noise std must be >= 0")

    def rasterize(self, height: int, width: int) -> np.ndarray:
        """Boolean membership mask; raises if the region leaves the image
        or covers no pixel."""
        if self.shape == "ellipse":
            cy, cx, ry, rx = self.params
            if ry <= 0 or rx <= 0:
                raise ValueError(f"degenerate ellipse radii ({ry}, {rx})")
            if cy - ry < -0.5 or cy + ry > height - 0.5 or cx - rx < -0.5 or cx + rx > width - 0.5:
                raise ValueError("ellipse extends outside the image")
            yy, xx = np.mgrid[0:height, 0:width]
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            top, left, bottom, right = (int(p) for p in self.params)
            if not (0 <= top < bottom <= height and 0 <= left < right <= width):
                raise ValueError("degenerate or out-of-bounds rectangle")
            mask = np.zeros((height, width), dtype=bool)
            mask[top:bottom, left:right] = True
        if not mask.any():
            raise ValueError(f"region covers no pixel: {self}")
        return mask


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic recipe for one synthetic (clean, noisy) slice pair."""

    seed: int
    size: int
    regions: tuple[TissueRegion, ...]
    background_hu: float = TISSUE_AIR[0]
    background_noise_std_hu: float = TISSUE_AIR[1]

    def __post_init__(self) -> None:
        if self.size < 16 or self.size % 16:
            raise ValueError(f"phantom size must be >= 16 and divisible by 16, got {self.size}")
        if self.background_noise_std_hu < 0:
            raise ValueError("background noise std must be >= 0")


def hu_window_normalize(s: Slice, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> NormalizedImage:
    """Map HU values into [0, 1] with the window [lo, hi]; values outside the
    window are clamped (real CT values exceed any fixed window)."""
    if not lo < hi:
        raise ValueError(f"window lower bound must be below upper bound, got [{lo}, {hi}]")
    bad = _first_nonfinite(s.values)
    if bad is not None:
        raise ValueError(f"non-finite HU value at pixel {bad}")
    scaled = (s.values.astype(np.float64) - lo) / (hi - lo)
    return NormalizedImage(np.clip(scaled, 0.0, 1.0))


def normalized_to_hu(img: NormalizedImage, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Slice:
    """Inverse of hu_window_normalize on the non-clamped interior."""
    if not lo < hi:
        raise ValueError(f"window lower bound must be below upper bound, got [{lo}, {hi}]")
    return Slice(img.values.astype(np.float64) * (hi - lo) + lo)


def foreground_mask(s: Slice, threshold: float = FOREGROUND_THRESHOLD_HU) -> Mask:
    """True where the pixel is strictly above the HU threshold."""
    return Mask(s.values > threshold)


def generate_phantom(spec: PhantomSpec) -> tuple[Slice, Slice]:
    """Render a piecewise-constant phantom and its noisy sibling.

    Regions are painted in order over an air background; the noisy slice adds
    zero-mean Gaussian noise whose per-pixel std is the covering region's
    configured std.  Output is a pure function of the spec.
    """
    h = w = spec.size
    clean = np.full((h, w), spec.background_hu, dtype=np.float64)
    std_map = np.full((h, w), spec.background_noise_std_hu, dtype=np.float64)
    for region in spec.regions:
        mask = region.rasterize(h, w)
        clean[mask] = region.mean_hu
        std_map[mask] = region.noise_std_hu
    rng = np.random.default_rng(spec.seed)
    noisy = clean + rng.standard_normal((h, w)) * std_map
    return Slice(clean), Slice(noisy)


def default_phantom_spec(seed: int, size: int = 64) -> PhantomSpec:
    """A randomized abdomen-like layout: a muscle body oval holding a liver
    ellipse, a low-contrast lesion, and a bone fragment.  Placement jitter is
    drawn from the seed, so the spec (and phantom) is reproducible."""
    rng = np.random.default_rng(seed)
    c = size / 2.0
    body_ry = size * rng.uniform(0.36, 0.42)
    body_rx = size * rng.uniform(0.40, 0.46)
    body_cy = c + size * rng.uniform(-0.02, 0.02)
    body_cx = c + size * rng.uniform(-0.02, 0.02)

    liver_ry = body_ry * rng.uniform(0.38, 0.5)
    liver_rx = body_rx * rng.uniform(0.42, 0.55)
    liver_cy = body_cy - body_ry * rng.uniform(0.15, 0.3)
    liver_cx = body_cx - body_rx * rng.uniform(0.2, 0.35)

    lesion_r = max(2.0, liver_ry * rng.uniform(0.2, 0.3))
    lesion_cy = liver_cy + liver_ry * rng.uniform(-0.3, 0.3)
    lesion_cx = liver_cx + liver_rx * rng.uniform(-0.3, 0.3)

    bone_r = size * rng.uniform(0.04, 0.06)
    bone_cy = body_cy + body_ry * rng.uniform(0.5, 0.7)
    bone_cx = body_cx + body_rx * rng.uniform(-0.15, 0.15)

    regions = (
        TissueRegion("ellipse", (body_cy, body_cx, body_ry, body_rx), *TISSUE_MUSCLE),
        TissueRegion("ellipse", (liver_cy, liver_cx, liver_ry, liver_rx), *TISSUE_LIVER),
        TissueRegion(
            "ellipse",
            (lesion_cy, lesion_cx, lesion_r, lesion_r),
            TISSUE_LIVER[0] + 25.0,
            TISSUE_LIVER[1],
        ),
        TissueRegion("ellipse", (bone_cy, bone_cx, bone_r, bone_r), *TISSUE_BONE),
    )
    return PhantomSpec(seed=seed, size=size, regions=regions)


def save_slice(s: Slice, path: str | Path) -> None:
    path = Path(path)
    payload = s.values.astype("<f4", copy=False).tobytes()
    path.write_bytes(SLICE_MAGIC + _HEADER.pack(s.height, s.width) + payload)


def load_slice(path: str | Path) -> Slice:
    data = Path(path).read_bytes()
    if data[:4] != SLICE_MAGIC:
        raise BadMagicError(f"{path}: expected magic {SLICE_MAGIC!r}, got {data[:4]!r}")
    if len(data) < 4 + _HEADER.size:
        raise HeaderError(f"{path}: file too short for a header")
    h, w = _HEADER.unpack_from(data, 4)
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise HeaderError(f"{path}: unusable dimensions {h}x{w}")
    expected = h * w * 4
    actual = len(data) - 4 - _HEADER.size
    if actual != expected:
        raise PayloadSizeError(
            f"{path}: header says {h}x{w} ({expected} bytes) but payload holds {actual} bytes"
        )
    values = np.frombuffer(data, dtype="<f4", offset=4 + _HEADER.size).reshape(h, w)
    return Slice(values.copy())


def save_png16(img: NormalizedImage, path: str | Path) -> None:
    """Export a windowed image as 16-bit grayscale PNG for human inspection."""
    arr = np.round(img.values.astype(np.float64) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(Path(path), format="PNG")


# ---------------------------------------------------------------------------
# Paired datasets on disk: pair_NNNN_clean.asc / pair_NNNN_noisy.asc
# ---------------------------------------------------------------------------

def pair_paths(directory: str | Path, index: int) -> tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"pair_{index:04d}_noisy.asc", directory / f"pair_{index:04d}_clean.asc"


def save_pair(directory: str | Path, index: int, clean: Slice, noisy: Slice) -> None:
    noisy_path, clean_path = pair_paths(directory, index)
    save_slice(noisy, noisy_path)
    save_slice(clean, clean_path)


def list_pairs(directory: str | Path) -> list[tuple[Path, Path]]:
    """All (noisy, clean) file pairs in a dataset directory, sorted by name."""
    directory = Path(directory)
    pairs = []
    for noisy_path in sorted(directory.glob("pair_*_noisy.asc")):
        clean_path = noisy_path.with_name(noisy_path.name.replace("_noisy", "_clean"))
        if not clean_path.exists():
            raise FileNotFoundError(f"missing clean counterpart for {noisy_path}")
        pairs.append((noisy_path, clean_path))
    return pairs


def load_pairs(directory: str | Path) -> list[tuple[Slice, Slice]]:
    return [(load_slice(n), load_slice(c)) for n, c in list_pairs(directory)]

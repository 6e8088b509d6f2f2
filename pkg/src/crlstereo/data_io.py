"""Stereo data on disk and in memory.

PFM and 16-bit KITTI-style PNG disparity files, 8-bit PNG images, and a
random-texture stereogram generator whose ground truth is exact by
construction.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter


class FormatError(ValueError):
    """A disparity or image file does not follow its format."""


class IngestionError(ValueError):
    """A dataset directory is incomplete."""


@dataclass
class StereoSample:
    id: str
    left: np.ndarray  # (3, H, W) in [0, 1]
    right: np.ndarray
    disparity: np.ndarray  # (H, W), positive left disparities
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        h, w = self.disparity.shape
        if self.left.shape != (3, h, w) or self.right.shape != (3, h, w) or self.valid.shape != (h, w):
            raise ValueError(f"sample {self.id}: inconsistent shapes")


# ---------------------------------------------------------------- PFM


def read_pfm(path) -> tuple[np.ndarray, int]:
    """Return (array, channels); array is (H, W) or (H, W, 3), top row first."""
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\r\n")
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: bad magic {magic[:16]!r}, expected 'PF' or 'Pf'")
        dims = fh.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise FormatError(f"{path}: malformed dimensions line {dims[:32]!r}")
        width, height = int(m.group(1)), int(m.group(2))
        try:
            scale = float(fh.readline().strip())
        except ValueError as exc:
            raise FormatError(f"{path}: malformed scale line") from exc
        if scale == 0:
            raise FormatError(f"{path}: scale field is zero (endianness undefined)")
        dtype = "<f4" if scale < 0 else ">f4"
        payload = fh.read()
    count = width * height * channels
    if len(payload) < 4 * count:
        raise FormatError(f"{path}: truncated payload, {len(payload)} of {4 * count} bytes")
    data = np.frombuffer(payload, dtype=dtype, count=count)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32), channels


def write_pfm(path, array: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) array as little-endian PFM."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise FormatError(f"PFM holds (H, W) or (H, W, 3) arrays, got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(arr), dtype="<f4").tobytes())


# ---------------------------------------------------------------- KITTI PNG


def read_kitti_disparity(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (disparity, valid); stored value / 256, zero means invalid."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L"):
            raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode}")
        raw = np.array(im, dtype=np.uint16)
    valid = raw > 0
    return raw.astype(np.float32) / 256.0, valid


def write_kitti_disparity(path, disparity: np.ndarray, valid: np.ndarray | None = None) -> None:
    d = np.asarray(disparity, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(d)
    stored = np.where(valid, np.clip(np.round(np.nan_to_num(d) * 256.0), 1, 65535), 0)
    Image.fromarray(stored.astype(np.uint16)).save(path)


def read_disparity(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a .pfm or .png disparity file; non-finite PFM values are invalid."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        arr, channels = read_pfm(path)
        if channels != 1:
            raise FormatError(f"{path}: disparity PFM must have one channel")
        valid = np.isfinite(arr)
        return np.where(valid, arr, 0).astype(np.float32), valid
    if path.suffix.lower() == ".png":
        return read_kitti_disparity(path)
    raise FormatError(f"{path}: unsupported disparity extension {path.suffix!r}")


def write_disparity(path, disparity: np.ndarray, valid: np.ndarray | None = None) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        d = np.asarray(disparity, dtype=np.float32)
        if valid is not None:
            d = np.where(valid, d, np.inf).astype(np.float32)
        write_pfm(path, d)
    elif path.suffix.lower() == ".png":
        write_kitti_disparity(path, disparity, valid)
    else:
        raise FormatError(f"{path}: unsupported disparity extension {path.suffix!r}")


# ---------------------------------------------------------------- images


def read_image(path) -> np.ndarray:
    """8-bit RGB PNG -> float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.array(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------- synthesis


@dataclass
class Rect:
    x: int
    y: int
    w: int
    h: int
    disparity: float


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 64
    background: float = 0.0
    rects: list[Rect] = field(default_factory=list)
    texture_seed: int = 0
    noise_sigma: float = 0.0

    def validate(self) -> None:
        bound = self.width / 4
        for d in [self.background] + [r.disparity for r in self.rects]:
            if not 0 <= d < bound:
                raise ValueError(f"disparity {d} outside [0, {bound}) for width {self.width}")
        for r in self.rects:
            if r.w <= 0 or r.h <= 0 or r.x < 0 or r.y < 0 or r.x + r.w > self.width or r.y + r.h > self.height:
                raise ValueError(f"rectangle {r} does not lie inside the {self.width}x{self.height} frame")


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    noise = rng.random((3, h, w))
    return uniform_filter(noise, size=(1, 3, 3), mode="nearest")


def scene_disparity(spec: SceneSpec) -> np.ndarray:
    """Background plane with rectangles painted on top; larger disparity (nearer) wins."""
    d = np.full((spec.height, spec.width), float(spec.background))
    for r in spec.rects:
        patch = d[r.y : r.y + r.h, r.x : r.x + r.w]
        np.maximum(patch, r.disparity, out=patch)
    return d


def _interp_row(row: np.ndarray, xs: np.ndarray) -> np.ndarray:
    # row (3, W); linear interpolation at positions xs within [0, W-1]
    w = row.shape[1]
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    t = xs - x0
    return (1 - t) * row[:, x0] + t * row[:, x0 + 1]


def generate_stereogram(spec: SceneSpec, seed: int | None = None, sample_id: str = "scene") -> StereoSample:
    """Render a left/right pair with exact ground truth for the left view.

    Every right pixel shows the nearest surface projecting onto it; left
    pixels that are hidden in the right view or project outside the frame
    are marked invalid.  Right pixels seen by no left surface get fresh
    texture.
    """
    spec.validate()
    rng = np.random.default_rng(spec.texture_seed if seed is None else seed)
    h, w = spec.height, spec.width
    left = _texture(rng, h, w)
    fill = _texture(rng, h, w)
    disp = scene_disparity(spec)
    right = fill.copy()
    winner = np.full((h, w), -np.inf)
    cols = np.arange(w, dtype=float)
    for y in range(h):
        row = disp[y]
        for dv in np.unique(row):
            # right pixel xr sees surface dv if the left pixel at xr + dv belongs to it
            xl = cols + dv
            inside = xl <= w - 1
            hit = np.zeros(w, dtype=bool)
            xi = np.clip(np.rint(xl), 0, w - 1).astype(int)
            if float(dv).is_integer():
                hit[inside] = row[xi[inside]] == dv
            else:
                lo = np.clip(np.floor(xl), 0, w - 1).astype(int)
                hi = np.clip(np.ceil(xl), 0, w - 1).astype(int)
                hit[inside] = (row[lo[inside]] == dv) & (row[hi[inside]] == dv)
            take = hit & (dv > winner[y])
            if take.any():
                winner[y, take] = dv
                right[:, y, take] = _interp_row(left[:, y], xl[take])
    valid = np.zeros((h, w), dtype=bool)
    for y in range(h):
        xr = cols - disp[y]
        ok = xr >= 0
        lo = np.clip(np.floor(xr), 0, w - 1).astype(int)
        hi = np.clip(np.ceil(xr), 0, w - 1).astype(int)
        valid[y] = ok & (winner[y, lo] == disp[y]) & (winner[y, hi] == disp[y])
    if spec.noise_sigma > 0:
        left = left + rng.normal(0, spec.noise_sigma, left.shape)
        right = right + rng.normal(0, spec.noise_sigma, right.shape)
    return StereoSample(
        sample_id,
        np.clip(left, 0, 1).astype(np.float32),
        np.clip(right, 0, 1).astype(np.float32),
        disp.astype(np.float32),
        valid,
    )


def random_scene(rng: np.random.Generator, width: int = 128, height: int = 64, max_disp: int = 16,
                 max_rects: int = 4, noise_sigma: float = 0.0) -> SceneSpec:
    """Random integer-disparity scene: background plane plus 1..max_rects rectangles."""
    bg = int(rng.integers(0, max_disp // 3 + 1))
    rects = []
    for _ in range(int(rng.integers(1, max_rects + 1))):
        rw = int(rng.integers(width // 8, width // 2))
        rh = int(rng.integers(height // 6, height // 2 + 1))
        rects.append(Rect(int(rng.integers(0, width - rw + 1)), int(rng.integers(0, height - rh + 1)),
                          rw, rh, float(rng.integers(0, max_disp + 1))))
    return SceneSpec(width, height, float(bg), rects, int(rng.integers(0, 2**31 - 1)), noise_sigma)


PRESETS = {
    "desk": dict(width=128, height=64, max_disp=16, max_rects=4),
    "tiny": dict(width=64, height=64, max_disp=8, max_rects=2),
}


def synthesize_dataset(count: int, seed: int, preset: str = "desk") -> list[StereoSample]:
    rng = np.random.default_rng(seed)
    opts = PRESETS[preset]
    samples = []
    for i in range(count):
        spec = random_scene(rng, **opts)
        samples.append(generate_stereogram(spec, sample_id=f"{i:06d}"))
    return samples


# ---------------------------------------------------------------- datasets


def save_sample(root, sample: StereoSample, disp_ext: str = ".pfm") -> None:
    root = Path(root)
    for sub in ("left", "right", "disp"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_image(root / "left" / f"{sample.id}.png", sample.left)
    write_image(root / "right" / f"{sample.id}.png", sample.right)
    write_disparity(root / "disp" / f"{sample.id}{disp_ext}", sample.disparity, sample.valid)


def load_dataset(root, disp_format: str = "pfm", screen: bool = False) -> list[StereoSample]:
    """Load ``<root>/left``, ``/right`` and ``/disp`` triples sorted by id.

    Raises IngestionError naming every id whose triple is incomplete.  With
    ``screen`` the large-disparity screening rule drops samples.
    """
    root = Path(root)
    ext = "." + disp_format.lstrip(".")
    ids: dict[str, set[str]] = {}
    for sub, suffix in (("left", ".png"), ("right", ".png"), ("disp", ext)):
        d = root / sub
        if not d.is_dir():
            continue
        for f in d.iterdir():
            if f.suffix.lower() == suffix:
                ids.setdefault(f.stem, set()).add(sub)
    incomplete = sorted(i for i, parts in ids.items() if len(parts) != 3)
    if incomplete:
        raise IngestionError(f"incomplete samples in {root}: {', '.join(incomplete)}")
    samples = []
    for sid in sorted(ids):
        disp, valid = read_disparity(root / "disp" / f"{sid}{ext}")
        s = StereoSample(sid, read_image(root / "left" / f"{sid}.png"),
                         read_image(root / "right" / f"{sid}.png"), disp, valid)
        samples.append(s)
    if screen:
        from .training import screen_sample

        samples = [s for s in samples if screen_sample(s.disparity, s.valid)]
    return samples

"""Deep-Zoom tile pyramids, tissue masks, and patch grids.

A pyramid has levels 0..max_level where max_level holds the full working
resolution raster and each level below halves the previous one (ceil).
Tiles are written as ``<slide>_files/<level>/<col>_<row>.<ext>`` next to a
``<slide>.dzi`` XML descriptor, so any Deep Zoom viewer can consume them.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

log = logging.getLogger(__name__)

DZI_XMLNS = "http://schemas.microsoft.com/deepzoom/2008"

# Lossless by default so reassembled levels are bit-exact; low compression
# level because tiles are written once and read many times.
PNG_COMPRESS_LEVEL = 1
JPEG_QUALITY = 90


# ---------------------------------------------------------------------------
# descriptor


@dataclass
class TilePyramidDescriptor:
    slide_id: str
    width: int
    height: int
    tile_size: int = 254
    overlap: int = 1
    format: str = "png"
    max_level: int = field(init=False)
    level_dims: list[tuple[int, int]] = field(init=False)

    def __post_init__(self):
        self.level_dims = level_dimensions(self.width, self.height)
        self.max_level = len(self.level_dims) - 1

    def tile_grid(self, level: int) -> tuple[int, int]:
        """Tile columns and rows at a level (ceil division by tile_size)."""
        w, h = self.level_dims[level]
        ts = self.tile_size
        return (w + ts - 1) // ts, (h + ts - 1) // ts

    def tile_count(self, level: int) -> int:
        cols, rows = self.tile_grid(level)
        return cols * rows

    def tile_box(self, level: int, col: int, row: int) -> tuple[int, int, int, int]:
        """Pixel box (x0, y0, x1, y1) a tile covers, overlap included."""
        w, h = self.level_dims[level]
        ts, ov = self.tile_size, self.overlap
        x0 = max(0, col * ts - ov)
        y0 = max(0, row * ts - ov)
        x1 = min(w, (col + 1) * ts + ov)
        y1 = min(h, (row + 1) * ts + ov)
        return x0, y0, x1, y1

    def to_dzi_xml(self) -> bytes:
        image = ET.Element("Image", {
            "TileSize": str(self.tile_size),
            "Overlap": str(self.overlap),
            "Format": self.format,
            "xmlns": DZI_XMLNS,
        })
        ET.SubElement(image, "Size", {
            "Width": str(self.width),
            "Height": str(self.height),
        })
        return ET.tostring(image, encoding="UTF-8", xml_declaration=True)


def level_dimensions(width: int, height: int) -> list[tuple[int, int]]:
    """Dimensions per level, index 0 (1x1) through max_level (full size)."""
    if width < 1 or height < 1:
        raise ValidationError("image dimensions must be >= 1")
    dims = [(int(width), int(height))]
    w, h = int(width), int(height)
    while (w, h) != (1, 1):
        w = (w + 1) // 2
        h = (h + 1) // 2
        dims.append((w, h))
    dims.reverse()
    return dims


def load_descriptor(dzi_path: str | Path, slide_id: str | None = None) -> TilePyramidDescriptor:
    dzi_path = Path(dzi_path)
    root = ET.parse(dzi_path).getroot()
    size = root.find(f"{{{DZI_XMLNS}}}Size")
    if size is None:  # descriptor written without a namespace
        size = root.find("Size")
    if size is None:
        raise ValidationError(f"{dzi_path} has no Size element")
    return TilePyramidDescriptor(
        slide_id=slide_id or dzi_path.stem,
        width=int(size.get("Width")),
        height=int(size.get("Height")),
        tile_size=int(root.get("TileSize")),
        overlap=int(root.get("Overlap")),
        format=root.get("Format"),
    )


# ---------------------------------------------------------------------------
# rasters


def box_halve(arr: np.ndarray) -> np.ndarray:
    """2x2 box-average downsample; odd edges average the available pixels.

    Rounds half up so results are deterministic across platforms.
    """
    h, w = arr.shape[:2]
    oh, ow = (h + 1) // 2, (w + 1) // 2
    tail = arr.shape[2:]
    acc = np.zeros((oh, ow) + tail, dtype=np.uint32)
    cnt = np.zeros((oh, ow) + (1,) * len(tail), dtype=np.uint32)
    for dy in (0, 1):
        for dx in (0, 1):
            sub = arr[dy::2, dx::2]
            acc[: sub.shape[0], : sub.shape[1]] += sub
            cnt[: sub.shape[0], : sub.shape[1]] += 1
    return ((acc + cnt // 2) // cnt).astype(arr.dtype)


def _box_downsample_int(arr: np.ndarray, k: int) -> np.ndarray:
    """k x k box-average for an integer factor, ragged edges included."""
    h, w = arr.shape[:2]
    oh, ow = (h + k - 1) // k, (w + k - 1) // k
    tail = arr.shape[2:]
    acc = np.zeros((oh, ow) + tail, dtype=np.uint64)
    cnt = np.zeros((oh, ow) + (1,) * len(tail), dtype=np.uint64)
    for dy in range(k):
        for dx in range(k):
            sub = arr[dy::k, dx::k]
            acc[: sub.shape[0], : sub.shape[1]] += sub
            cnt[: sub.shape[0], : sub.shape[1]] += 1
    return ((acc + cnt // 2) // cnt).astype(arr.dtype)


def downsample_to_working_resolution(source: np.ndarray, scan_magnification: float,
                                     target_magnification: float) -> tuple[np.ndarray, float]:
    """Rescale a scan-resolution raster to the working magnification.

    Returns the working raster and scale_factor = scan / target, the
    multiplier that maps working coordinates back to native ones.
    """
    if scan_magnification <= 0 or target_magnification <= 0:
        raise ValidationError("magnifications must be > 0")
    if target_magnification > scan_magnification:
        raise ValidationError("no upsampling: target magnification exceeds scan magnification")
    factor = scan_magnification / target_magnification
    if abs(factor - 1.0) < 1e-12:
        return source, 1.0
    if abs(factor - round(factor)) < 1e-9:
        return _box_downsample_int(source, int(round(factor))), factor
    # Fractional factor: Pillow's BOX filter is area averaging.
    h, w = source.shape[:2]
    ow = max(1, int(np.ceil(w / factor)))
    oh = max(1, int(np.ceil(h / factor)))
    img = Image.fromarray(source).resize((ow, oh), Image.Resampling.BOX)
    return np.asarray(img), factor


# ---------------------------------------------------------------------------
# pyramid build / read


def build_pyramid(image: np.ndarray, out_dir: str | Path, slide_id: str,
                  tile_size: int = 254, overlap: int = 1,
                  fmt: str = "png") -> TilePyramidDescriptor:
    """Write the full tile pyramid and descriptor for a working raster.

    The input is the level-max raster; lower levels come from repeated 2x2
    box averaging. Tiles include ``overlap`` extra pixels on interior edges.
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3) or image.size == 0:
        raise ValidationError("image must be a non-empty 2-D raster")
    if tile_size < 1:
        raise ValidationError("tile_size must be >= 1")
    if not (0 <= overlap < tile_size):
        raise ValidationError("overlap must be >= 0 and < tile_size")
    if fmt not in ("png", "jpeg"):
        raise ValidationError("tile format must be png or jpeg")

    h, w = image.shape[:2]
    desc = TilePyramidDescriptor(slide_id, w, h, tile_size, overlap, fmt)
    out_dir = Path(out_dir)
    files_dir = out_dir / f"{slide_id}_files"
    files_dir.mkdir(parents=True, exist_ok=True)

    level_raster = image
    for level in range(desc.max_level, -1, -1):
        _write_level_tiles(level_raster, desc, level, files_dir)
        if level > 0:
            level_raster = box_halve(level_raster)

    (out_dir / f"{slide_id}.dzi").write_bytes(desc.to_dzi_xml())
    return desc


def _write_level_tiles(raster: np.ndarray, desc: TilePyramidDescriptor,
                       level: int, files_dir: Path) -> None:
    level_dir = files_dir / str(level)
    level_dir.mkdir(exist_ok=True)
    cols, rows = desc.tile_grid(level)
    save_kw = {"compress_level": PNG_COMPRESS_LEVEL} if desc.format == "png" \
        else {"quality": JPEG_QUALITY}
    for row in range(rows):
        for col in range(cols):
            x0, y0, x1, y1 = desc.tile_box(level, col, row)
            tile = raster[y0:y1, x0:x1]
            Image.fromarray(tile).save(
                level_dir / f"{col}_{row}.{desc.format}", **save_kw)


def read_tile(dzi_path: str | Path, level: int, col: int, row: int) -> np.ndarray:
    dzi_path = Path(dzi_path)
    desc = load_descriptor(dzi_path)
    path = dzi_path.with_name(f"{dzi_path.stem}_files") / str(level) / f"{col}_{row}.{desc.format}"
    if not path.exists():
        raise ValidationError(f"tile {level}/{col}_{row} does not exist")
    return np.asarray(Image.open(path))


def read_level_raster(dzi_path: str | Path, level: int) -> np.ndarray:
    """Reassemble one level from its tiles, trimming overlap margins."""
    dzi_path = Path(dzi_path)
    desc = load_descriptor(dzi_path)
    if not (0 <= level <= desc.max_level):
        raise ValidationError(f"level {level} out of range 0..{desc.max_level}")
    w, h = desc.level_dims[level]
    cols, rows = desc.tile_grid(level)
    files_dir = dzi_path.with_name(f"{dzi_path.stem}_files")
    out = None
    for row in range(rows):
        for col in range(cols):
            tile = np.asarray(Image.open(
                files_dir / str(level) / f"{col}_{row}.{desc.format}"))
            if out is None:
                shape = (h, w) + tile.shape[2:]
                out = np.zeros(shape, dtype=tile.dtype)
            x0, y0, x1, y1 = desc.tile_box(level, col, row)
            trim_l = col * desc.tile_size - x0
            trim_t = row * desc.tile_size - y0
            core_w = min((col + 1) * desc.tile_size, w) - col * desc.tile_size
            core_h = min((row + 1) * desc.tile_size, h) - row * desc.tile_size
            out[row * desc.tile_size: row * desc.tile_size + core_h,
                col * desc.tile_size: col * desc.tile_size + core_w] = \
                tile[trim_t: trim_t + core_h, trim_l: trim_l + core_w]
    return out


# ---------------------------------------------------------------------------
# tissue mask


@dataclass
class TissueMask:
    width: int
    height: int
    bits: np.ndarray          # bool, shape (height, width), True = tissue
    threshold_used: int
    degenerate: bool = False  # constant-intensity input, mask forced empty

    @property
    def tissue_fraction(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 0.0


def magenta_channel(image: np.ndarray) -> np.ndarray:
    """Stain-sensitive intensity: green complement (H&E absorbs green)."""
    if image.ndim != 3 or image.shape[2] < 3:
        raise ValidationError("tissue detection needs a 3-channel color raster")
    return (255 - image[:, :, 1].astype(np.uint16)).astype(np.uint8)


def otsu_threshold(hist: np.ndarray) -> int | None:
    """Otsu threshold on a 256-bin histogram; ties resolve to the lowest.

    Returns None when fewer than two bins are populated (no split exists).
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.shape != (256,):
        raise ValidationError("histogram must have 256 bins")
    total = hist.sum()
    if total <= 0 or np.count_nonzero(hist) < 2:
        return None
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    w1 = total - w0
    s_total = s0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s0 / w0
        mu1 = (s_total - s0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1.0
    return int(np.argmax(between))  # first maximum = lowest threshold


def tissue_mask(image: np.ndarray) -> TissueMask:
    """Binary tissue mask: Otsu over the magenta channel, strict > threshold."""
    magenta = magenta_channel(image)
    hist = np.bincount(magenta.ravel(), minlength=256)
    t = otsu_threshold(hist)
    h, w = magenta.shape
    if t is None:
        log.warning("constant-intensity image: returning all-background tissue mask")
        return TissueMask(w, h, np.zeros((h, w), dtype=bool), 255, degenerate=True)
    return TissueMask(w, h, magenta > t, t)


# ---------------------------------------------------------------------------
# patch grid


@dataclass
class PatchGrid:
    width: int
    height: int
    patch_size: int
    stride: int
    nx: int
    ny: int
    positions: list[tuple[int, int]]          # row-major (x, y) top-left corners
    tissue_fraction: np.ndarray               # aligned with positions
    kept: list[tuple[int, int]]

    def center(self, x: int, y: int) -> tuple[float, float]:
        half = self.patch_size / 2.0
        return (x + half, y + half)


def patch_count_along(dim: int, patch_size: int, stride: int) -> int:
    if dim < patch_size:
        return 0
    return (dim - patch_size) // stride + 1


def _grid_positions(width: int, height: int, patch_size: int, stride: int):
    nx = patch_count_along(width, patch_size, stride)
    ny = patch_count_along(height, patch_size, stride)
    positions = [(x * stride, y * stride) for y in range(ny) for x in range(nx)]
    return nx, ny, positions


def patch_lattice(width: int, height: int, patch_size: int, stride: int) -> PatchGrid:
    """Full patch lattice with every position kept (no tissue filtering)."""
    _check_patch_params(patch_size, stride)
    nx, ny, positions = _grid_positions(width, height, patch_size, stride)
    return PatchGrid(width, height, patch_size, stride, nx, ny, positions,
                     np.ones(len(positions)), list(positions))


def extract_patch_grid(dims: tuple[int, int], mask: TissueMask,
                       patch_size: int = 512, stride: int = 256,
                       min_fraction: float = 0.2) -> PatchGrid:
    """Row-major patch positions with per-window tissue fractions.

    Windows whose tissue fraction falls below ``min_fraction`` are excluded
    from ``kept``. An image smaller than the patch yields an empty grid.
    """
    _check_patch_params(patch_size, stride)
    if not (0.0 <= min_fraction <= 1.0):
        raise ValidationError("min_fraction must be in [0, 1]")
    width, height = dims
    if (mask.width, mask.height) != (width, height):
        raise ValidationError("mask dimensions do not match the slide dimensions")
    nx, ny, positions = _grid_positions(width, height, patch_size, stride)
    if not positions:
        return PatchGrid(width, height, patch_size, stride, nx, ny, [],
                         np.zeros(0), [])
    ii = np.zeros((height + 1, width + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask.bits, axis=0), axis=1, out=ii[1:, 1:])
    xs = np.array([p[0] for p in positions])
    ys = np.array([p[1] for p in positions])
    p = patch_size
    window = ii[ys + p, xs + p] - ii[ys, xs + p] - ii[ys + p, xs] + ii[ys, xs]
    frac = window / float(p * p)
    kept = [pos for pos, f in zip(positions, frac) if f >= min_fraction]
    return PatchGrid(width, height, patch_size, stride, nx, ny, positions, frac, kept)


def _check_patch_params(patch_size: int, stride: int) -> None:
    if not (patch_size >= stride >= 1):
        raise ValidationError("need patch_size >= stride >= 1")

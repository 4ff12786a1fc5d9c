"""Image I/O, noise synthesis, and the patch pipeline.

Images travel as 8-bit binary PGM (P5) / PPM (P6) buffers on disk and as
float arrays in [0, 1] with channel-first layout (c, h, w) in memory. Noise
is additive white Gaussian with sigma quoted on the 0-255 scale; noisy
training tensors are deliberately not clamped, the additive model is exact
and clamping happens only at image write-out.

All operations are pure given their seed; per-item sub-seeds are derived
deterministically so work may be parallelized without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64


class DataError(ValueError):
    """Malformed image data or a pipeline precondition violation."""


@dataclass
class ImageBuffer:
    """Decoded 8-bit raster image; pixels are (height, width, channels) uint8."""

    height: int
    width: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise DataError(f"channels must be 1 or 3, got {self.channels}")
        expected = (self.height, self.width, self.channels)
        if self.pixels.shape != expected or self.pixels.dtype != np.uint8:
            raise DataError(
                f"pixel array must be uint8 {expected}, got "
                f"{self.pixels.dtype} {self.pixels.shape}"
            )


@dataclass
class NoiseSpec:
    """Additive white Gaussian noise level on the 0-255 scale, plus its seed."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise DataError(f"sigma must be non-negative, got {self.sigma}")


@dataclass
class PatchSet:
    """Aligned (clean, noisy) float patch pairs, each (channels, p, p) in [0, 1]."""

    clean: list = field(default_factory=list)
    noisy: list = field(default_factory=list)
    patch_size: int = 0

    def __len__(self):
        return len(self.clean)


# ---------------------------------------------------------------------------
# PNM codec (binary P5 / P6, maxval 255)
# ---------------------------------------------------------------------------

_WHITESPACE = b" \t\n\r\x0b\x0c"


def read_pnm(data: bytes) -> ImageBuffer:
    """Decode a binary PGM (P5) or PPM (P6) with maxval 255."""
    magic = bytes(data[:2])
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise DataError(f"bad magic {magic!r}, expected P5 or P6")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise DataError("truncated header")
        ch = data[pos:pos + 1]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise DataError(f"unexpected header byte {ch!r}")
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise DataError("missing whitespace after header")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise DataError(f"bad dimensions {width}x{height}")
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise DataError(
            f"truncated pixel data: expected {need} bytes, found {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer(height, width, channels, pixels.copy())


def write_pnm(img: ImageBuffer) -> bytes:
    """Encode to binary PNM; inverse of read_pnm, bit-exact on round trip."""
    magic = "P5" if img.channels == 1 else "P6"
    header = f"{magic} {img.width} {img.height} 255\n".encode("ascii")
    return header + img.pixels.tobytes()


# ---------------------------------------------------------------------------
# float conversion
# ---------------------------------------------------------------------------


def to_float(img: ImageBuffer) -> np.ndarray:
    """(h, w, c) uint8 -> (c, h, w) float32 in [0, 1]."""
    return np.ascontiguousarray(img.pixels.transpose(2, 0, 1)).astype(np.float32) / 255.0


def from_float(arr: np.ndarray) -> ImageBuffer:
    """(c, h, w) floats -> 8-bit buffer; clamps to [0, 1], rounds half up."""
    if arr.ndim != 3:
        raise DataError(f"expected (c, h, w), got shape {arr.shape}")
    clamped = np.clip(arr, 0.0, 1.0)
    q = np.floor(clamped * 255.0 + 0.5).astype(np.uint8)
    c, h, w = q.shape
    return ImageBuffer(h, w, c, np.ascontiguousarray(q.transpose(1, 2, 0)))


# ---------------------------------------------------------------------------
# noise model
# ---------------------------------------------------------------------------


def add_awgn(clean: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """clean + N(0, (sigma/255)^2) per element, unclamped."""
    if spec.sigma == 0:
        return clean.copy()
    noise = SplitMix64(spec.seed).gaussian(clean.size, 0.0, spec.sigma / 255.0)
    return (clean + noise.reshape(clean.shape).astype(clean.dtype)).astype(clean.dtype)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def gen_synthetic(count: int, size: int, seed: int, channels: int = 1) -> list[ImageBuffer]:
    """Procedural images mixing gradients, sinusoids, and hard-edged rectangles.

    Denoisers trained on these must preserve both smooth content and edges.
    Deterministic for a fixed seed.
    """
    if size < 16:
        raise DataError(f"size must be >= 16, got {size}")
    images = []
    base = SplitMix64(seed)
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij"
    )
    for i in range(count):
        rng = base.spawn(i)
        img = np.zeros((size, size, channels), dtype=np.float64)
        for c in range(channels):
            u = rng.uniform(4)
            canvas = (u[0] * 2 - 1) * xx + (u[1] * 2 - 1) * yy + u[2]
            # two frequency bands guarantee texture at multiple scales
            for lo, hi in ((1.5, 4.0), (5.0, 9.0)):
                w = rng.uniform(4)
                freq = lo + (hi - lo) * w[0]
                angle = w[1] * np.pi
                phase = w[2] * 2 * np.pi
                amp = 0.25 + 0.5 * w[3]
                proj = np.cos(angle) * xx + np.sin(angle) * yy
                canvas = canvas + amp * np.sin(2 * np.pi * freq * proj + phase)
            for _ in range(2 + rng.randint(3)):
                r = rng.uniform(5)
                y0, y1 = sorted((int(r[0] * size), int(r[1] * size)))
                x0, x1 = sorted((int(r[2] * size), int(r[3] * size)))
                canvas[y0:y1 + 1, x0:x1 + 1] += (r[4] * 2 - 1) * 0.8
            img[:, :, c] = canvas
        lo, hi = img.min(), img.max()
        scaled = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
        pixels = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
        images.append(ImageBuffer(size, size, channels, pixels))
    return images


# ---------------------------------------------------------------------------
# patch pipeline
# ---------------------------------------------------------------------------


def _grid_positions(h: int, w: int, patch: int, stride: int):
    return [(y, x) for y in range(0, h - patch + 1, stride)
            for x in range(0, w - patch + 1, stride)]


def extract_patches(
    images: list[ImageBuffer],
    patch_size: int,
    stride: int,
    seed: int,
    noise: NoiseSpec,
    count: int | None = None,
) -> PatchSet:
    """Grid patches at the given stride, truncated or topped up with random
    offsets to reach ``count``; each clean patch is paired with independently
    noised copy (per-patch sub-seed)."""
    arrays = [to_float(img) for img in images]
    for a in arrays:
        if a.shape[1] < patch_size or a.shape[2] < patch_size:
            raise DataError(
                f"image {a.shape[1]}x{a.shape[2]} smaller than patch {patch_size}"
            )
    clean = []
    for a in arrays:
        for y, x in _grid_positions(a.shape[1], a.shape[2], patch_size, stride):
            clean.append(np.ascontiguousarray(a[:, y:y + patch_size, x:x + patch_size]))
    if count is not None:
        if len(clean) > count:
            clean = clean[:count]
        rng = SplitMix64(seed)
        while len(clean) < count:
            a = arrays[rng.randint(len(arrays))]
            y = rng.randint(a.shape[1] - patch_size + 1)
            x = rng.randint(a.shape[2] - patch_size + 1)
            clean.append(np.ascontiguousarray(a[:, y:y + patch_size, x:x + patch_size]))
    noise_base = SplitMix64(noise.seed)
    noisy = [
        add_awgn(c, NoiseSpec(noise.sigma, noise_base.spawn_seed(i)))
        for i, c in enumerate(clean)
    ]
    return PatchSet(clean, noisy, patch_size)


def extract_paired_patches(
    clean_images: list[ImageBuffer],
    noisy_images: list[ImageBuffer],
    patch_size: int,
    stride: int,
    seed: int,
    count: int | None = None,
) -> PatchSet:
    """Aligned patch pairs from already-paired clean/noisy images."""
    if len(clean_images) != len(noisy_images):
        raise DataError("clean/noisy image lists must pair one-to-one")
    cleans, noisys = [], []
    pairs = [(to_float(c), to_float(n)) for c, n in zip(clean_images, noisy_images)]
    for c, n in pairs:
        if c.shape != n.shape:
            raise DataError(f"paired images disagree in shape: {c.shape} vs {n.shape}")
        if c.shape[1] < patch_size or c.shape[2] < patch_size:
            raise DataError("image smaller than patch")
        for y, x in _grid_positions(c.shape[1], c.shape[2], patch_size, stride):
            cleans.append(np.ascontiguousarray(c[:, y:y + patch_size, x:x + patch_size]))
            noisys.append(np.ascontiguousarray(n[:, y:y + patch_size, x:x + patch_size]))
    if count is not None:
        if len(cleans) > count:
            cleans, noisys = cleans[:count], noisys[:count]
        rng = SplitMix64(seed)
        while len(cleans) < count:
            idx = rng.randint(len(pairs))
            c, n = pairs[idx]
            y = rng.randint(c.shape[1] - patch_size + 1)
            x = rng.randint(c.shape[2] - patch_size + 1)
            cleans.append(np.ascontiguousarray(c[:, y:y + patch_size, x:x + patch_size]))
            noisys.append(np.ascontiguousarray(n[:, y:y + patch_size, x:x + patch_size]))
    return PatchSet(cleans, noisys, patch_size)


def augment(clean: np.ndarray, noisy: np.ndarray, seed: int):
    """One uniform quarter-turn applied identically to both pair members."""
    if clean.shape[-1] != clean.shape[-2]:
        raise DataError(f"augment requires square patches, got {clean.shape}")
    k = SplitMix64(seed).randint(4)
    if k == 0:
        return clean, noisy
    return (
        np.ascontiguousarray(np.rot90(clean, k, axes=(-2, -1))),
        np.ascontiguousarray(np.rot90(noisy, k, axes=(-2, -1))),
    )


def batch_iter(patchset: PatchSet, batch_size: int, seed: int):
    """Yield (clean, noisy) batches of shape (b, c, p, p); one epoch-level
    shuffle by seed, every patch exactly once, final short batch included."""
    n = len(patchset)
    if n == 0:
        raise DataError("empty patch set")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = SplitMix64(seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield (
            np.stack([patchset.clean[i] for i in idx]),
            np.stack([patchset.noisy[i] for i in idx]),
        )

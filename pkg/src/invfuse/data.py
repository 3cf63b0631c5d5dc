"""Synthetic two-modality image pairs, PGM file I/O, and dataset splitting.

A pair shares one anatomy (a handful of anisotropic Gaussian blobs on a
dark background) but the two modalities render complementary blob subsets
at high intensity: every blob is bright in exactly one modality and faint
in the other, so each image carries features the other lacks and fusion /
decomposition are non-trivial.

Files travel as binary 8-bit PGM (P5): ``P5``, whitespace, width, height,
maxval, single whitespace byte, then raw row-major samples.  Writing is
always 8-bit (maxval 255, round-half-to-even); reading accepts any maxval
up to 65535 (two-byte samples are big-endian, as PGM specifies).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ImageIOError


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    size: int = 64
    min_blobs: int = 3
    max_blobs: int = 8
    background: float = 0.05
    faint_contrast: float = 0.25  # brightness of a blob in its "other" modality

    def __post_init__(self):
        if self.size < 16 or self.size % 2 != 0:
            raise ConfigError(f"size must be even and >= 16, got {self.size}")
        if not 1 <= self.min_blobs <= self.max_blobs:
            raise ConfigError(
                f"need 1 <= min_blobs <= max_blobs, got {self.min_blobs}..{self.max_blobs}")
        if not 0.0 <= self.background < 1.0:
            raise ConfigError(f"background must be in [0,1), got {self.background}")
        if not 0.0 <= self.faint_contrast < 1.0:
            raise ConfigError(
                f"faint_contrast must be in [0,1), got {self.faint_contrast}")


@dataclass(frozen=True)
class Blob:
    row: float
    col: float
    sigma_major: float
    sigma_minor: float
    angle: float
    amplitude: float
    in_first: bool  # bright in modality 1 (else bright in modality 2)


@dataclass
class ImagePair:
    id: str
    x1: np.ndarray
    x2: np.ndarray

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        self.x2 = np.asarray(self.x2, dtype=np.float64)
        if self.x1.ndim != 2 or self.x1.shape != self.x2.shape:
            raise ConfigError(
                f"pair images must be 2-d with equal shapes, "
                f"got {self.x1.shape} and {self.x2.shape}")
        for name, arr in (("x1", self.x1), ("x2", self.x2)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ConfigError(f"{name} values outside [0,1]")


def blob_layout(cfg: SynthConfig, index: int) -> list[Blob]:
    """Deterministic blob geometry and modality assignment for pair `index`.

    The first two blobs are pinned to opposite modalities so neither subset
    is ever empty; the rest flip fair coins.
    """
    # entropy stream 2 is reserved for data (0: model init, 1: permutations)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2, index)))
    n = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
    blobs = []
    for i in range(n):
        row, col = rng.uniform(0.15, 0.85, size=2) * cfg.size
        sig_a, sig_b = np.sort(rng.uniform(0.04, 0.12, size=2))[::-1] * cfg.size
        angle = float(rng.uniform(0.0, math.pi))
        amp = float(rng.uniform(0.5, 1.0))
        if i < 2:
            in_first = i == 0
        else:
            in_first = bool(rng.integers(0, 2))
        blobs.append(Blob(float(row), float(col), float(sig_a), float(sig_b),
                          angle, amp, in_first))
    return blobs


def _blob_mask(blob: Blob, size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dr = rows - blob.row
    dc = cols - blob.col
    c, s = math.cos(blob.angle), math.sin(blob.angle)
    major = c * dr + s * dc
    minor = -s * dr + c * dc
    return np.exp(-0.5 * ((major / blob.sigma_major) ** 2
                          + (minor / blob.sigma_minor) ** 2))


def synth_pair(cfg: SynthConfig, index: int) -> ImagePair:
    x1 = np.full((cfg.size, cfg.size), cfg.background)
    x2 = np.full((cfg.size, cfg.size), cfg.background)
    for blob in blob_layout(cfg, index):
        bump = blob.amplitude * _blob_mask(blob, cfg.size)
        if blob.in_first:
            x1 += bump
            x2 += cfg.faint_contrast * bump
        else:
            x1 += cfg.faint_contrast * bump
            x2 += bump
    return ImagePair(id=f"synth-{cfg.seed}-{index:05d}",
                     x1=np.clip(x1, 0.0, 1.0), x2=np.clip(x2, 0.0, 1.0))


def synth_dataset(cfg: SynthConfig, count: int) -> list[ImagePair]:
    return [synth_pair(cfg, i) for i in range(count)]


def dataset_split(pairs, train_fraction: float, seed: int):
    """Seeded shuffle, then split into (train, val); both sides nonempty."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0,1), got {train_fraction}")
    if len(pairs) < 2:
        raise ConfigError(f"need at least 2 pairs to split, got {len(pairs)}")
    order = np.random.default_rng(np.random.SeedSequence((seed, 3))).permutation(len(pairs))
    n_train = int(round(train_fraction * len(pairs)))
    n_train = min(max(n_train, 1), len(pairs) - 1)
    shuffled = [pairs[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


# ---------------------------------------------------------------------------
# PGM (P5) files
# ---------------------------------------------------------------------------

def save_grayscale(img, path) -> None:
    """Write a [0,1] image as 8-bit binary PGM, rounding half to even."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ImageIOError(f"can only save non-empty 2-d images, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ImageIOError("image values must be finite and in [0,1]")
    data = np.rint(arr * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pgm_tokens(raw: bytes, count: int):
    """First `count` whitespace-separated header tokens after the magic,
    skipping '#' comment lines; returns (tokens, offset past the single
    whitespace byte that terminates the header)."""
    tokens = []
    pos = 2  # past "P5"
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise ImageIOError("truncated header")
        tokens.append(raw[start:pos])
        pos += 1 if len(tokens) == count else 0  # single whitespace after maxval
    return tokens, pos


def load_grayscale(path) -> np.ndarray:
    """Read a binary PGM into a float64 HxW array scaled to [0,1]."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as err:
        raise ImageIOError(f"cannot read {path}: {err}") from None
    if raw[:2] == b"P6":
        raise ImageIOError(f"{path}: P6 is multi-channel; expected grayscale P5")
    if raw[:2] != b"P5":
        raise ImageIOError(f"{path}: not a binary PGM (bad magic {raw[:2]!r})")
    try:
        (w_tok, h_tok, max_tok), offset = _read_pgm_tokens(raw, 3)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (ValueError, ImageIOError) as err:
        raise ImageIOError(f"{path}: bad PGM header ({err})") from None
    if width <= 0 or height <= 0:
        raise ImageIOError(f"{path}: zero-size image {width}x{height}")
    if not 0 < maxval < 65536:
        raise ImageIOError(f"{path}: maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * dtype.itemsize
    body = raw[offset:offset + need]
    if len(body) < need:
        raise ImageIOError(f"{path}: truncated pixel data "
                           f"({len(body)} of {need} bytes)")
    samples = np.frombuffer(body, dtype=dtype).astype(np.float64)
    return (samples / maxval).reshape(height, width)

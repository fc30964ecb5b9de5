"""QR code carrier: symbol encoding/decoding, rendering and scan simulation.

Module grids use 0 for black and 1 for white.  Only versions 5-8 at error
correction level H are supported.  Encoding always uses data mask 0 so the
same message yields the same symbol; decoding reads the mask from the format
information and accepts any of the eight masks.

Image tensors are float tensors shaped ``(3, H, W)`` or ``(B, 3, H, W)`` with
values in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import reedsolo
import torch
import torch.nn.functional as F

from .errors import CapacityExceeded, ShapeMismatch, UnsupportedVersion, FormatError

SUPPORTED_VERSIONS = (5, 6, 7, 8)
ECC_LEVEL = "H"

# (ec codewords per block, [(block count, data codewords per block), ...]) for level H
_BLOCKS_H = {
    5: (22, [(2, 11), (2, 12)]),
    6: (28, [(4, 15)]),
    7: (26, [(4, 13), (1, 14)]),
    8: (26, [(4, 14), (2, 15)]),
}
_ALIGNMENT = {5: [6, 30], 6: [6, 34], 7: [6, 22, 38], 8: [6, 24, 42]}
_ECL_FORMAT_BITS = {"L": 1, "M": 0, "Q": 3, "H": 2}

ALPHANUMERIC = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ $%*+-./:"
_ALNUM_INDEX = {c: i for i, c in enumerate(ALPHANUMERIC)}
_MODE_NUMERIC, _MODE_ALNUM, _MODE_BYTE = 0b0001, 0b0010, 0b0100
# character count field widths for versions 1-9
_COUNT_BITS = {_MODE_NUMERIC: 10, _MODE_ALNUM: 9, _MODE_BYTE: 8}

# a real reader locates finders by run-length ratios; we accept a finder when
# at most this many of its 49 core modules are wrong
FINDER_TOLERANCE = 12

ImageLike = torch.Tensor


def side_for_version(version: int) -> int:
    _check_version(version)
    return 37 + 4 * (version - 5)


def version_for_side(n: int) -> int:
    if n < 37 or (n - 37) % 4:
        raise UnsupportedVersion(f"no supported version has {n} modules per side")
    version = 5 + (n - 37) // 4
    _check_version(version)
    return version


def _check_version(version: int) -> None:
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersion(f"version {version} outside {SUPPORTED_VERSIONS[0]}-{SUPPORTED_VERSIONS[-1]}")


@dataclass(frozen=True, eq=False)
class ModuleMatrix:
    """Binary n x n module grid of a version 5-8, level H QR symbol."""

    modules: np.ndarray
    version: int
    ecc_level: str = ECC_LEVEL

    def __post_init__(self):
        mods = np.asarray(self.modules).astype(np.uint8)
        n = side_for_version(self.version)
        if mods.shape != (n, n):
            raise ShapeMismatch(f"version {self.version} needs a {n}x{n} grid, got {mods.shape}")
        if mods.size and mods.max() > 1:
            raise ValueError("module values must be 0 or 1")
        object.__setattr__(self, "modules", mods)

    @property
    def n(self) -> int:
        return self.modules.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ModuleMatrix):
            return NotImplemented
        return (self.version, self.ecc_level) == (other.version, other.ecc_level) and np.array_equal(
            self.modules, other.modules
        )

    def copy(self, modules: Optional[np.ndarray] = None) -> "ModuleMatrix":
        return ModuleMatrix(self.modules.copy() if modules is None else modules, self.version, self.ecc_level)

    def to_text(self) -> str:
        header = f"QRv{self.version} ECC-{self.ecc_level} n={self.n}"
        rows = ["".join(str(int(v)) for v in row) for row in self.modules]
        return "\n".join([header, *rows]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModuleMatrix":
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not lines:
            raise FormatError("empty module grid text")
        try:
            tag, ecc, size = lines[0].split()
            version = int(tag.removeprefix("QRv"))
            n = int(size.removeprefix("n="))
        except ValueError as exc:
            raise FormatError(f"bad header line {lines[0]!r}") from exc
        if ecc != f"ECC-{ECC_LEVEL}" or not tag.startswith("QRv") or not size.startswith("n="):
            raise FormatError(f"bad header line {lines[0]!r}")
        rows = lines[1:]
        if len(rows) != n or any(len(r) != n or set(r) - {"0", "1"} for r in rows):
            raise FormatError("grid body does not match header size")
        return cls(np.array([[int(c) for c in r] for r in rows], dtype=np.uint8), version)


# ---------------------------------------------------------------------------
# symbol layout


@lru_cache(maxsize=None)
def _function_mask(version: int) -> np.ndarray:
    """Boolean grid marking modules that carry no codeword bits."""
    n = side_for_version(version)
    func = np.zeros((n, n), dtype=bool)
    func[6, :] = True
    func[:, 6] = True
    for r, c in ((0, 0), (0, n - 8), (n - 8, 0)):
        func[r : r + 8, c : c + 8] = True
    for r, c in _alignment_centres(version):
        func[r - 2 : r + 3, c - 2 : c + 3] = True
    # format information (both copies) and the dark module
    func[8, :9] = True
    func[:9, 8] = True
    func[8, n - 8 :] = True
    func[n - 8 :, 8] = True
    if version >= 7:
        func[: 6, n - 11 : n - 8] = True
        func[n - 11 : n - 8, : 6] = True
    return func


def _alignment_centres(version: int) -> list:
    pos = _ALIGNMENT[version]
    last = len(pos) - 1
    out = []
    for i, r in enumerate(pos):
        for j, c in enumerate(pos):
            if (i, j) in ((0, 0), (0, last), (last, 0)):
                continue
            out.append((r, c))
    return out


def _finder_pattern() -> np.ndarray:
    d = np.maximum(np.abs(np.arange(-3, 4))[:, None], np.abs(np.arange(-3, 4))[None, :])
    return d != 2  # dark except the ring at distance 2


def _draw_function_patterns(dark: np.ndarray, version: int) -> None:
    n = dark.shape[0]
    idx = np.arange(n)
    dark[6, :] = idx % 2 == 0
    dark[:, 6] = idx % 2 == 0
    finder = _finder_pattern()
    for r, c in ((0, 0), (0, n - 7), (n - 7, 0)):
        dark[r : r + 7, c : c + 7] = finder
    # separators
    dark[7, :8] = dark[:8, 7] = False
    dark[7, n - 8 :] = dark[:8, n - 8] = False
    dark[n - 8, :8] = dark[n - 8 :, 7] = False
    for r, c in _alignment_centres(version):
        d = np.maximum(np.abs(np.arange(-2, 3))[:, None], np.abs(np.arange(-2, 3))[None, :])
        dark[r - 2 : r + 3, c - 2 : c + 3] = d != 1
    if version >= 7:
        bits = _version_bits(version)
        for i in range(18):
            a, b = n - 11 + i % 3, i // 3
            dark[b, a] = dark[a, b] = (bits >> i) & 1


def _version_bits(version: int) -> int:
    rem = version
    for _ in range(12):
        rem = (rem << 1) ^ ((rem >> 11) * 0x1F25)
    return version << 12 | rem


def _format_bits(ecc_level: str, mask: int) -> int:
    data = _ECL_FORMAT_BITS[ecc_level] << 3 | mask
    rem = data
    for _ in range(10):
        rem = (rem << 1) ^ ((rem >> 9) * 0x537)
    return (data << 10 | rem) ^ 0x5412


def _format_positions(n: int):
    """(row, col) coordinates of the 15 format bits, both copies, LSB first."""
    first = [(i, 8) for i in range(6)] + [(7, 8), (8, 8), (8, 7)] + [(8, 14 - i) for i in range(9, 15)]
    second = [(8, n - 1 - i) for i in range(8)] + [(n - 15 + i, 8) for i in range(8, 15)]
    return first, second


def _draw_format(dark: np.ndarray, ecc_level: str, mask: int) -> None:
    n = dark.shape[0]
    bits = _format_bits(ecc_level, mask)
    for copy in _format_positions(n):
        for i, (r, c) in enumerate(copy):
            dark[r, c] = (bits >> i) & 1
    dark[n - 8, 8] = True


def _zigzag(version: int):
    """Yield (row, col) of codeword modules in placement order."""
    n = side_for_version(version)
    func = _function_mask(version)
    right = n - 1
    while right >= 1:
        if right == 6:
            right = 5
        upward = ((right + 1) & 2) == 0
        for vert in range(n):
            row = n - 1 - vert if upward else vert
            for j in range(2):
                col = right - j
                if not func[row, col]:
                    yield row, col
        right -= 2


_MASKS = (
    lambda r, c: (r + c) % 2 == 0,
    lambda r, c: r % 2 == 0,
    lambda r, c: c % 3 == 0,
    lambda r, c: (r + c) % 3 == 0,
    lambda r, c: (r // 2 + c // 3) % 2 == 0,
    lambda r, c: (r * c) % 2 + (r * c) % 3 == 0,
    lambda r, c: ((r * c) % 2 + (r * c) % 3) % 2 == 0,
    lambda r, c: ((r + c) % 2 + (r * c) % 3) % 2 == 0,
)


@lru_cache(maxsize=None)
def _mask_grid(version: int, mask: int) -> np.ndarray:
    n = side_for_version(version)
    r, c = np.indices((n, n))
    return _MASKS[mask](r, c) & ~_function_mask(version)


# ---------------------------------------------------------------------------
# codewords


@lru_cache(maxsize=None)
def _rs(nsym: int) -> reedsolo.RSCodec:
    return reedsolo.RSCodec(nsym, nsize=255, fcr=0, prim=0x11D, generator=2)


def _block_layout(version: int):
    ec, groups = _BLOCKS_H[version]
    return ec, [k for count, k in groups for _ in range(count)]


def data_capacity_bits(version: int) -> int:
    _check_version(version)
    _, sizes = _block_layout(version)
    return 8 * sum(sizes)


def max_payload(version: int, mode: str = "byte") -> int:
    """Largest message length (characters) that fits ``version`` at level H."""
    bits = data_capacity_bits(version) - 4
    if mode == "byte":
        return (bits - _COUNT_BITS[_MODE_BYTE]) // 8
    if mode == "alphanumeric":
        bits -= _COUNT_BITS[_MODE_ALNUM]
        return 2 * (bits // 11) + (1 if bits % 11 >= 6 else 0)
    raise ValueError(f"unknown mode {mode!r}")


def _segment_bits(message: bytes, mode: str) -> list:
    bits: list = []

    def put(value, width):
        bits.extend((value >> (width - 1 - i)) & 1 for i in range(width))

    if not message:
        return bits
    if mode == "alphanumeric":
        put(_MODE_ALNUM, 4)
        put(len(message), _COUNT_BITS[_MODE_ALNUM])
        for i in range(0, len(message) - 1, 2):
            put(_ALNUM_INDEX[message[i]] * 45 + _ALNUM_INDEX[message[i + 1]], 11)
        if len(message) % 2:
            put(_ALNUM_INDEX[message[-1]], 6)
    else:
        put(_MODE_BYTE, 4)
        put(len(message), _COUNT_BITS[_MODE_BYTE])
        for b in message:
            put(b, 8)
    return bits


def _pick_mode(message: bytes, mode: Optional[str]) -> str:
    if mode is None:
        return "alphanumeric" if message and all(b in _ALNUM_INDEX for b in message) else "byte"
    if mode not in ("byte", "alphanumeric"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "alphanumeric" and any(b not in _ALNUM_INDEX for b in message):
        raise ValueError("message has characters outside the alphanumeric set")
    return mode


def encode_message(message: Union[bytes, str], version: int = 5, mode: Optional[str] = None) -> ModuleMatrix:
    """Encode ``message`` into a level-H symbol of the given version.

    ``mode=None`` picks alphanumeric mode when every character belongs to the
    45-character QR alphanumeric set and byte mode otherwise.  The data mask is
    always pattern 0.
    """
    _check_version(version)
    if isinstance(message, str):
        message = message.encode("utf-8")
    mode = _pick_mode(message, mode)
    capacity = data_capacity_bits(version)
    bits = _segment_bits(message, mode)
    if len(bits) > capacity:
        raise CapacityExceeded(
            f"{len(message)}-char {mode} message needs {len(bits)} bits; version {version}-H holds {capacity}"
        )
    bits += [0] * min(4, capacity - len(bits))
    bits += [0] * (-len(bits) % 8)
    data = bytearray(int("".join(map(str, bits[i : i + 8])), 2) for i in range(0, len(bits), 8))
    pad = (0xEC, 0x11)
    while len(data) < capacity // 8:
        data.append(pad[(len(data) - len(bits) // 8) % 2])

    ec, sizes = _block_layout(version)
    blocks, pos = [], 0
    for k in sizes:
        blocks.append(bytes(_rs(ec).encode(bytes(data[pos : pos + k]))))
        pos += k
    codewords = bytearray()
    for i in range(max(sizes)):
        codewords.extend(b[i] for b, k in zip(blocks, sizes) if i < k)
    for i in range(ec):
        codewords.extend(b[k + i] for b, k in zip(blocks, sizes))

    n = side_for_version(version)
    dark = np.zeros((n, n), dtype=bool)
    _draw_function_patterns(dark, version)
    stream = np.unpackbits(np.frombuffer(bytes(codewords), dtype=np.uint8))
    for (r, c), bit in zip(_zigzag(version), stream):
        dark[r, c] = bool(bit)
    dark ^= _mask_grid(version, 0)
    _draw_format(dark, ECC_LEVEL, 0)
    return ModuleMatrix((~dark).astype(np.uint8), version)


def _read_format(dark: np.ndarray):
    n = dark.shape[0]
    best = (16, None)
    for copy in _format_positions(n):
        word = sum(int(dark[r, c]) << i for i, (r, c) in enumerate(copy))
        for ecl in _ECL_FORMAT_BITS:
            for mask in range(8):
                dist = bin(word ^ _format_bits(ecl, mask)).count("1")
                if dist < best[0]:
                    best = (dist, (ecl, mask))
    return best[1] if best[0] <= 3 else None


def _finders_ok(dark: np.ndarray) -> bool:
    n = dark.shape[0]
    finder = _finder_pattern()
    for r, c in ((0, 0), (0, n - 7), (n - 7, 0)):
        if np.count_nonzero(dark[r : r + 7, c : c + 7] != finder) > FINDER_TOLERANCE:
            return False
    return True


class _BitReader:
    def __init__(self, data: bytes):
        self.bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        self.pos = 0

    def remaining(self) -> int:
        return len(self.bits) - self.pos

    def take(self, width: int) -> int:
        if width > self.remaining():
            raise EOFError
        chunk = self.bits[self.pos : self.pos + width]
        self.pos += width
        return int("".join(map(str, chunk)) or "0", 2)


def _parse_segments(data: bytes) -> Optional[bytes]:
    reader = _BitReader(data)
    out = bytearray()
    try:
        while reader.remaining() >= 4:
            mode = reader.take(4)
            if mode == 0:
                break
            if mode not in _COUNT_BITS:
                return None
            count = reader.take(_COUNT_BITS[mode])
            if mode == _MODE_BYTE:
                out.extend(reader.take(8) for _ in range(count))
            elif mode == _MODE_ALNUM:
                for _ in range(count // 2):
                    v = reader.take(11)
                    if v >= 45 * 45:
                        return None
                    out.extend((ALPHANUMERIC[v // 45], ALPHANUMERIC[v % 45]))
                if count % 2:
                    v = reader.take(6)
                    if v >= 45:
                        return None
                    out.append(ALPHANUMERIC[v])
            else:
                for width, digits in [(10, 3)] * (count // 3) + [((0, 4, 7)[count % 3], count % 3)]:
                    if digits == 0:
                        continue
                    v = reader.take(width)
                    if v >= 10**digits:
                        return None
                    out.extend(str(v).zfill(digits).encode())
    except EOFError:
        return None
    return bytes(out)


def decode_matrix(mm: Union[ModuleMatrix, np.ndarray]) -> Optional[bytes]:
    """Recover the message from a module grid, or ``None`` if it is unreadable.

    Never raises on corrupt input.
    """
    try:
        grid = mm.modules if isinstance(mm, ModuleMatrix) else np.asarray(mm)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            return None
        version = version_for_side(grid.shape[0])
        dark = np.asarray(grid) == 0
        if not _finders_ok(dark):
            return None
        fmt = _read_format(dark)
        if fmt is None or fmt[0] != ECC_LEVEL:
            return None
        dark = dark ^ _mask_grid(version, fmt[1])
        ec, sizes = _block_layout(version)
        total = sum(sizes) + ec * len(sizes)
        stream = [dark[r, c] for r, c in _zigzag(version)][: total * 8]
        codewords = np.packbits(np.array(stream, dtype=np.uint8)).tolist()

        blocks = [[] for _ in sizes]
        it = iter(codewords)
        for i in range(max(sizes)):
            for b, k in enumerate(sizes):
                if i < k:
                    blocks[b].append(next(it))
        for _ in range(ec):
            for b in range(len(sizes)):
                blocks[b].append(next(it))
        data = bytearray()
        for block in blocks:
            msg, _, _ = _rs(ec).decode(bytearray(block))
            data.extend(msg)
        return _parse_segments(bytes(data))
    except (reedsolo.ReedSolomonError, UnsupportedVersion, ValueError, IndexError, StopIteration):
        return None


# ---------------------------------------------------------------------------
# images


def resize_nearest(img: torch.Tensor, size: int) -> torch.Tensor:
    """Centre-aligned nearest-neighbour resize of a square image."""
    if img.shape[-1] == size and img.shape[-2] == size:
        return img
    lead = 4 - img.dim()
    x = img[(None,) * lead]
    x = F.interpolate(x, size=(size, size), mode="nearest-exact")
    return x[(0,) * lead]


def render(mm: ModuleMatrix, module_px: int = 5, out_size: Optional[int] = None) -> torch.Tensor:
    """Render ``mm`` as a 3-channel image (black 0.0, white 1.0).

    The symbol is drawn at ``module_px`` pixels per module and then resampled
    with nearest-neighbour interpolation to ``out_size`` if given.
    """
    if module_px < 1:
        raise ValueError("module_px must be >= 1")
    native = mm.n * module_px
    if out_size is None:
        out_size = native
    if out_size < mm.n:
        raise ValueError(f"out_size {out_size} is smaller than the module count {mm.n}")
    grid = torch.from_numpy(mm.modules.astype(np.float32))
    img = grid.repeat_interleave(module_px, 0).repeat_interleave(module_px, 1)
    return resize_nearest(img.expand(3, native, native).contiguous(), out_size)


@lru_cache(maxsize=None)
def _gaussian_kernel_np(kernel_size: int) -> np.ndarray:
    sigma = kernel_size / 4
    ax = np.arange(kernel_size) - (kernel_size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_kernel(kernel_size: int = 5, dtype=torch.float32) -> torch.Tensor:
    """Normalised 2-D Gaussian with sigma = kernel_size / 4."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be a positive odd integer")
    return torch.tensor(_gaussian_kernel_np(kernel_size), dtype=dtype)


def _luminance(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img.unsqueeze(0)
    if img.dim() == 3:
        return img.mean(0, keepdim=True)
    if img.dim() == 4:
        return img.mean(1)
    raise ShapeMismatch(f"expected an image tensor, got shape {tuple(img.shape)}")


def scan_simulate(img: torch.Tensor, kernel_size: int = 5) -> torch.Tensor:
    """Gaussian-weighted per-module sample of a native-scale symbol image.

    The image side must equal ``kernel_size * n``.  Returns an ``(n, n)`` map
    (``(B, n, n)`` for batched input).  Differentiable in the pixels.
    """
    lum = _luminance(img)
    h, w = lum.shape[-2:]
    if h != w or h % kernel_size:
        raise ShapeMismatch(f"image side {h}x{w} is not a multiple of kernel size {kernel_size}")
    kernel = gaussian_kernel(kernel_size, dtype=lum.dtype).to(lum.device)
    out = F.conv2d(lum.unsqueeze(1), kernel[None, None], stride=kernel_size)[:, 0]
    return out if img.dim() == 4 else out[0]


def binarize(scan: torch.Tensor, k: float = 0.02) -> torch.Tensor:
    """1 (white) where the sample is strictly above ``k``, else 0 (black)."""
    return (scan > k).to(torch.uint8)


def to_native(img: torch.Tensor, n: int, kernel_size: int = 5) -> torch.Tensor:
    return resize_nearest(img, n * kernel_size)


def read_modules(
    img: torch.Tensor, version: int, kernel_size: int = 5, threshold: float = 0.5
) -> ModuleMatrix:
    """Resample ``img`` to native scale, scan it and binarize into a module grid."""
    n = side_for_version(version)
    grid = binarize(scan_simulate(to_native(img.detach(), n, kernel_size), kernel_size), threshold)
    return ModuleMatrix(grid.cpu().numpy(), version)


def parse(img: torch.Tensor, version: int, kernel_size: int = 5) -> ModuleMatrix:
    """Exact inverse of :func:`render` for clean renders."""
    return read_modules(img, version, kernel_size, threshold=0.5)


def error_map(
    transformed: torch.Tensor, original: ModuleMatrix, k: float = 0.02, kernel_size: int = 5
) -> torch.Tensor:
    """1 where the binarized scan of ``transformed`` disagrees with ``original``."""
    native = to_native(transformed.detach(), original.n, kernel_size)
    read = binarize(scan_simulate(native, kernel_size), k)
    truth = torch.from_numpy(original.modules).to(read.device)
    return (read != truth).to(torch.uint8)


def _grid(x) -> np.ndarray:
    if isinstance(x, ModuleMatrix):
        return x.modules
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def emr(decoded, truth) -> float:
    """Error module rate in percent over all n x n modules."""
    a, b = _grid(decoded), _grid(truth)
    if a.shape != b.shape:
        raise ShapeMismatch(f"grid shapes differ: {a.shape} vs {b.shape}")
    return 100.0 * np.count_nonzero(a != b) / a.size


def tra(decode_results: Iterable) -> float:
    """Mean of per-code success indicators."""
    flags = [1.0 if bool(f) else 0.0 for f in decode_results]
    if not flags:
        raise ValueError("tra needs at least one result")
    return sum(flags) / len(flags)


def recovered(decoded: Optional[bytes], truth: Union[bytes, str]) -> bool:
    if isinstance(truth, str):
        truth = truth.encode("utf-8")
    return decoded is not None and decoded == truth


def save_png(mm: ModuleMatrix, path: Union[str, Path], module_px: int = 5) -> None:
    from PIL import Image

    img = (mm.modules.repeat(module_px, 0).repeat(module_px, 1) * 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def load_png(path: Union[str, Path], version: int, module_px: int = 5) -> ModuleMatrix:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    if arr.shape != (side_for_version(version) * module_px,) * 2:
        raise ShapeMismatch(f"PNG is {arr.shape}, expected native size for version {version}")
    # centre sampling works for any pixel pitch, odd or even
    return read_modules(torch.from_numpy(arr), version, kernel_size=1)

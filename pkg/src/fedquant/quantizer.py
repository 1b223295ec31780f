"""Low-bit quantizers for exchanging model vectors over a narrow link.

Two quantizer families are implemented:

* ``PIPELINE`` -- the classic fixed-point chain: scale up by a gain ``G``,
  round to an integer, clamp to the two's-complement range
  ``[-2^(B-1), 2^(B-1)-1]``, scale down by ``G``.  Rounding is either nearest
  (half always rounds up) or stochastic (unbiased).
* ``SYMMETRIC`` -- a uniform grid of ``2^B`` codepoints on ``[-M, +M]`` with
  stochastic rounding between the two bracketing codepoints.  On its domain it
  is exactly unbiased with per-coordinate variance at most ``(M/(2^B-1))^2``;
  inputs outside ``[-M, M]`` are an error because clamping would bias it.

A special enhanced one-bit mode maps a scalar to ``+/-1/G`` directly; its
stochastic variant uses ``Pr[+1] = clip((w + 1/G) / (2/G), 0, 1)``, which is
the symmetric two-point grid with saturating probabilities.

Codewords are integers and the dequantized value is always
``codeword / gain``.  Pipeline codewords live in ``[-2^(B-1), 2^(B-1)-1]``;
symmetric-grid and one-bit codewords are the odd integers
``{-(2^B-1), ..., 2^B-1}`` (2^B values, so still B bits of information).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

__all__ = [
    "Rounding",
    "Structure",
    "GridKind",
    "QuantizerSpec",
    "GridSpec",
    "QuantizedVector",
    "GridRangeError",
    "round_nearest",
    "round_stochastic",
    "clamp_limit",
    "quantize_pipeline",
    "quantize_grid_sr",
    "grid_distribution",
    "grid_moments",
    "one_bit_plus_probability",
    "quantize_one_bit",
    "quantize_vector",
    "differential_gain",
    "layered_gains",
    "magnitude_percentile",
    "expected_sq_error",
    "serialize",
    "deserialize",
    "wire_bits",
    "float_bits",
    "HEADER_BYTES",
]

HEADER_BYTES = 17  # bits: 1 byte, gain: 8-byte double, length: 8-byte unsigned
FLOAT_BITS_PER_COORD = 32


class Rounding(Enum):
    NEAREST = "nearest"
    STOCHASTIC = "stochastic"


class Structure(Enum):
    """Gain structure: native fixes G = 2^(B-1); tuned allows any G > 0."""

    NATIVE = "native"
    TUNED = "tuned"


class GridKind(Enum):
    PIPELINE = "pipeline"
    SYMMETRIC = "symmetric"


class GridRangeError(ValueError):
    """Input magnitude exceeds the symmetric grid's range bound."""


def _require_finite(x: float) -> None:
    if not math.isfinite(x):
        raise ValueError(f"non-finite input: {x!r}")


@dataclass(frozen=True)
class QuantizerSpec:
    """Full description of one quantizer configuration.

    ``range_bound`` is set only for symmetric-grid specs and holds the exact
    grid half-range M; ``gain`` then equals (2^bits - 1) / M up to rounding.
    """

    bits: int
    gain: float
    structure: Structure = Structure.TUNED
    rounding: Rounding = Rounding.STOCHASTIC
    grid: GridKind = GridKind.PIPELINE
    one_bit_enhanced: bool = False
    range_bound: float | None = None

    def __post_init__(self) -> None:
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if not (self.gain > 0 and math.isfinite(self.gain)):
            raise ValueError("gain must be a positive finite real")
        if self.structure is Structure.NATIVE and self.gain != 2.0 ** (self.bits - 1):
            raise ValueError("native structure requires gain == 2^(bits-1)")
        if self.one_bit_enhanced and self.bits != 1:
            raise ValueError("enhanced one-bit mode requires bits == 1")
        if self.grid is GridKind.SYMMETRIC:
            if self.rounding is not Rounding.STOCHASTIC:
                raise ValueError("symmetric grid supports stochastic rounding only")
            if self.range_bound is None or not self.range_bound > 0:
                raise ValueError("symmetric grid requires a positive range_bound")

    @classmethod
    def native(cls, bits: int, rounding: Rounding = Rounding.STOCHASTIC,
               one_bit_enhanced: bool = False) -> "QuantizerSpec":
        return cls(bits=bits, gain=2.0 ** (bits - 1), structure=Structure.NATIVE,
                   rounding=rounding, one_bit_enhanced=one_bit_enhanced)

    @classmethod
    def tuned(cls, bits: int, gain: float, rounding: Rounding = Rounding.STOCHASTIC,
              one_bit_enhanced: bool = False) -> "QuantizerSpec":
        return cls(bits=bits, gain=gain, rounding=rounding,
                   one_bit_enhanced=one_bit_enhanced)

    @classmethod
    def symmetric_grid(cls, range_bound: float, bits: int) -> "QuantizerSpec":
        gain = (2.0 ** bits - 1.0) / range_bound
        return cls(bits=bits, gain=gain, grid=GridKind.SYMMETRIC,
                   range_bound=range_bound)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid of 2^bits codepoints on [-range_bound, +range_bound]."""

    range_bound: float
    bits: int

    def __post_init__(self) -> None:
        if not (self.range_bound > 0 and math.isfinite(self.range_bound)):
            raise ValueError("range_bound must be a positive finite real")
        if self.bits < 1:
            raise ValueError("bits must be >= 1")

    @property
    def step(self) -> float:
        """Spacing between adjacent codepoints, 2M/(2^B - 1)."""
        return 2.0 * self.half_step

    @property
    def half_step(self) -> float:
        return self.range_bound / (2.0 ** self.bits - 1.0)

    def codepoints(self) -> np.ndarray:
        codes = np.arange(2 ** self.bits, dtype=np.int64) * 2 - (2 ** self.bits - 1)
        return codes * self.half_step


@dataclass(frozen=True)
class QuantizedVector:
    """Integer codewords plus the gain needed to dequantize them."""

    codewords: np.ndarray
    gain: float
    bits: int
    grid: GridKind = GridKind.PIPELINE

    def __post_init__(self) -> None:
        object.__setattr__(self, "codewords", np.asarray(self.codewords, dtype=np.int64))
        if self.codewords.ndim != 1:
            raise ValueError("codewords must be one-dimensional")
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if self.grid is GridKind.PIPELINE:
            lo, hi = -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
            if self.codewords.size and not (
                self.codewords.min() >= lo and self.codewords.max() <= hi
            ):
                raise ValueError(f"pipeline codewords outside [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return int(self.codewords.size)

    def dequantize(self) -> np.ndarray:
        return self.codewords / self.gain


# ---------------------------------------------------------------------------
# Scalar operations
# ---------------------------------------------------------------------------

def round_nearest(x: float) -> int:
    """Round to the nearest integer; a fractional part of exactly 0.5 rounds up."""
    _require_finite(x)
    floor = math.floor(x)
    return floor if x - floor < 0.5 else floor + 1


def round_stochastic(x: float, rng: np.random.Generator) -> int:
    """Round to floor(x) or floor(x)+1 with probability proportional to proximity.

    The expectation over the rounding randomness equals x.
    """
    _require_finite(x)
    floor = math.floor(x)
    frac = x - floor
    return floor + (1 if rng.random() < frac else 0)


def clamp_limit(r: int, bits: int) -> int:
    """Limit an integer to the signed range of ``bits`` bits."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return min(max(int(r), lo), hi)


def quantize_pipeline(
    w: float, spec: QuantizerSpec, rng: np.random.Generator | None = None
) -> tuple[int, float]:
    """Run one scalar through scale-up, rounding, limit, scale-down.

    Returns (codeword, dequantized value).
    """
    if spec.grid is not GridKind.PIPELINE:
        raise ValueError("quantize_pipeline requires a pipeline-grid spec")
    _require_finite(w)
    amplified = w * spec.gain
    if spec.rounding is Rounding.NEAREST:
        rounded = round_nearest(amplified)
    else:
        if rng is None:
            raise ValueError("stochastic rounding requires an rng")
        rounded = round_stochastic(amplified, rng)
    code = clamp_limit(rounded, spec.bits)
    return code, code / spec.gain


def grid_distribution(w: float, grid: GridSpec) -> tuple[int, int, float]:
    """Return (lo_code, hi_code, prob_hi) for stochastic rounding of ``w``.

    Codes are the odd-integer codewords; values are ``code * grid.half_step``.
    """
    _require_finite(w)
    if abs(w) > grid.range_bound:
        raise GridRangeError(
            f"|{w}| exceeds grid range bound {grid.range_bound}"
        )
    q = grid.half_step
    n_cells = 2 ** grid.bits - 1
    j0 = int(math.floor((w + grid.range_bound) / (2.0 * q)))
    j0 = min(max(j0, 0), n_cells - 1)
    lo_code = 2 * j0 - n_cells
    p_hi = (w - lo_code * q) / (2.0 * q)
    p_hi = min(max(p_hi, 0.0), 1.0)
    return lo_code, lo_code + 2, p_hi


def grid_moments(w: float, grid: GridSpec) -> tuple[float, float]:
    """Analytic mean and variance of stochastic rounding on the grid.

    Computed by enumerating the two possible outcomes with their
    probabilities.  The variance never exceeds ``grid.half_step ** 2``.
    """
    lo_code, _, p_hi = grid_distribution(w, grid)
    q = grid.half_step
    mean = lo_code * q + p_hi * (2.0 * q)
    var = (2.0 * q) ** 2 * (p_hi * (1.0 - p_hi))
    return mean, var


def quantize_grid_sr(w: float, grid: GridSpec, rng: np.random.Generator) -> float:
    """Stochastically round ``w`` to one of the two bracketing codepoints."""
    lo_code, hi_code, p_hi = grid_distribution(w, grid)
    code = hi_code if rng.random() < p_hi else lo_code
    return code * grid.half_step


def one_bit_plus_probability(w: float, gain: float) -> float:
    """Probability of emitting +1 in enhanced one-bit stochastic rounding."""
    inv = 1.0 / gain
    return min(1.0, max(0.0, (w + inv) / (2.0 * inv)))


def quantize_one_bit(
    w: float, gain: float, rounding: Rounding, rng: np.random.Generator | None = None
) -> float:
    """Enhanced one-bit quantizer: emit +1/gain or -1/gain directly."""
    _require_finite(w)
    if not gain > 0:
        raise ValueError("gain must be positive")
    if rounding is Rounding.NEAREST:
        return (1.0 if w >= 0 else -1.0) / gain
    if rng is None:
        raise ValueError("stochastic rounding requires an rng")
    pr = one_bit_plus_probability(w, gain)
    return (1.0 if rng.random() < pr else -1.0) / gain


# ---------------------------------------------------------------------------
# Vector operations
# ---------------------------------------------------------------------------

def quantize_vector(
    v: np.ndarray, spec: QuantizerSpec, rng: np.random.Generator | None = None
) -> QuantizedVector:
    """Quantize coordinate-wise with independent randomness per coordinate.

    The random draws are consumed in coordinate order, so the output is
    bit-identical for a given rng state regardless of how callers batch work.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a one-dimensional vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite coordinate in input vector")
    if rng is None and (spec.rounding is Rounding.STOCHASTIC
                        or spec.grid is GridKind.SYMMETRIC):
        raise ValueError("stochastic rounding requires an rng")

    if spec.one_bit_enhanced:
        if spec.rounding is Rounding.NEAREST:
            codes = np.where(v >= 0, 1, -1).astype(np.int64)
        else:
            inv = 1.0 / spec.gain
            pr = np.clip((v + inv) / (2.0 * inv), 0.0, 1.0)
            codes = np.where(rng.random(v.size) < pr, 1, -1).astype(np.int64)
        return QuantizedVector(codes, spec.gain, 1, GridKind.SYMMETRIC)

    if spec.grid is GridKind.SYMMETRIC:
        m = spec.range_bound
        if v.size and np.max(np.abs(v)) > m:
            raise GridRangeError(
                f"vector max magnitude {np.max(np.abs(v))} exceeds range bound {m}"
            )
        q = m / (2.0 ** spec.bits - 1.0)
        n_cells = 2 ** spec.bits - 1
        j0 = np.floor((v + m) / (2.0 * q)).astype(np.int64)
        np.clip(j0, 0, n_cells - 1, out=j0)
        lo_codes = 2 * j0 - n_cells
        p_hi = np.clip((v - lo_codes * q) / (2.0 * q), 0.0, 1.0)
        take_hi = rng.random(v.size) < p_hi
        codes = lo_codes + 2 * take_hi.astype(np.int64)
        return QuantizedVector(codes, spec.gain, spec.bits, GridKind.SYMMETRIC)

    amplified = v * spec.gain
    floors = np.floor(amplified)
    frac = amplified - floors
    if spec.rounding is Rounding.NEAREST:
        rounded = floors + (frac >= 0.5)
    else:
        rounded = floors + (rng.random(v.size) < frac)
    lo, hi = -(2 ** (spec.bits - 1)), 2 ** (spec.bits - 1) - 1
    codes = np.clip(rounded, lo, hi).astype(np.int64)
    return QuantizedVector(codes, spec.gain, spec.bits, GridKind.PIPELINE)


def differential_gain(d_vec: np.ndarray, bits: int) -> float:
    """Gain 2^(bits-1) / max|d| that maps the vector onto the full signed range.

    An all-zero vector (lossless under any gain) falls back to 2^(bits-1) so
    runs stay deterministic.  The returned gain is nudged by at most one ulp
    so that ``gain * max|d|`` reproduces 2^(bits-1) exactly when IEEE
    arithmetic permits.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1")
    d_vec = np.asarray(d_vec, dtype=np.float64)
    m = float(np.max(np.abs(d_vec))) if d_vec.size else 0.0
    target = 2.0 ** (bits - 1)
    if m == 0.0:
        return target
    g = target / m
    if g * m != target:
        for candidate in (math.nextafter(g, math.inf), math.nextafter(g, -math.inf)):
            if candidate * m == target:
                return candidate
    return g


def magnitude_percentile(values: np.ndarray, fraction: float = 0.9) -> float:
    """Empirical-CDF percentile of |values|: the entry at index ceil(f*n)-1
    of the ascending sort (a fixed rule, no interpolation)."""
    mags = np.sort(np.abs(np.asarray(values, dtype=np.float64)))
    if mags.size == 0:
        raise ValueError("empty value set")
    idx = max(math.ceil(fraction * mags.size) - 1, 0)
    return float(mags[idx])


_MIN_MAGNITUDE = 2.0 ** -30  # stand-in percentile for an all-zero layer
_MAX_EXTRA_EXP = 30


def layered_gains(
    values: np.ndarray, layers: Sequence[tuple[int, int]], bits: int
) -> tuple[float, np.ndarray]:
    """Per-layer gain split G = G_b * G_e.

    The base gain ``G_b = 2^(bits-1)`` is shared by all layers; each layer's
    extra gain is ``G_e = 2^rho`` with ``rho = floor(log2(1/alpha))`` and
    ``alpha`` the 90th-percentile weight magnitude of that layer.  ``rho`` is
    capped at 30 to keep gains bounded on (nearly) all-zero layers.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    base = 2.0 ** (bits - 1)
    extras = np.empty(len(layers), dtype=np.float64)
    for i, (start, stop) in enumerate(layers):
        if stop <= start:
            raise ValueError(f"empty layer range [{start}, {stop})")
        alpha = magnitude_percentile(values[start:stop])
        if alpha <= 0.0:
            alpha = _MIN_MAGNITUDE
        rho = min(math.floor(math.log2(1.0 / alpha)), _MAX_EXTRA_EXP)
        extras[i] = 2.0 ** rho
    return base, extras


def expected_sq_error(v: np.ndarray, spec: QuantizerSpec) -> float:
    """Total expected squared quantization error, summed over coordinates.

    Enumerates each coordinate's outcome distribution analytically (after
    clamping, for the pipeline family), so the result is deterministic.
    """
    v = np.asarray(v, dtype=np.float64)

    if spec.one_bit_enhanced:
        inv = 1.0 / spec.gain
        pr = np.clip((v + inv) / (2.0 * inv), 0.0, 1.0)
        return float(np.sum(pr * (inv - v) ** 2 + (1.0 - pr) * (-inv - v) ** 2))

    if spec.grid is GridKind.SYMMETRIC:
        grid = GridSpec(spec.range_bound, spec.bits)
        total = 0.0
        for w in v:
            mean, var = grid_moments(float(w), grid)
            total += var + (mean - w) ** 2
        return float(total)

    g = spec.gain
    lo, hi = -(2 ** (spec.bits - 1)), 2 ** (spec.bits - 1) - 1
    amplified = v * g
    floors = np.floor(amplified)
    frac = amplified - floors
    lo_vals = np.clip(floors, lo, hi) / g
    hi_vals = np.clip(floors + 1, lo, hi) / g
    if spec.rounding is Rounding.NEAREST:
        chosen = np.where(frac >= 0.5, hi_vals, lo_vals)
        return float(np.sum((chosen - v) ** 2))
    return float(np.sum((1.0 - frac) * (lo_vals - v) ** 2 + frac * (hi_vals - v) ** 2))


# ---------------------------------------------------------------------------
# Wire format (byte-count accounting and golden files only)
# ---------------------------------------------------------------------------

def wire_bits(dim: int, bits: int) -> int:
    """Accounted link cost of one quantized vector: payload plus gain header."""
    return dim * bits + HEADER_BYTES * 8


def float_bits(dim: int) -> int:
    """Accounted link cost of one unquantized float32 vector."""
    return dim * FLOAT_BITS_PER_COORD


def _code_width(bits: int) -> int:
    return (bits + 7) // 8


def serialize(qv: QuantizedVector) -> bytes:
    """Encode little-endian: header (bits, gain, dim) then packed codewords.

    Each codeword is stored as a signed integer of the minimal byte width
    covering ``bits`` bits.  Symmetric-grid codewords ``c`` are odd; they are
    stored as ``(c - 1) / 2``, which spans exactly the signed ``bits``-bit
    range, and widened back on read.
    """
    header = struct.pack("<BdQ", qv.bits, qv.gain, qv.dim)
    width = _code_width(qv.bits)
    if qv.grid is GridKind.SYMMETRIC:
        transport = (qv.codewords - 1) // 2
    else:
        transport = qv.codewords
    body = b"".join(int(c).to_bytes(width, "little", signed=True) for c in transport)
    return header + body


def deserialize(data: bytes, grid: GridKind = GridKind.PIPELINE) -> QuantizedVector:
    """Inverse of :func:`serialize`; the caller supplies the grid family."""
    bits, gain, dim = struct.unpack_from("<BdQ", data, 0)
    width = _code_width(bits)
    offset = struct.calcsize("<BdQ")
    expected = offset + dim * width
    if len(data) != expected:
        raise ValueError(f"expected {expected} bytes, got {len(data)}")
    transport = np.array(
        [
            int.from_bytes(data[offset + i * width: offset + (i + 1) * width],
                           "little", signed=True)
            for i in range(dim)
        ],
        dtype=np.int64,
    )
    codes = transport * 2 + 1 if grid is GridKind.SYMMETRIC else transport
    return QuantizedVector(codes, gain, bits, grid)

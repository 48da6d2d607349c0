"""Synthetic phantoms and low-dose / ring-artifact degradation of sinograms."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError, ValidationError
from .volume import ImageVolume, ProjectionVolume, RandomSource, as_array

DEFAULT_I0 = 2.5e5
DEFAULT_SIGMA_E2 = 10.0
DEFAULT_DOSE_LEVELS = (0.25, 0.10)
COUNT_FLOOR = 0.5

# Modified Shepp-Logan: x0, y0, semi-axis a (x), semi-axis b (y), angle deg, value.
SHEPP_LOGAN = np.array(
    [
        [0.0, 0.0, 0.69, 0.92, 0.0, 1.0],
        [0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8],
        [0.22, 0.0, 0.11, 0.31, -18.0, -0.2],
        [-0.22, 0.0, 0.16, 0.41, 18.0, -0.2],
        [0.0, 0.35, 0.21, 0.25, 0.0, 0.1],
        [0.0, 0.1, 0.046, 0.046, 0.0, 0.1],
        [0.0, -0.1, 0.046, 0.046, 0.0, 0.1],
        [-0.08, -0.605, 0.046, 0.023, 0.0, 0.1],
        [0.0, -0.606, 0.023, 0.023, 0.0, 0.1],
        [0.06, -0.605, 0.023, 0.046, 0.0, 0.1],
    ]
)

SLICES_PER_UNIT = 32

PHANTOM_KINDS = ("shepp_logan", "ellipsoid_stack", "resolution_bars")


def _grid(shape, supersample):
    h, w = shape
    ss = supersample
    # sub-sample centers in normalized [-1, 1] coordinates, y pointing up
    ys = ((np.arange(h * ss) + 0.5) / (h * ss)) * 2 - 1
    xs = ((np.arange(w * ss) + 0.5) / (w * ss)) * 2 - 1
    return xs[None, :], -ys[:, None]


def _render_ellipses(params, shape, supersample):
    x, y = _grid(shape, supersample)
    img = np.zeros((y.shape[0], x.shape[1]))
    for x0, y0, a, b, phi, val in params:
        c, s = math.cos(math.radians(phi)), math.sin(math.radians(phi))
        dx, dy = x - x0, y - y0
        u = (dx * c + dy * s) / a
        v = (-dx * s + dy * c) / b
        img[u * u + v * v <= 1.0] += val
    h, w = shape
    ss = supersample
    return img.reshape(h, ss, w, ss).mean(axis=(1, 3))


def _shepp_logan_slice_params(t, z_variation):
    """Ellipse table for relative slice position t in [-1, 1]."""
    p = SHEPP_LOGAN.copy()
    # skull shrinks slightly toward the ends, inner structures drift and breathe
    p[:2, 2:4] *= 1 - 0.004 * z_variation * math.sin(0.5 * np.pi * t) ** 2
    phase = np.arange(p.shape[0] - 2)
    p[2:, 1] += 0.01 * z_variation * math.sin(0.5 * np.pi * t)
    p[2:, 2:4] *= (1 + 0.06 * z_variation * np.sin(np.pi * t + phase))[:, None]
    return p


def _ellipsoid_stack_params(t, z_variation, base):
    p = base.copy()
    p[:, 2:4] *= (1 + 0.05 * z_variation * np.cos(np.pi * t + np.arange(len(p))))[:, None]
    p[:, 0] += 0.01 * z_variation * math.sin(0.5 * np.pi * t)
    return p


def _bars_slice(shape, supersample, shift):
    x, y = _grid(shape, supersample)
    img = np.where(x * x + y * y <= 0.85**2, 0.2, 0.0) + 0 * y
    widths = [1, 2, 3, 4, 6, 8]
    h, w = shape
    ypos = -0.6
    for k, wpx in enumerate(widths):
        period = 2 * wpx * 2.0 / w
        x0 = -0.6 + (k % 3) * 0.42
        y0 = ypos + (k // 3) * 0.6 + shift
        inside_box = (x >= x0) & (x < x0 + 5 * period) & (y >= y0) & (y < y0 + 0.45)
        bars = np.floor((x - x0) / period * 2) % 2 == 0
        img = np.where(inside_box & bars, 0.6, img)
    return img.reshape(h, supersample, w, supersample).mean(axis=(1, 3))


def make_phantom(kind, dims, rng: Optional[RandomSource] = None, z_variation=1.0, supersample=4) -> ImageVolume:
    """Render a (D, H, W) phantom with values in [0, 1].

    Slices vary smoothly along z; ``z_variation=0`` gives identical slices.
    Edges are anti-aliased by ``supersample``-fold supersampling.
    """
    kind = kind.replace("-", "_")
    if kind not in PHANTOM_KINDS:
        raise ParameterError(f"unknown phantom kind {kind!r}")
    d, h, w = (int(x) for x in dims)
    if min(d, h, w) < 1:
        raise ParameterError(f"phantom dims must be positive, got {dims}")
    # fixed step per slice, so the slice-to-slice change does not grow for short stacks
    ts = (np.arange(d) - (d - 1) / 2) / SLICES_PER_UNIT
    out = np.empty((d, h, w))
    if kind == "shepp_logan":
        for z, t in enumerate(ts):
            out[z] = _render_ellipses(_shepp_logan_slice_params(t, z_variation), (h, w), supersample)
    elif kind == "ellipsoid_stack":
        gen = (rng or RandomSource(0)).generator()
        n = 8
        base = np.empty((n + 1, 6))
        base[0] = [0, 0, 0.8, 0.7, 0, 0.2]
        r = 0.5 * np.sqrt(gen.random(n))
        ang = gen.random(n) * 2 * np.pi
        base[1:, 0] = r * np.cos(ang)
        base[1:, 1] = r * np.sin(ang)
        base[1:, 2:4] = gen.uniform(0.04, 0.2, (n, 2))
        base[1:, 4] = gen.uniform(0, 180, n)
        base[1:, 5] = gen.uniform(-0.15, 0.6, n)
        for z, t in enumerate(ts):
            out[z] = _render_ellipses(_ellipsoid_stack_params(t, z_variation, base), (h, w), supersample)
    else:
        for z, t in enumerate(ts):
            out[z] = _bars_slice((h, w), supersample, 0.01 * z_variation * math.sin(0.5 * np.pi * t))
    out = np.clip(out, 0.0, None)
    peak = out.max()
    if peak > 0:
        out /= peak
    return ImageVolume(out.astype(np.float32))


@dataclass(frozen=True)
class NoiseModel:
    i0: float = DEFAULT_I0
    sigma_e2: float = DEFAULT_SIGMA_E2
    dose_fraction: float = 1.0

    def __post_init__(self):
        if not self.i0 > 0:
            raise ParameterError("i0 must be positive")
        if self.sigma_e2 < 0:
            raise ParameterError("sigma_e2 must be nonnegative")
        if not 0 < self.dose_fraction <= 1:
            raise ParameterError("dose_fraction must lie in (0, 1]")

    @property
    def effective_i0(self) -> float:
        return self.dose_fraction * self.i0


def _check_clean(data):
    if np.any(data < -1e-6):
        raise ValidationError("clean line integrals must be nonnegative")


def simulate_counts(p, nm: NoiseModel, rng: RandomSource) -> np.ndarray:
    """Detected counts (float64) for clean post-log data ``p``.

    Poisson photon statistics plus Gaussian electronic noise. Slice ``z``
    draws from ``rng.child(z)`` so the result does not depend on how slices
    are scheduled.
    """
    data = np.asarray(as_array(p), dtype=np.float64)
    _check_clean(data)
    squeeze = data.ndim < 3
    data3 = data.reshape((1,) * (3 - data.ndim) + data.shape) if squeeze else data
    counts = np.empty_like(data3)
    sigma = math.sqrt(nm.sigma_e2)
    for z in range(data3.shape[0]):
        gen = rng.child(z).generator()
        mean = nm.effective_i0 * np.exp(-data3[z])
        counts[z] = gen.poisson(mean)
        if sigma > 0:
            counts[z] += gen.normal(0.0, sigma, size=mean.shape)
    return counts.reshape(data.shape)


def counts_to_post_log(counts, nm: NoiseModel) -> np.ndarray:
    return -np.log(np.maximum(counts, COUNT_FLOOR) / nm.effective_i0)


def inject_low_dose(p: ProjectionVolume, nm: NoiseModel, rng: RandomSource) -> ProjectionVolume:
    counts = simulate_counts(p, nm, rng)
    return p.replace_data(counts_to_post_log(counts, nm).astype(np.float32))


@dataclass(frozen=True)
class RingSpec:
    """Per-detector gain errors as (center column, gain, width) triples."""

    columns: Tuple[Tuple[int, float, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        cols = tuple((int(c), float(g), int(w)) for c, g, w in self.columns)
        for c, g, w in cols:
            if g <= 0:
                raise ParameterError(f"ring gain must be positive, got {g}")
            if w < 1:
                raise ParameterError(f"ring width must be >= 1, got {w}")
        object.__setattr__(self, "columns", cols)

    @staticmethod
    def span(column, width) -> range:
        start = column - width // 2
        return range(start, start + width)

    def offsets(self, detector_count) -> np.ndarray:
        """Additive post-log offset for every detector column."""
        off = np.zeros(detector_count)
        for c, g, w in self.columns:
            cols = self.span(c, w)
            if cols.start < 0 or cols.stop > detector_count:
                raise ParameterError(f"ring at column {c} (width {w}) falls outside {detector_count} detectors")
            off[cols.start : cols.stop] -= math.log(g)
        return off

    def to_json(self) -> list:
        return [{"column": c, "gain": g, "width": w} for c, g, w in self.columns]

    @classmethod
    def from_json(cls, obj) -> "RingSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(tuple((e["column"], e["gain"], e.get("width", 1)) for e in obj))


def inject_rings(p: ProjectionVolume, spec: RingSpec) -> ProjectionVolume:
    """Constant detector-gain errors: ``p - ln(gain)`` on the affected columns."""
    off = spec.offsets(p.dims[2])
    return p.replace_data((p.data.astype(np.float64) + off[None, None, :]).astype(np.float32))


def remove_rings(p: ProjectionVolume, spec: RingSpec) -> ProjectionVolume:
    off = spec.offsets(p.dims[2])
    return p.replace_data((p.data.astype(np.float64) - off[None, None, :]).astype(np.float32))


def ring_radius_mm(geometry, column: int) -> float:
    """Distance from the rotation center of the rays read by ``column``."""
    if geometry.mode == "parallel":
        return abs(float(geometry.detector_positions()[column]))
    return abs(geometry.source_to_center * math.sin(geometry.fan_angles()[column]))

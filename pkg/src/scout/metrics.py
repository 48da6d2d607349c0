"""Image quality metrics (PSNR, SSIM, RMSE), per-volume reports and a ring score."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .volume import as_array

IDENTICAL = "identical"
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(ref, test):
    a = np.asarray(as_array(ref), dtype=np.float64)
    b = np.asarray(as_array(test), dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ParameterError("empty image")
    return a, b


def rmse(ref, test) -> float:
    a, b = _pair(ref, test)
    d = a - b
    return math.sqrt(float(np.mean(d * d)))


def psnr(ref, test, max_i: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical.

    ``max_i`` defaults to the maximum of ``ref``.
    """
    a, b = _pair(ref, test)
    if max_i is None:
        max_i = float(a.max())
    if not max_i > 0:
        raise ParameterError(f"max_i must be positive, got {max_i}")
    d = a - b
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_i * max_i / mse)


def _gauss_kernel():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filt(img, k):
    # separable Gaussian; only windows lying fully inside the image are kept
    out = ndimage.correlate1d(img, k, axis=0, mode="constant")
    out = ndimage.correlate1d(out, k, axis=1, mode="constant")
    r = len(k) // 2
    return out[r:-r, r:-r]


def ssim(ref, test, data_range: Optional[float] = None) -> float:
    """Mean structural similarity over 11x11 Gaussian (sigma 1.5) windows of a 2D pair."""
    a, b = _pair(ref, test)
    if a.ndim != 2:
        raise ParameterError("ssim expects 2D slices")
    if min(a.shape) < SSIM_WINDOW:
        raise ParameterError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    L = float(a.max() - a.min()) if data_range is None else float(data_range)
    if not L > 0:
        raise ParameterError("data_range must be positive")
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    k = _gauss_kernel()
    mu_a = _filt(a, k)
    mu_b = _filt(b, k)
    var_a = _filt(a * a, k) - mu_a * mu_a
    var_b = _filt(b * b, k) - mu_b * mu_b
    cov = _filt(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _json_num(x):
    return IDENTICAL if math.isinf(x) else x


@dataclass
class QualityReport:
    psnr: List[float]
    ssim: List[float]
    rmse: List[float]
    reference: str = ""
    test: str = ""
    max_i: float = 1.0
    data_range: float = 1.0
    domain: str = "image"

    @staticmethod
    def _stats(vals):
        # identical slices (infinite PSNR) are left out of the aggregate
        arr = np.asarray(vals, dtype=np.float64)
        finite = arr[np.isfinite(arr)]
        if finite.size == 0:
            return math.inf, 0.0
        return float(finite.mean()), float(finite.std())

    @property
    def psnr_mean(self) -> float:
        return self._stats(self.psnr)[0]

    @property
    def ssim_mean(self) -> float:
        return self._stats(self.ssim)[0]

    @property
    def rmse_mean(self) -> float:
        return self._stats(self.rmse)[0]

    def to_json(self) -> dict:
        out = {
            "reference": self.reference,
            "test": self.test,
            "domain": self.domain,
            "max_i": self.max_i,
            "data_range": self.data_range,
            "slices": [
                {"index": i, "psnr": _json_num(p), "ssim": s, "rmse": r}
                for i, (p, s, r) in enumerate(zip(self.psnr, self.ssim, self.rmse))
            ],
        }
        out["identical_slices"] = int(sum(math.isinf(p) for p in self.psnr))
        for name in ("psnr", "ssim", "rmse"):
            mean, std = self._stats(getattr(self, name))
            out[name] = {"mean": _json_num(mean), "std": std}
        return out

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2))
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slice", "psnr", "ssim", "rmse"])
            for i, (p, s, r) in enumerate(zip(self.psnr, self.ssim, self.rmse)):
                w.writerow([i, _json_num(p), repr(s), repr(r)])
        return path


def volume_report(ref, test, max_i: Optional[float] = None, data_range: Optional[float] = None,
                  mask: Optional[np.ndarray] = None, reference: str = "", test_name: str = "",
                  domain: str = "image") -> QualityReport:
    """Per-slice PSNR/SSIM/RMSE with MAX_I and L taken from the whole reference volume.

    ``mask`` (2D, optional) restricts PSNR and RMSE to the selected pixels;
    SSIM always uses the full slice.
    """
    a, b = _pair(ref, test)
    if a.ndim != 3:
        raise ParameterError("volume_report expects 3D volumes")
    if max_i is None:
        max_i = float(a.max())
    if data_range is None:
        data_range = float(a.max() - a.min())
    ps, ss, rs = [], [], []
    for z in range(a.shape[0]):
        ra, tb = a[z], b[z]
        if mask is not None:
            ps.append(psnr(ra[mask], tb[mask], max_i))
            rs.append(rmse(ra[mask], tb[mask]))
        else:
            ps.append(psnr(ra, tb, max_i))
            rs.append(rmse(ra, tb))
        ss.append(ssim(ra, tb, data_range))
    return QualityReport(ps, ss, rs, reference, test_name, max_i, data_range, domain)


def disk_mask(shape, radius_fraction=0.95) -> np.ndarray:
    """Pixels within ``radius_fraction`` of the inscribed circle."""
    h, w = shape
    y = np.arange(h) - (h - 1) / 2
    x = np.arange(w) - (w - 1) / 2
    r = np.hypot(y[:, None], x[None, :])
    return r <= radius_fraction * min(h, w) / 2


def radial_profile(img, pixel_pitch=1.0, bin_width=1.0):
    """Azimuthal mean of a 2D image in rings of ``bin_width`` (same units as pitch)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    y = (np.arange(h) - (h - 1) / 2) * pixel_pitch
    x = (np.arange(w) - (w - 1) / 2) * pixel_pitch
    r = np.hypot(y[:, None], x[None, :])
    idx = np.floor(r / bin_width).astype(np.int64).ravel()
    sums = np.bincount(idx, weights=img.ravel())
    counts = np.bincount(idx)
    centers = (np.arange(len(sums)) + 0.5) * bin_width
    with np.errstate(invalid="ignore", divide="ignore"):
        prof = sums / counts
    return centers, prof


def ring_strength(img, radius, pixel_pitch=1.0, band=6.0, smooth=9) -> float:
    """Standard deviation of the detrended radial profile within ``band`` of ``radius``.

    The profile is detrended with a running median of ``smooth`` bins, so
    anatomy varying slowly with radius cancels and a ring shows up as a
    narrow bump.  Averages over the slices of a 3D input.
    """
    arr = np.asarray(as_array(img), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    vals = []
    for sl in arr:
        centers, prof = radial_profile(sl, pixel_pitch, pixel_pitch)
        ok = np.isfinite(prof)
        centers, prof = centers[ok], prof[ok]
        resid = prof - ndimage.median_filter(prof, size=smooth, mode="nearest")
        sel = np.abs(centers - radius) <= band * pixel_pitch
        if not np.any(sel):
            raise ParameterError(f"ring radius {radius} lies outside the image")
        vals.append(float(np.std(resid[sel])))
    return float(np.mean(vals))

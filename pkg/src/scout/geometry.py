"""Parallel / flat-detector fan-beam geometry, ray-driven projector and FBP.

Image coordinates: pixel ``(r, c)`` has its center at
``x = (c - (W-1)/2) * pitch``, ``y = (r - (H-1)/2) * pitch``.

Every ray is stored as a line ``x cos(theta) + y sin(theta) = s``.  In fan
mode the source sits at ``R_so * (cos b, sin b)`` and the ray with fan angle
``g`` leaves it in direction ``(cos(b+pi+g), sin(b+pi+g))``; with this
orientation the ray ``(b, g)`` and ``(b + pi + 2g, -g)`` are the same line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numba
import numpy as np

from .errors import ParameterError
from .volume import ImageVolume, ProjectionVolume, as_array

DEFAULT_SOURCE_TO_CENTER_MM = 1361.2
DEFAULT_CENTER_TO_DETECTOR_MM = 615.18
DEFAULT_VIEWS = 1440
DEFAULT_DETECTORS = 720

MODES = ("parallel", "fan_flat")


@dataclass(frozen=True)
class ScanGeometry:
    mode: str
    view_count: int
    detector_count: int
    detector_pitch: float
    source_to_center: Optional[float] = None
    center_to_detector: Optional[float] = None
    image_size: Tuple[int, int] = (256, 256)
    pixel_pitch: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.mode not in MODES:
            raise ParameterError(f"unknown geometry mode {self.mode!r}")
        if self.view_count < 2 or self.detector_count < 1:
            raise ParameterError("need at least 2 views and 1 detector")
        if self.detector_pitch <= 0 or self.pixel_pitch <= 0:
            raise ParameterError("pitches must be positive")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ParameterError(f"bad image size {self.image_size}")
        if self.mode == "fan_flat":
            if self.source_to_center is None or self.source_to_center <= 0:
                raise ParameterError("fan mode requires source_to_center > 0")
            if self.center_to_detector is None or self.center_to_detector < 0:
                raise ParameterError("fan mode requires center_to_detector >= 0")
            if self.source_to_center <= self.support_radius:
                raise ParameterError("source lies inside the image support")
            half = math.atan(self.detector_positions()[-1] / self.source_to_detector)
            covered = self.source_to_center * math.sin(half)
            if covered < self.support_radius * (1 - 1e-9):
                raise ParameterError(
                    f"fan covers radius {covered:.2f} mm, image support needs {self.support_radius:.2f} mm"
                )

    @property
    def support_radius(self) -> float:
        """Radius of the disk inscribed in the image grid, in mm."""
        return 0.5 * min(self.image_size) * self.pixel_pitch

    @property
    def source_to_detector(self) -> float:
        return self.source_to_center + self.center_to_detector

    @property
    def view_spacing(self) -> float:
        return 2 * math.pi / self.view_count

    def angles(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.view_count) / self.view_count

    def detector_positions(self) -> np.ndarray:
        i = np.arange(self.detector_count, dtype=np.float64)
        return (i - (self.detector_count - 1) / 2) * self.detector_pitch

    def fan_angles(self) -> np.ndarray:
        if self.mode != "fan_flat":
            raise ParameterError("fan angles only exist in fan mode")
        return np.arctan(self.detector_positions() / self.source_to_detector)

    def ray_lines(self) -> Tuple[np.ndarray, np.ndarray]:
        """Normal angle and signed offset of every ray, each shaped (views, dets)."""
        views = self.angles()[:, None]
        if self.mode == "parallel":
            theta = np.broadcast_to(views, (self.view_count, self.detector_count))
            s = np.broadcast_to(self.detector_positions()[None, :], theta.shape)
            return np.ascontiguousarray(theta), np.ascontiguousarray(s)
        gamma = self.fan_angles()[None, :]
        theta = views + np.pi / 2 + gamma
        s = np.broadcast_to(-self.source_to_center * np.sin(gamma), theta.shape)
        return np.ascontiguousarray(theta), np.ascontiguousarray(s)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "views": self.view_count,
            "dets": self.detector_count,
            "det_pitch_mm": self.detector_pitch,
            "r_so_mm": self.source_to_center,
            "r_cd_mm": self.center_to_detector,
            "img_size": list(self.image_size),
            "px_pitch_mm": self.pixel_pitch,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScanGeometry":
        return cls(
            mode=obj["mode"],
            view_count=int(obj["views"]),
            detector_count=int(obj["dets"]),
            detector_pitch=float(obj["det_pitch_mm"]),
            source_to_center=None if obj.get("r_so_mm") is None else float(obj["r_so_mm"]),
            center_to_detector=None if obj.get("r_cd_mm") is None else float(obj["r_cd_mm"]),
            image_size=tuple(obj["img_size"]),
            pixel_pitch=float(obj["px_pitch_mm"]),
        )


def parallel_geometry(views, dets, image_size=(256, 256), pixel_pitch=1.0, detector_pitch=None):
    """Parallel-beam geometry; the default pitch spreads the detector over the image diagonal."""
    if detector_pitch is None:
        half_diag = 0.5 * math.hypot(*image_size) * pixel_pitch
        detector_pitch = 2 * half_diag / dets
    return ScanGeometry("parallel", views, dets, detector_pitch, image_size=image_size, pixel_pitch=pixel_pitch)


def fan_geometry(
    views=DEFAULT_VIEWS,
    dets=DEFAULT_DETECTORS,
    image_size=(256, 256),
    pixel_pitch=1.0,
    source_to_center=DEFAULT_SOURCE_TO_CENTER_MM,
    center_to_detector=DEFAULT_CENTER_TO_DETECTOR_MM,
    detector_pitch=None,
):
    """Flat-detector fan geometry at the reference distances.

    The default detector pitch makes the fan just cover the circle
    circumscribing the image grid.
    """
    if detector_pitch is None:
        half_diag = 0.5 * math.hypot(*image_size) * pixel_pitch
        half_fan = math.asin(half_diag / source_to_center)
        half_width = (source_to_center + center_to_detector) * math.tan(half_fan)
        detector_pitch = 2 * half_width / (dets - 1)
    return ScanGeometry(
        "fan_flat", views, dets, detector_pitch, source_to_center, center_to_detector, image_size, pixel_pitch
    )


# ---------------------------------------------------------------------------
# kernels; image stacks are laid out (rows, cols, slices) so the slice loop is
# innermost and shares one set of interpolation weights.


@numba.njit(parallel=True, cache=True)
def _project_kernel(img, theta, s, pitch, out):
    nr, nc, nz = img.shape
    nv, nd = theta.shape
    rb = math.sqrt(((nc + 1) * 0.5 * pitch) ** 2 + ((nr + 1) * 0.5 * pitch) ** 2)
    cr = (nr - 1) * 0.5
    cc = (nc - 1) * 0.5
    for j in numba.prange(nv):
        for i in range(nd):
            si = s[j, i]
            if abs(si) >= rb:
                continue
            ct = math.cos(theta[j, i])
            st = math.sin(theta[j, i])
            tmax = math.sqrt(rb * rb - si * si)
            m = int(math.ceil(2.0 * tmax / (0.5 * pitch)))
            dt = 2.0 * tmax / m
            x0 = si * ct
            y0 = si * st
            for k in range(m):
                t = -tmax + (k + 0.5) * dt
                cf = (x0 - t * st) / pitch + cc
                rf = (y0 + t * ct) / pitch + cr
                c0 = int(math.floor(cf))
                r0 = int(math.floor(rf))
                if c0 < -1 or c0 >= nc or r0 < -1 or r0 >= nr:
                    continue
                fc = cf - c0
                fr = rf - r0
                for dr in range(2):
                    rr = r0 + dr
                    if rr < 0 or rr >= nr:
                        continue
                    wr = fr if dr == 1 else 1.0 - fr
                    for dc in range(2):
                        cx = c0 + dc
                        if cx < 0 or cx >= nc:
                            continue
                        w = wr * (fc if dc == 1 else 1.0 - fc) * dt
                        if w == 0.0:
                            continue
                        for z in range(nz):
                            out[j, i, z] += w * img[rr, cx, z]


@numba.njit(cache=True)
def _project_adjoint_kernel(sino, theta, s, pitch, out):
    # Exact transpose of _project_kernel; serial so the scatter has one writer.
    nr, nc, nz = out.shape
    nv, nd = theta.shape
    rb = math.sqrt(((nc + 1) * 0.5 * pitch) ** 2 + ((nr + 1) * 0.5 * pitch) ** 2)
    cr = (nr - 1) * 0.5
    cc = (nc - 1) * 0.5
    for j in range(nv):
        for i in range(nd):
            si = s[j, i]
            if abs(si) >= rb:
                continue
            ct = math.cos(theta[j, i])
            st = math.sin(theta[j, i])
            tmax = math.sqrt(rb * rb - si * si)
            m = int(math.ceil(2.0 * tmax / (0.5 * pitch)))
            dt = 2.0 * tmax / m
            x0 = si * ct
            y0 = si * st
            for k in range(m):
                t = -tmax + (k + 0.5) * dt
                cf = (x0 - t * st) / pitch + cc
                rf = (y0 + t * ct) / pitch + cr
                c0 = int(math.floor(cf))
                r0 = int(math.floor(rf))
                if c0 < -1 or c0 >= nc or r0 < -1 or r0 >= nr:
                    continue
                fc = cf - c0
                fr = rf - r0
                for dr in range(2):
                    rr = r0 + dr
                    if rr < 0 or rr >= nr:
                        continue
                    wr = fr if dr == 1 else 1.0 - fr
                    for dc in range(2):
                        cx = c0 + dc
                        if cx < 0 or cx >= nc:
                            continue
                        w = wr * (fc if dc == 1 else 1.0 - fc) * dt
                        if w == 0.0:
                            continue
                        for z in range(nz):
                            out[rr, cx, z] += w * sino[j, i, z]


@numba.njit(parallel=True, cache=True)
def _backproject_parallel(q, angles, det_pitch, pix_pitch, out):
    nv, nd, nz = q.shape
    nr, nc, _ = out.shape
    cr = (nr - 1) * 0.5
    cc = (nc - 1) * 0.5
    cd = (nd - 1) * 0.5
    cos_a = np.cos(angles)
    sin_a = np.sin(angles)
    for r in numba.prange(nr):
        y = (r - cr) * pix_pitch
        for c in range(nc):
            x = (c - cc) * pix_pitch
            for j in range(nv):
                u = (x * cos_a[j] + y * sin_a[j]) / det_pitch + cd
                i0 = int(math.floor(u))
                if i0 < 0 or i0 + 1 >= nd:
                    continue
                f = u - i0
                for z in range(nz):
                    out[r, c, z] += (1.0 - f) * q[j, i0, z] + f * q[j, i0 + 1, z]


@numba.njit(parallel=True, cache=True)
def _backproject_fan(q, angles, virt_pitch, r_so, pix_pitch, out):
    # q is sampled on a virtual detector through the rotation center.
    nv, nd, nz = q.shape
    nr, nc, _ = out.shape
    cr = (nr - 1) * 0.5
    cc = (nc - 1) * 0.5
    cd = (nd - 1) * 0.5
    cos_a = np.cos(angles)
    sin_a = np.sin(angles)
    for r in numba.prange(nr):
        y = (r - cr) * pix_pitch
        for c in range(nc):
            x = (c - cc) * pix_pitch
            for j in range(nv):
                big_u = r_so - (x * cos_a[j] + y * sin_a[j])
                lateral = x * sin_a[j] - y * cos_a[j]
                u = (r_so * lateral / big_u) / virt_pitch + cd
                i0 = int(math.floor(u))
                if i0 < 0 or i0 + 1 >= nd:
                    continue
                f = u - i0
                w = (r_so * r_so) / (big_u * big_u)
                for z in range(nz):
                    out[r, c, z] += w * ((1.0 - f) * q[j, i0, z] + f * q[j, i0 + 1, z])


# ---------------------------------------------------------------------------


def _check_image(data: np.ndarray, g: ScanGeometry):
    if tuple(data.shape[1:]) != g.image_size:
        raise ParameterError(f"image slices {data.shape[1:]} do not match geometry {g.image_size}")


def project_array(data: np.ndarray, g: ScanGeometry) -> np.ndarray:
    """Float64 line integrals of a (D, rows, cols) stack, returned as (D, views, dets)."""
    data = np.asarray(data, dtype=np.float64)
    _check_image(data, g)
    theta, s = g.ray_lines()
    img = np.ascontiguousarray(np.moveaxis(data, 0, -1))
    out = np.zeros((g.view_count, g.detector_count, data.shape[0]))
    _project_kernel(img, theta, s, float(g.pixel_pitch), out)
    return np.moveaxis(out, -1, 0).copy()


def project_adjoint_array(sino: np.ndarray, g: ScanGeometry) -> np.ndarray:
    """Matched transpose of :func:`project_array`."""
    sino = np.asarray(sino, dtype=np.float64)
    theta, s = g.ray_lines()
    q = np.ascontiguousarray(np.moveaxis(sino, 0, -1))
    out = np.zeros((g.image_size[0], g.image_size[1], sino.shape[0]))
    _project_adjoint_kernel(q, theta, s, float(g.pixel_pitch), out)
    return np.moveaxis(out, -1, 0).copy()


def forward_project(img: ImageVolume, g: ScanGeometry) -> ProjectionVolume:
    data = img.data if isinstance(img, ImageVolume) else np.asarray(img)
    sino = project_array(data, g)
    dz = img.spacing[0] if isinstance(img, ImageVolume) else 1.0
    return ProjectionVolume(sino.astype(np.float32), g, (dz, g.view_spacing, g.detector_pitch))


def ramp_filter(q: np.ndarray, spacing: float, window: str = "ram-lak") -> np.ndarray:
    """Ramp-filter a (views, dets, slices) array along the detector axis.

    Uses the band-limited spatial Ram-Lak kernel, zero-padded to the next
    power of two of ``2*dets``, so the DC term is handled exactly.
    """
    nd = q.shape[1]
    size = 1 << int(math.ceil(math.log2(2 * nd)))
    n = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    h = np.zeros(size)
    h[0] = 1.0 / (4 * spacing**2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    kernel = np.fft.rfft(h) * spacing
    if window == "hann":
        freqs = np.linspace(0, 1, kernel.size)
        kernel = kernel * 0.5 * (1 + np.cos(np.pi * freqs))
    elif window != "ram-lak":
        raise ParameterError(f"unknown ramp window {window!r}")
    spec = np.fft.rfft(q, n=size, axis=1)
    return np.fft.irfft(spec * kernel.real[None, :, None], n=size, axis=1)[:, :nd, :]


def fbp_array(sino: np.ndarray, g: ScanGeometry, window: str = "ram-lak") -> np.ndarray:
    """FBP of a (D, views, dets) stack over the full 2*pi scan; returns (D, rows, cols)."""
    sino = np.asarray(sino, dtype=np.float64)
    if sino.ndim != 3 or sino.shape[1:] != (g.view_count, g.detector_count):
        raise ParameterError(f"sinogram shape {sino.shape} does not match geometry")
    q = np.ascontiguousarray(np.moveaxis(sino, 0, -1))
    out = np.zeros((g.image_size[0], g.image_size[1], sino.shape[0]))
    dbeta = g.view_spacing
    if g.mode == "parallel":
        qf = np.ascontiguousarray(ramp_filter(q, g.detector_pitch, window))
        _backproject_parallel(qf, g.angles(), float(g.detector_pitch), float(g.pixel_pitch), out)
    else:
        r_so = g.source_to_center
        virt_pitch = g.detector_pitch * r_so / g.source_to_detector
        t = g.detector_positions() * r_so / g.source_to_detector
        q = q * (r_so / np.sqrt(r_so**2 + t**2))[None, :, None]
        qf = np.ascontiguousarray(ramp_filter(q, virt_pitch, window))
        _backproject_fan(qf, g.angles(), float(virt_pitch), float(r_so), float(g.pixel_pitch), out)
    out *= 0.5 * dbeta
    return np.moveaxis(out, -1, 0).copy()


def fbp_reconstruct(p: ProjectionVolume, g: Optional[ScanGeometry] = None, window: str = "ram-lak") -> ImageVolume:
    g = g or p.geometry
    if g is None:
        raise ParameterError("no geometry attached to the projection volume")
    data = p.data if isinstance(p, ProjectionVolume) else np.asarray(p)
    img = fbp_array(data, g, window)
    dz = p.spacing[0] if isinstance(p, ProjectionVolume) else 1.0
    return ImageVolume(img.astype(np.float32), (dz, g.pixel_pitch, g.pixel_pitch))


@dataclass(frozen=True)
class ConjugateIndex:
    """For every (view, det) the (view', det') sampling the same line."""

    mode: str
    views: np.ndarray
    dets: np.ndarray
    snap_error: np.ndarray
    view_spacing: float

    def usable(self, tolerance: Optional[float] = None) -> np.ndarray:
        if tolerance is None:
            tolerance = 0.5 * self.view_spacing
        return self.snap_error <= tolerance

    def apply(self, j, i):
        return self.views[j, i], self.dets[j, i]


def conjugate_index(g: ScanGeometry) -> ConjugateIndex:
    nv, nd = g.view_count, g.detector_count
    j = np.arange(nv, dtype=np.float64)[:, None]
    if g.mode == "parallel":
        target = np.broadcast_to(j + nv / 2, (nv, nd))
    else:
        target = j + (np.pi + 2 * g.fan_angles()[None, :]) / g.view_spacing
    snapped = np.rint(target)
    snap_error = np.abs(target - snapped) * g.view_spacing
    views = (snapped.astype(np.int64) % nv).astype(np.int64)
    dets = np.broadcast_to(nd - 1 - np.arange(nd), (nv, nd)).astype(np.int64)
    return ConjugateIndex(g.mode, views, np.ascontiguousarray(dets), snap_error, g.view_spacing)


def conjugate_residual(sino: np.ndarray, cidx: ConjugateIndex, tolerance=None) -> float:
    """Largest |p(j,i) - p(j',i')| over usable entries of one (views, dets) sinogram."""
    mask = cidx.usable(tolerance)
    partner = sino[cidx.views, cidx.dets]
    return float(np.max(np.abs(sino - partner)[mask])) if mask.any() else 0.0


def projector_linearity_check(f1, f2, g: ScanGeometry) -> float:
    """max |R(f1+f2) - R(f1) - R(f2)| in float64."""
    a = np.asarray(as_array(f1), dtype=np.float64)
    b = np.asarray(as_array(f2), dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.max(np.abs(project_array(a + b, g) - project_array(a, g) - project_array(b, g))))


def projector_norm(g: ScanGeometry, iterations: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral norm of the 2D projector."""
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.standard_normal((1, *g.image_size))
    x /= np.linalg.norm(x)
    sigma2 = 0.0
    for _ in range(iterations):
        y = project_adjoint_array(project_array(x, g), g)
        sigma2 = float(np.linalg.norm(y))
        x = y / sigma2
    return math.sqrt(sigma2)


def slice_similarity_bound(v, g: ScanGeometry) -> float:
    """max over adjacent slices of ||R(df)|| / ||df||, 0 where df == 0."""
    data = np.asarray(as_array(v), dtype=np.float64)
    if data.ndim != 3 or data.shape[0] < 2:
        raise ParameterError("need at least two slices")
    diff = np.diff(data, axis=0)
    proj = project_array(diff, g)
    best = 0.0
    for df, dp in zip(diff, proj):
        nf = np.linalg.norm(df)
        if nf > 0:
            best = max(best, float(np.linalg.norm(dp) / nf))
    return best

"""Pseudo-label banks: nonlocal block matching and conjugate-ray replacement.

Both builders return ``k`` volumes shaped like the source.  In the
statistical bank, member ``j`` holds at every voxel the center value of the
``j``-th closest block (sum of squared differences over an ``n**3`` block,
clamped-edge borders) found in the ``W**3`` window around that voxel.  In the
conjugate bank, member ``j`` is the source with a random subset of samples
swapped for the value measured along the same ray from the opposite side on
a neighboring slice.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numba
import numpy as np

from .errors import FormatError, ParameterError, StalenessError
from .geometry import ScanGeometry, conjugate_index
from .volume import ProjectionVolume, RandomSource, as_array, load_volume, save_volume


@dataclass(frozen=True)
class BankConfig:
    n: int = 3
    W: int = 15
    k: int = 8
    stride: int = 1
    exclude_self: bool = True

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ParameterError(f"block edge n must be odd, got {self.n}")
        if self.W < self.n:
            raise ParameterError("search window W must be >= block edge n")
        if self.k < 1:
            raise ParameterError("k must be positive")
        if self.stride < 1:
            raise ParameterError("stride must be >= 1")


@dataclass(frozen=True)
class ConjugateConfig:
    p1: float = 1.0
    p2: float = 0.3
    m: int = 2
    snap_tolerance: Optional[float] = None  # radians; None means half a view step

    def __post_init__(self):
        if not (0 < self.p1 <= 1 and 0 < self.p2 <= 1):
            raise ParameterError("p1 and p2 must lie in (0, 1]")
        if self.m < 0:
            raise ParameterError("m must be >= 0")


@dataclass
class VoxelBank:
    volumes: List[ProjectionVolume]
    kind: str
    config: Union[BankConfig, ConjugateConfig]
    seed: Optional[int] = None
    source_checksum: Optional[str] = None
    stats: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.volumes)

    @property
    def dims(self):
        return self.volumes[0].dims


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


def window_offsets(W: int, exclude_self: bool) -> np.ndarray:
    """All offsets of a W**3 window in lexicographic (z, y, x) order."""
    r = W // 2
    rng = np.arange(-r, r + 1)
    offs = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), -1).reshape(-1, 3)
    if exclude_self:
        offs = offs[np.any(offs != 0, axis=1)]
    return np.ascontiguousarray(offs.astype(np.int64))


def _candidate_count(shape, u, W, exclude_self):
    r = W // 2
    count = 1
    for c, s in zip(u, shape):
        count *= min(c + r, s - 1) - max(c - r, 0) + 1
    return count - (1 if exclude_self else 0)


def _min_candidate_count(shape, W, exclude_self):
    r = W // 2
    count = 1
    for s in shape:
        count *= min(r + 1, s)
    return count - (1 if exclude_self else 0)


def rank_similar_blocks(v, u, cfg: BankConfig = BankConfig()):
    """The ``cfg.k`` closest blocks to the block at ``u``.

    Returns a list of ``((z, y, x), distance)`` sorted by distance, ties in
    lexicographic candidate order; ``distance`` is the sum of squared
    differences (ranking is identical to Euclidean distance).
    """
    data = np.asarray(as_array(v), dtype=np.float64)
    u = tuple(int(c) for c in u)
    if len(u) != 3 or any(not 0 <= c < s for c, s in zip(u, data.shape)):
        raise ParameterError(f"u={u} outside volume of shape {data.shape}")
    if _candidate_count(data.shape, u, cfg.W, cfg.exclude_self) < cfg.k:
        raise ParameterError("search window holds fewer than k candidates")
    h = cfg.n // 2
    padded = np.pad(data, h, mode="edge")
    offs = window_offsets(cfg.W, cfg.exclude_self)
    cand = offs + np.array(u)
    inside = np.all((cand >= 0) & (cand < np.array(data.shape)), axis=1)
    cand = cand[inside]
    d = np.arange(cfg.n)
    ref = padded[u[0] + d[:, None, None], u[1] + d[None, :, None], u[2] + d[None, None, :]]
    blocks = padded[
        cand[:, 0, None, None, None] + d[None, :, None, None],
        cand[:, 1, None, None, None] + d[None, None, :, None],
        cand[:, 2, None, None, None] + d[None, None, None, :],
    ]
    dist = ((blocks - ref[None]) ** 2).reshape(len(cand), -1).sum(axis=1)
    order = np.argsort(dist, kind="stable")[: cfg.k]
    return [(tuple(int(c) for c in cand[o]), float(dist[o])) for o in order]


@numba.njit(cache=True, inline="never")
def _sq_diff(ref, oth, sq):
    for x in range(sq.shape[0]):
        d = np.float64(ref[x]) - np.float64(oth[x])
        sq[x] = d * d


@numba.njit(cache=True, inline="never")
def _box_sum(src, n, out):
    # out[x] = src[x] + ... + src[x + n - 1]
    m = out.shape[0]
    for x in range(m):
        out[x] = src[x]
    for d in range(1, n):
        for x in range(m):
            out[x] += src[x + d]


@numba.njit(cache=True, inline="never")
def _stack_sum(rows, lo, n, a, b, out):
    # out[x] = rows[lo, a + x] + ... + rows[lo + n - 1, a + x] for x < b - a
    first = rows[lo]
    for x in range(b - a):
        out[x] = first[a + x]
    for d in range(1, n):
        src = rows[lo + d]
        for x in range(b - a):
            out[x] += src[a + x]


@numba.njit(parallel=True, cache=True)
def _match_kernel(E, h, offs, k, tz, ty, tx, stride, best_idx, best_dist):
    # E is the source padded by h on every side.  Centers are the stride grid
    # points; best_idx/best_dist are indexed by center-grid coordinates.
    # Offsets are visited in lexicographic order and a candidate only enters
    # the top-k when strictly closer, so ties keep lexicographic order.
    # Tiles are sized so the per-tile scratch stays in L2.
    n = 2 * h + 1
    D = E.shape[0] - 2 * h
    H = E.shape[1] - 2 * h
    Wd = E.shape[2] - 2 * h
    nz = (D + stride - 1) // stride
    ny = (H + stride - 1) // stride
    nx = (Wd + stride - 1) // stride
    tiles_z = (nz + tz - 1) // tz
    tiles_y = (ny + ty - 1) // ty
    tiles_x = (nx + tx - 1) // tx
    n_off = offs.shape[0]
    for tile in numba.prange(tiles_z * tiles_y * tiles_x):
        gz0 = (tile // (tiles_y * tiles_x)) * tz
        gy0 = ((tile // tiles_x) % tiles_y) * ty
        gx0 = (tile % tiles_x) * tx
        gz1 = min(gz0 + tz, nz)
        gy1 = min(gy0 + ty, ny)
        gx1 = min(gx0 + tx, nx)
        z0 = gz0 * stride
        z1 = (gz1 - 1) * stride + 1
        y0 = gy0 * stride
        y1 = (gy1 - 1) * stride + 1
        x0 = gx0 * stride
        x1 = (gx1 - 1) * stride + 1
        lz = z1 - z0 + 2 * h
        ly = y1 - y0 + 2 * h
        lx = x1 - x0
        sq = np.empty(lx + 2 * h)
        rowsum = np.empty((lz, ly, lx))
        boxyx = np.empty((lz, y1 - y0, lx))
        dist = np.empty(lx)
        td = np.full((gz1 - gz0, gy1 - gy0, gx1 - gx0, k), np.inf)
        ti = np.full((gz1 - gz0, gy1 - gy0, gx1 - gx0, k), -1, np.int32)
        worst = np.full((gz1 - gz0, gy1 - gy0, gx1 - gx0), np.inf)
        for m in range(n_off):
            oz = offs[m, 0]
            oy = offs[m, 1]
            ox = offs[m, 2]
            # centers whose candidate stays inside the volume, clipped to the tile
            zlo = max(z0, -oz)
            zhi = min(z1, D - oz)
            ylo = max(y0, -oy)
            yhi = min(y1, H - oy)
            xlo = max(x0, -ox)
            xhi = min(x1, Wd - ox)
            if zlo >= zhi or ylo >= yhi or xlo >= xhi:
                continue
            ux = xlo - x0
            vx = xhi - x0
            for a in range(zlo - z0, zhi - z0 + 2 * h):
                pz = z0 + a
                for b in range(ylo - y0, yhi - y0 + 2 * h):
                    py = y0 + b
                    m_sq = sq[: xhi - xlo + 2 * h]
                    _sq_diff(E[pz, py, xlo : xhi + 2 * h], E[pz + oz, py + oy, xlo + ox : xhi + 2 * h + ox], m_sq)
                    _box_sum(m_sq, n, rowsum[a, b, ux:vx])
            for a in range(zlo - z0, zhi - z0 + 2 * h):
                for y in range(ylo, yhi):
                    _stack_sum(rowsum[a], y - y0, n, ux, vx, boxyx[a, y - y0, ux:vx])
            for gz in range((zlo + stride - 1) // stride, (zhi - 1) // stride + 1):
                z = gz * stride
                for gy in range((ylo + stride - 1) // stride, (yhi - 1) // stride + 1):
                    y = gy * stride
                    _stack_sum(boxyx[:, y - y0], z - z0, n, ux, vx, dist[ux:vx])
                    wrow = worst[gz - gz0, gy - gy0]
                    for gx in range((xlo + stride - 1) // stride, (xhi - 1) // stride + 1):
                        lxi = gx - gx0
                        d = dist[gx * stride - x0]
                        if d < wrow[lxi]:
                            slot = td[gz - gz0, gy - gy0, lxi]
                            islot = ti[gz - gz0, gy - gy0, lxi]
                            p = k - 1
                            while p > 0 and slot[p - 1] > d:
                                slot[p] = slot[p - 1]
                                islot[p] = islot[p - 1]
                                p -= 1
                            slot[p] = d
                            islot[p] = m
                            wrow[lxi] = slot[k - 1]
        best_dist[gz0:gz1, gy0:gy1, gx0:gx1] = td
        best_idx[gz0:gz1, gy0:gy1, gx0:gx1] = ti


def match_blocks(v, cfg: BankConfig = BankConfig()):
    """Top-k block matches for every traversed center.

    Returns ``(offsets, best_idx, best_dist)``: ``best_idx[gz, gy, gx, j]``
    indexes ``offsets`` for the rank-``j`` match of center
    ``(gz, gy, gx) * stride``.
    """
    data = np.asarray(as_array(v))
    if _min_candidate_count(data.shape, cfg.W, cfg.exclude_self) < cfg.k:
        raise ParameterError(f"a W={cfg.W} window holds fewer than k={cfg.k} candidates in a {data.shape} volume")
    h = cfg.n // 2
    # float32 volumes stay float32 (half the memory); float64 input keeps its precision
    dt = np.float64 if data.dtype == np.float64 else np.float32
    E = np.pad(np.asarray(data, dtype=dt), h, mode="edge")
    offs = window_offsets(cfg.W, cfg.exclude_self)
    grid = tuple((s + cfg.stride - 1) // cfg.stride for s in data.shape)
    best_idx = np.empty(grid + (cfg.k,), np.int32)
    best_dist = np.empty(grid + (cfg.k,), np.float64)
    _match_kernel(E, h, offs, cfg.k, 16, 16, 128, cfg.stride, best_idx, best_dist)
    return offs, best_idx, best_dist


def _nearest_center(n, stride):
    g = (n + stride - 1) // stride
    idx = np.minimum(np.rint(np.arange(n) / stride).astype(np.int64), g - 1)
    return idx


def build_statistical_bank(v: ProjectionVolume, cfg: BankConfig = BankConfig(), rng: Optional[RandomSource] = None) -> VoxelBank:
    """Bank member ``j`` takes, at every voxel, the center of its rank-``j`` match.

    With ``stride > 1`` a skipped voxel reuses the match offsets of the
    nearest traversed center.  The search is deterministic, so ``rng`` only
    feeds the provenance record.
    """
    data = np.asarray(v.data)
    offs, best_idx, best_dist = match_blocks(data, cfg)
    D, H, W = data.shape
    gz = _nearest_center(D, cfg.stride)
    gy = _nearest_center(H, cfg.stride)
    gx = _nearest_center(W, cfg.stride)
    idx = best_idx[gz[:, None, None], gy[None, :, None], gx[None, None, :]]
    zz, yy, xx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    volumes = []
    for j in range(cfg.k):
        o = offs[idx[..., j]]
        src_z = np.clip(zz + o[..., 0], 0, D - 1)
        src_y = np.clip(yy + o[..., 1], 0, H - 1)
        src_x = np.clip(xx + o[..., 2], 0, W - 1)
        volumes.append(v.replace_data(data[src_z, src_y, src_x]))
    stats = {"mean_distance": [float(best_dist[..., j].mean()) for j in range(cfg.k)]}
    return VoxelBank(volumes, "statistical", cfg, rng.seed if rng else None, checksum(data), stats)


def build_conjugate_bank(
    v: ProjectionVolume,
    g: Optional[ScanGeometry] = None,
    ccfg: ConjugateConfig = ConjugateConfig(),
    k: int = 8,
    rng: Optional[RandomSource] = None,
) -> VoxelBank:
    """``k`` copies of ``v`` with a random subset of samples replaced by conjugates.

    A selected sample ``(z, j, i)`` is replaced by whichever of
    ``v[z+d, j', i']`` (``0 < |d| <= m``, in range) is closest in value, where
    ``(j', i')`` is its conjugate ray.  Samples whose conjugate view snaps
    farther than ``snap_tolerance`` are left alone, and so is everything
    when ``m = 0`` (the same slice is never a candidate).
    """
    g = g or v.geometry
    if g is None:
        raise ParameterError("conjugate bank needs a scan geometry")
    if k < 1:
        raise ParameterError("k must be positive")
    rng = rng or RandomSource(0)
    data = np.asarray(v.data)
    D, H, W = data.shape
    if (H, W) != (g.view_count, g.detector_count):
        raise ParameterError("volume does not match geometry")
    cidx = conjugate_index(g)
    usable = cidx.usable(ccfg.snap_tolerance).reshape(-1)
    conj_flat = (cidx.views * W + cidx.dets).reshape(-1)
    deltas = [d for d in range(-ccfg.m, ccfg.m + 1) if d != 0]
    n_slices = max(1, int(round(ccfg.p1 * D)))
    n_vox = int(round(ccfg.p2 * H * W))
    flat = data.reshape(D, H * W)
    volumes, replaced = [], []
    for member in range(k):
        gen = rng.child(member).generator()
        out = flat.copy()
        count = 0
        for z in np.sort(gen.choice(D, size=n_slices, replace=False)):
            sel = np.sort(gen.choice(H * W, size=n_vox, replace=False))
            sel = sel[usable[sel]]
            if sel.size == 0 or not deltas:
                continue
            partner = conj_flat[sel]
            cand = np.full((len(deltas), sel.size), np.inf)
            for a, d in enumerate(deltas):
                if 0 <= z + d < D:
                    cand[a] = flat[z + d, partner]
            gap = np.abs(cand - flat[z, sel][None, :])
            best = np.argmin(gap, axis=0)
            ok = np.isfinite(gap[best, np.arange(sel.size)])
            out[z, sel[ok]] = cand[best[ok], np.arange(sel.size)[ok]]
            count += int(ok.sum())
        replaced.append(count)
        volumes.append(v.replace_data(out.reshape(D, H, W)))
    stats = {"replaced": replaced, "replaced_fraction": [c / data.size for c in replaced]}
    return VoxelBank(volumes, "conjugate", ccfg, rng.seed, checksum(data), stats)


def save_bank(bank: VoxelBank, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for j, vol in enumerate(bank.volumes):
        name = f"{bank.kind}_{j:02d}.scv"
        save_volume(vol, directory / name)
        names.append(name)
    manifest = {
        "kind": bank.kind,
        "config": asdict(bank.config),
        "seed": bank.seed,
        "source_checksum": bank.source_checksum,
        "members": names,
        "member_checksums": [checksum(vol.data) for vol in bank.volumes],
        "stats": bank.stats,
    }
    path = directory / "bank.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_bank(directory, verify: bool = True) -> VoxelBank:
    directory = Path(directory)
    path = directory / "bank.json"
    if not path.exists():
        raise FormatError(f"missing bank manifest {path}")
    manifest = json.loads(path.read_text())
    volumes = [load_volume(directory / name) for name in manifest["members"]]
    if verify:
        for vol, expected in zip(volumes, manifest.get("member_checksums", [])):
            if checksum(vol.data) != expected:
                raise StalenessError(f"bank member in {directory} does not match its manifest")
    cls = BankConfig if manifest["kind"] == "statistical" else ConjugateConfig
    return VoxelBank(
        volumes, manifest["kind"], cls(**manifest["config"]), manifest.get("seed"),
        manifest.get("source_checksum"), manifest.get("stats", {}),
    )

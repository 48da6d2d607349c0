"""Training on pseudo-label pairs drawn from the two banks, and tiled inference."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bank import VoxelBank
from .errors import ParameterError, TrainingError
from .network import (
    DenoiserNet,
    LrSchedule,
    OptimizerState,
    adam_step,
    forward_backward_mse,
    net_forward,
)
from .volume import ProjectionVolume, RandomSource, as_array

STATISTICAL = "statistical"
CONJUGATE = "conjugate"


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    iterations: int = 3000
    crop: Tuple[int, int, int] = (32, 64, 64)
    batch: int = 4
    seed: int = 0
    lr: float = 1e-3
    decay_every: int = 500
    decay_factor: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "crop", tuple(int(c) for c in self.crop))
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.iterations < 1 or self.batch < 1:
            raise ParameterError("iterations and batch must be >= 1")
        if len(self.crop) != 3 or min(self.crop) < 1:
            raise ParameterError(f"crop must be three positive sizes, got {self.crop}")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.decay_every, self.decay_factor)

    def clamped_crop(self, dims) -> Tuple[int, int, int]:
        return tuple(min(c, d) for c, d in zip(self.crop, dims))

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["crop"] = list(self.crop)
        return d

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        return cls(**obj)


@dataclass
class TrainReport:
    loss: List[float]
    timings: Dict[str, float]
    config: dict
    tags: Dict[str, int]
    scale: float
    checkpoint: Optional[str] = None

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "train_report.json").write_text(json.dumps(self.to_json(), indent=2))
        with open(directory / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            for i, l in enumerate(self.loss):
                w.writerow([i, repr(l)])
        return directory / "train_report.json"


def _pick_bank(banks, lam, gen):
    stat, conj = banks
    tag = STATISTICAL if gen.random() < lam else CONJUGATE
    bank = stat if tag == STATISTICAL else conj
    if bank is None or bank.k < 2:
        raise ParameterError(f"{tag} bank needs at least 2 members to form a pair")
    return tag, bank


def sample_pair(banks: Sequence[Optional[VoxelBank]], cfg: TrainConfig, rng: RandomSource, t: int):
    """One (input crop, target crop, source tag) draw for iteration ``t``.

    The draw depends only on ``(rng, t)``: the bank is chosen with
    probability ``cfg.lam`` for the statistical bank, then two distinct
    members and one crop corner shared by both.
    """
    gen = rng.child(t).generator()
    tag, bank = _pick_bank(banks, cfg.lam, gen)
    i, j = gen.choice(bank.k, size=2, replace=False)
    dims = bank.dims
    crop = cfg.clamped_crop(dims)
    corner = [int(gen.integers(0, d - c + 1)) for d, c in zip(dims, crop)]
    sl = tuple(slice(o, o + c) for o, c in zip(corner, crop))
    return as_array(bank.volumes[i])[sl], as_array(bank.volumes[j])[sl], tag


def volume_scale(v) -> float:
    s = float(np.std(as_array(v), dtype=np.float64))
    return s if s > 0 else 1.0


def train(
    v: ProjectionVolume,
    banks: Sequence[Optional[VoxelBank]],
    net: DenoiserNet,
    cfg: TrainConfig = TrainConfig(),
    progress=None,
) -> Tuple[DenoiserNet, TrainReport]:
    """Minimize the pair MSE for ``cfg.iterations`` Adam steps.

    Samples are divided by the source volume's standard deviation during
    training; the scale is stored on the returned net and undone by
    :func:`denoise`.
    """
    for bank in banks:
        if bank is not None and bank.dims != tuple(v.dims):
            raise ParameterError(f"bank dims {bank.dims} do not match volume dims {v.dims}")
    net = net.copy()
    scale = volume_scale(v)
    net.scale = scale
    src = RandomSource(cfg.seed, stream_id=0x7A1)
    state = OptimizerState.for_net(net)
    sched = cfg.schedule
    losses: List[float] = []
    tags = {STATISTICAL: 0, CONJUGATE: 0}
    t_sample = t_step = 0.0
    for t in range(cfg.iterations):
        t0 = time.perf_counter()
        pairs = [sample_pair(banks, cfg, src.child(t), b) for b in range(cfg.batch)]
        x = np.stack([p[0] for p in pairs]) / np.float32(scale)
        y = np.stack([p[1] for p in pairs]) / np.float32(scale)
        for p in pairs:
            tags[p[2]] += 1
        t1 = time.perf_counter()
        last_good = net.copy()
        loss, grads = forward_backward_mse(net, x, y)
        if not np.isfinite(loss):
            raise TrainingError("non-finite loss", t, last_good)
        try:
            params = adam_step(state, net.parameters(), grads.parameters(), sched)
        except TrainingError as exc:
            raise TrainingError("non-finite gradient", t, last_good) from exc
        net.set_parameters(params)
        net.step += 1
        losses.append(loss)
        t_step += time.perf_counter() - t1
        t_sample += t1 - t0
        if progress is not None:
            progress(t, loss)
    report = TrainReport(
        losses,
        {"sample_s": t_sample, "optimize_s": t_step},
        cfg.to_json(),
        tags,
        scale,
    )
    return net, report


def _axis_tiles(n, tile, overlap):
    if tile >= n:
        return [0]
    step = max(tile - overlap, 1)
    starts = list(range(0, n - tile, step)) + [n - tile]
    return sorted(set(starts))


def _ramp(tile, overlap, at_start, at_end):
    w = np.ones(tile)
    if overlap > 0:
        r = (np.arange(tile) + 1.0) / (overlap + 1.0)
        if not at_start:
            w = np.minimum(w, r)
        if not at_end:
            w = np.minimum(w, r[::-1])
    return w


def denoise(net: DenoiserNet, v: ProjectionVolume, tile: Optional[Sequence[int]] = (32, 64, 64), overlap: int = 8) -> ProjectionVolume:
    """Apply ``net`` to the whole volume by overlapping tiles with linear blending.

    Each tile is evaluated with a context margin equal to the network's
    receptive radius, so tile outputs agree with a single whole-volume pass
    and the blend only mixes equal values.
    """
    data = as_array(v)
    dims = data.shape
    tile = dims if tile is None else tuple(min(int(t), d) for t, d in zip(tile, dims))
    overlap = max(int(overlap), 0)
    scale = float(getattr(net, "scale", 1.0))
    halo = net.receptive_radius
    acc = np.zeros(dims, np.float64)
    wsum = np.zeros(dims, np.float64)
    starts = [_axis_tiles(n, t, overlap) for n, t in zip(dims, tile)]
    for z0 in starts[0]:
        for y0 in starts[1]:
            for x0 in starts[2]:
                corner = (z0, y0, x0)
                lo = [max(c - halo, 0) for c in corner]
                hi = [min(c + t + halo, n) for c, t, n in zip(corner, tile, dims)]
                region = data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] / np.float32(scale)
                out = net_forward(net, region).astype(np.float64) * scale
                core = tuple(slice(c - l, c - l + t) for c, l, t in zip(corner, lo, tile))
                ws = [_ramp(t, overlap, c == 0, c + t == n) for c, t, n in zip(corner, tile, dims)]
                w = ws[0][:, None, None] * ws[1][None, :, None] * ws[2][None, None, :]
                dst = tuple(slice(c, c + t) for c, t in zip(corner, tile))
                acc[dst] += w * out[core]
                wsum[dst] += w
    return v.replace_data((acc / wsum).astype(np.float32))


def loss_progress(loss: Sequence[float], fraction: float = 0.1) -> Tuple[float, float]:
    """Mean loss over the first and last ``fraction`` of iterations."""
    n = max(1, int(round(len(loss) * fraction)))
    arr = np.asarray(loss, dtype=np.float64)
    return float(arr[:n].mean()), float(arr[-n:].mean())

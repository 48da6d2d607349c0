"""In-process composition of the stages: simulate, bank, train, denoise, reconstruct, evaluate.

The command line drives the same functions stage by stage through files;
these helpers are what the demos and the end-to-end tests call directly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .bank import BankConfig, ConjugateConfig, VoxelBank, build_conjugate_bank, build_statistical_bank
from .geometry import ScanGeometry, fbp_reconstruct, forward_project
from .metrics import QualityReport, disk_mask, volume_report
from .network import DenoiserNet, init_net
from .simulate import NoiseModel, RingSpec, inject_low_dose, inject_rings, make_phantom
from .trainer import TrainConfig, TrainReport, denoise, train
from .volume import ImageVolume, ProjectionVolume, RandomSource

# Phantom value 0.2 (soft tissue in the Shepp-Logan table) is mapped to water.
MU_WATER_PER_MM = 0.0193
PHANTOM_WATER_LEVEL = 0.2

# stream ids, so each stage draws from its own family of streams
NOISE_STREAM = 1
BANK_STREAM = 2


def to_attenuation(img: ImageVolume, pixel_pitch: float = 1.0) -> ImageVolume:
    """Scale unit phantom values to linear attenuation in 1/mm."""
    mu = img.data.astype(np.float64) * (MU_WATER_PER_MM / PHANTOM_WATER_LEVEL)
    return ImageVolume(mu.astype(np.float32), (img.spacing[0], pixel_pitch, pixel_pitch))


@dataclass
class Study:
    """Everything :func:`simulate_study` produces for one phantom."""

    image: ImageVolume
    clean: ProjectionVolume
    low_dose: ProjectionVolume
    ringed: Optional[ProjectionVolume]
    geometry: ScanGeometry
    noise: NoiseModel
    rings: Optional[RingSpec] = None

    @property
    def measured(self) -> ProjectionVolume:
        """The sinogram a scanner would hand over: ringed if rings were requested."""
        return self.ringed if self.ringed is not None else self.low_dose


def simulate_study(
    phantom: str,
    slices: int,
    geometry: ScanGeometry,
    noise: NoiseModel = NoiseModel(),
    rings: Optional[RingSpec] = None,
    seed: int = 0,
    z_variation: float = 1.0,
) -> Study:
    h, w = geometry.image_size
    src = RandomSource(seed)
    img = to_attenuation(make_phantom(phantom, (slices, h, w), rng=src, z_variation=z_variation), geometry.pixel_pitch)
    clean = forward_project(img, geometry)
    low = inject_low_dose(clean, noise, src.child(NOISE_STREAM))
    ringed = inject_rings(low, rings) if rings is not None and rings.columns else None
    return Study(img, clean, low, ringed, geometry, noise, rings)


def build_banks(
    v: ProjectionVolume,
    geometry: Optional[ScanGeometry] = None,
    bank_cfg: BankConfig = BankConfig(),
    conj_cfg: ConjugateConfig = ConjugateConfig(),
    seed: int = 0,
    lam: float = 0.5,
) -> Tuple[Optional[VoxelBank], Optional[VoxelBank]]:
    """Both pseudo-label banks; a bank the mixture never draws from (lam 0 or 1) is skipped."""
    src = RandomSource(seed).child(BANK_STREAM)
    stat = build_statistical_bank(v, bank_cfg, src.child(0)) if lam > 0 else None
    conj = build_conjugate_bank(v, geometry, conj_cfg, bank_cfg.k, src.child(1)) if lam < 1 else None
    return stat, conj


@dataclass
class ScoutResult:
    denoised: ProjectionVolume
    net: DenoiserNet
    report: TrainReport
    timings: Dict[str, float] = field(default_factory=dict)


def run_scout(
    v: ProjectionVolume,
    geometry: Optional[ScanGeometry] = None,
    bank_cfg: BankConfig = BankConfig(),
    conj_cfg: ConjugateConfig = ConjugateConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    channels: int = 64,
    banks=None,
    progress=None,
    tile=None,
) -> ScoutResult:
    """Bank, train from scratch and denoise ``v``.  Pass ``banks`` to reuse prebuilt ones.

    ``tile`` is the inference tile (default: the training crop).  Tiled
    inference is exact, so it only trades memory for speed.
    """
    geometry = geometry or v.geometry
    timings = {}
    t0 = time.perf_counter()
    if banks is None:
        banks = build_banks(v, geometry, bank_cfg, conj_cfg, train_cfg.seed, train_cfg.lam)
    timings["bank_s"] = time.perf_counter() - t0
    net = init_net(channels, seed=train_cfg.seed)
    t0 = time.perf_counter()
    net, report = train(v, banks, net, train_cfg, progress=progress)
    timings["train_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    out = denoise(net, v, tile=tile or train_cfg.crop)
    timings["denoise_s"] = time.perf_counter() - t0
    return ScoutResult(out, net, report, timings)


def evaluate_sinograms(reference: ImageVolume, p: ProjectionVolume, geometry: Optional[ScanGeometry] = None,
                       window: str = "ram-lak", mask_fraction: float = 0.95) -> QualityReport:
    """Reconstruct ``p`` and score it against ``reference`` inside the field-of-view disk."""
    rec = fbp_reconstruct(p, geometry, window)
    mask = disk_mask(reference.dims[1:], mask_fraction)
    return volume_report(reference, rec, mask=mask)

"""``scout`` command line: file-staged pipeline with a checksummed run manifest.

Every stage reads and writes files under ``--out-dir`` and appends an entry
to ``manifest.json`` there.  Options come from flags first, then from the
``--config`` JSON (top-level keys, or a section named after the subcommand),
then from built-in defaults.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .bank import BankConfig, ConjugateConfig, build_conjugate_bank, build_statistical_bank, load_bank, save_bank
from .errors import (
    CorruptionError,
    DependencyError,
    FormatError,
    ParameterError,
    ScoutError,
    StalenessError,
    TrainingError,
    ValidationError,
)
from .geometry import DEFAULT_CENTER_TO_DETECTOR_MM, DEFAULT_SOURCE_TO_CENTER_MM, fan_geometry, fbp_reconstruct, parallel_geometry
from .metrics import disk_mask, volume_report
from .network import init_net, load_checkpoint, save_checkpoint
from .pipeline import BANK_STREAM, simulate_study
from .simulate import DEFAULT_I0, DEFAULT_SIGMA_E2, NoiseModel, RingSpec
from .trainer import TrainConfig, denoise, train
from .volume import ProjectionVolume, RandomSource, load_volume, save_volume

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"

DEFAULTS = {
    "seed": 0,
    "threads": None,
    "out_dir": "scout_run",
    # simulate
    "phantom": "shepp-logan",
    "dims": "32,256,256",
    "mode": "fan",
    "views": None,
    "dets": None,
    "pixel_pitch": 1.0,
    "det_pitch": None,
    "source_to_center": DEFAULT_SOURCE_TO_CENTER_MM,
    "center_to_detector": DEFAULT_CENTER_TO_DETECTOR_MM,
    "i0": DEFAULT_I0,
    "sigma_e2": DEFAULT_SIGMA_E2,
    "dose": 1.0,
    "rings": None,
    "z_variation": 1.0,
    # bank
    "k": 8,
    "n": 3,
    "W": 15,
    "stride": 1,
    "include_self": False,
    "p1": 1.0,
    "p2": 0.3,
    "m": 2,
    # train
    "lam": 0.5,
    "iterations": 3000,
    "crop": "32,64,64",
    "batch": 4,
    "channels": 64,
    "lr": 1e-3,
    "decay_every": 500,
    "decay_factor": 0.5,
    # recon / eval
    "window": "ram-lak",
    "mask_fraction": 0.95,
    "domain": "image",
}


class UsageError(ScoutError):
    pass


# ---------------------------------------------------------------------------
# manifest


def file_digest(path: Path) -> str:
    """sha256 over a stage artifact: payload plus header for volumes and checkpoints."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        members = sorted(p for p in path.rglob("*") if p.is_file())
        for p in members:
            h.update(p.relative_to(path).as_posix().encode())
            h.update(p.read_bytes())
        return h.hexdigest()
    h.update(path.read_bytes())
    side = path.with_name(path.name + ".json")
    if side.exists():
        h.update(side.read_bytes())
    return h.hexdigest()


class RunManifest:
    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / MANIFEST
        if self.path.exists():
            try:
                self.data = json.loads(self.path.read_text())
            except ValueError as exc:
                raise FormatError(f"malformed manifest {self.path}: {exc}") from exc
        else:
            self.data = {"tool_version": __version__, "stages": []}

    @property
    def stages(self) -> List[dict]:
        return self.data["stages"]

    def recorded(self, path: Path) -> Optional[str]:
        """Checksum the most recent stage recorded when it wrote ``path``."""
        key = str(Path(path).resolve())
        for stage in reversed(self.stages):
            if key in stage.get("outputs", {}):
                return stage["outputs"][key]
        return None

    def check_input(self, path: Path) -> str:
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"missing stage input {path}")
        digest = file_digest(path)
        want = self.recorded(path)
        if want is not None and want != digest:
            raise StalenessError(f"{path} changed since it was written (checksum mismatch)")
        return digest

    def record(self, name: str, inputs: Dict[str, str], outputs: List[Path], config: dict, seed: int, wall: float, extra=None):
        entry = {
            "stage": name,
            "inputs": inputs,
            "outputs": {str(Path(p).resolve()): file_digest(p) for p in outputs},
            "config": config,
            "seed": seed,
            "wall_s": wall,
        }
        if extra:
            entry.update(extra)
        self.stages.append(entry)
        self.data["tool_version"] = __version__
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2))

    def verify(self) -> List[str]:
        """Outputs whose file is missing or no longer matches (latest record per path)."""
        latest = {}
        for stage in self.stages:
            latest.update(stage.get("outputs", {}))
        bad = []
        for p, digest in latest.items():
            if not Path(p).exists() or file_digest(Path(p)) != digest:
                bad.append(p)
        return bad


# ---------------------------------------------------------------------------
# option resolution


def _ints(text, count=3, name="dims") -> tuple:
    try:
        vals = tuple(int(x) for x in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"--{name} expects {count} comma-separated integers, got {text!r}") from exc
    if len(vals) != count or min(vals) < 1:
        raise UsageError(f"--{name} expects {count} positive integers, got {text!r}")
    return vals


def _parse_rings(text) -> Optional[RingSpec]:
    """``col:gain[:width],...``, a JSON list of {"column", "gain", "width"}, or a file holding that list."""
    if text is None or text == "":
        return None
    if isinstance(text, list):
        return RingSpec.from_json(text)
    text = str(text).strip()
    if not text.startswith("[") and Path(text).is_file():
        text = Path(text).read_text().strip()
    if text.startswith("["):
        return RingSpec.from_json(text)
    cols = []
    for part in text.split(","):
        bits = part.split(":")
        if len(bits) not in (2, 3):
            raise UsageError(f"bad ring entry {part!r}; expected col:gain[:width]")
        cols.append((int(bits[0]), float(bits[1]), int(bits[2]) if len(bits) == 3 else 1))
    return RingSpec(tuple(cols))


class Options:
    """Flag value, else config value, else default."""

    def __init__(self, args: argparse.Namespace, config: dict):
        self._args = args
        section = config.get(args.command, {}) if isinstance(config.get(args.command), dict) else {}
        self._config = {**{k: v for k, v in config.items() if not isinstance(v, dict)}, **section}

    def __getattr__(self, name):
        v = getattr(self._args, name, None)
        if v is not None:
            return v
        for key in (name, name.replace("_", "-"), "lambda" if name == "lam" else name):
            if key in self._config:
                return self._config[key]
        return DEFAULTS.get(name)

    def used(self, names) -> dict:
        return {n: getattr(self, n) for n in names}


def _set_threads(n):
    if n is None:
        return
    import numba
    import torch

    n = int(n)
    if n < 1:
        raise UsageError("--threads must be >= 1")
    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _out(opts) -> Path:
    p = Path(opts.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _default_input(out_dir: Path) -> Path:
    ringed = out_dir / "ringed.scv"
    return ringed if ringed.exists() else out_dir / "lowdose.scv"


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(opts) -> int:
    out_dir = _out(opts)
    dims = _ints(opts.dims)
    if opts.views is None or opts.dets is None:
        raise UsageError("--views and --dets are required")
    views, dets = int(opts.views), int(opts.dets)
    size = dims[1:]
    if opts.mode == "parallel":
        g = parallel_geometry(views, dets, size, float(opts.pixel_pitch), opts.det_pitch)
    elif opts.mode in ("fan", "fan_flat"):
        g = fan_geometry(views, dets, size, float(opts.pixel_pitch), float(opts.source_to_center),
                         float(opts.center_to_detector), opts.det_pitch)
    else:
        raise UsageError(f"unknown --mode {opts.mode!r}")
    noise = NoiseModel(float(opts.i0), float(opts.sigma_e2), float(opts.dose))
    rings = _parse_rings(opts.rings)
    t0 = time.perf_counter()
    st = simulate_study(opts.phantom, dims[0], g, noise, rings, int(opts.seed), float(opts.z_variation))
    outputs = [
        save_volume(st.image, out_dir / "image"),
        save_volume(st.clean, out_dir / "clean"),
        save_volume(st.low_dose, out_dir / "lowdose"),
    ]
    if st.ringed is not None:
        outputs.append(save_volume(st.ringed, out_dir / "ringed"))
    else:
        stale = out_dir / "ringed.scv"
        for p in (stale, stale.with_name(stale.name + ".json")):
            if p.exists():
                p.unlink()
    config = opts.used(["phantom", "dims", "mode", "views", "dets", "pixel_pitch", "i0", "sigma_e2", "dose", "z_variation"])
    config.update(geometry=g.to_json(), rings=rings.to_json() if rings else None, i0_effective=noise.effective_i0)
    RunManifest(out_dir).record("simulate", {}, outputs, config, int(opts.seed), time.perf_counter() - t0,
                                {"i0_effective": noise.effective_i0})
    print(f"simulate: wrote {', '.join(p.name for p in outputs)} (I0 effective {noise.effective_i0:g})")
    return EXIT_OK


def cmd_bank(opts) -> int:
    out_dir = _out(opts)
    man = RunManifest(out_dir)
    src = Path(opts.input) if opts.input else _default_input(out_dir)
    inputs = {str(src.resolve()): man.check_input(src)}
    v = load_volume(src)
    cfg = BankConfig(int(opts.n), int(opts.W), int(opts.k), int(opts.stride), not bool(opts.include_self))
    ccfg = ConjugateConfig(float(opts.p1), float(opts.p2), int(opts.m))
    rs = RandomSource(int(opts.seed)).child(BANK_STREAM)
    t0 = time.perf_counter()
    outputs = []
    if opts.which in ("both", "statistical"):
        outputs.append(save_bank(build_statistical_bank(v, cfg, rs.child(0)), out_dir / "bank_statistical").parent)
    if opts.which in ("both", "conjugate"):
        outputs.append(save_bank(build_conjugate_bank(v, None, ccfg, cfg.k, rs.child(1)), out_dir / "bank_conjugate").parent)
    config = {"statistical": vars_of(cfg), "conjugate": vars_of(ccfg), "which": opts.which}
    man.record("bank", inputs, outputs, config, int(opts.seed), time.perf_counter() - t0)
    print(f"bank: wrote {', '.join(p.name for p in outputs)}")
    return EXIT_OK


def vars_of(obj) -> dict:
    from dataclasses import asdict

    return asdict(obj)


def _train_config(opts) -> TrainConfig:
    return TrainConfig(
        lam=float(opts.lam),
        iterations=int(opts.iterations),
        crop=_ints(opts.crop, name="crop"),
        batch=int(opts.batch),
        seed=int(opts.seed),
        lr=float(opts.lr),
        decay_every=int(opts.decay_every),
        decay_factor=float(opts.decay_factor),
    )


def cmd_train(opts) -> int:
    out_dir = _out(opts)
    man = RunManifest(out_dir)
    cfg = _train_config(opts)
    src = Path(opts.input) if opts.input else _default_input(out_dir)
    inputs = {str(src.resolve()): man.check_input(src)}
    v = load_volume(src)
    banks = []
    for kind, needed in (("statistical", cfg.lam > 0), ("conjugate", cfg.lam < 1)):
        d = out_dir / f"bank_{kind}"
        if not needed:
            banks.append(None)
            continue
        inputs[str(d.resolve())] = man.check_input(d)
        bank = load_bank(d)
        if bank.source_checksum is not None and bank.source_checksum != _payload_checksum(v):
            raise StalenessError(f"{d} was built from a different volume than {src}")
        banks.append(bank)
    net = init_net(int(opts.channels), seed=cfg.seed)
    t0 = time.perf_counter()
    net, report = train(v, tuple(banks), net, cfg)
    wall = time.perf_counter() - t0
    ckpt = save_checkpoint(net, out_dir / "model")
    report.checkpoint = str(ckpt)
    rpath = report.save(out_dir)
    config = {**cfg.to_json(), "channels": int(opts.channels)}
    man.record("train", inputs, [ckpt, rpath, out_dir / "loss.csv"], config, cfg.seed, wall, {"tags": report.tags})
    print(f"train: {cfg.iterations} iterations, final loss {report.loss[-1]:.6g}, tags {report.tags}")
    return EXIT_OK


def _payload_checksum(v) -> str:
    from .bank import checksum

    return checksum(np.asarray(v.data))


def cmd_denoise(opts) -> int:
    out_dir = _out(opts)
    man = RunManifest(out_dir)
    src = Path(opts.input) if opts.input else _default_input(out_dir)
    ck = Path(opts.checkpoint) if opts.checkpoint else out_dir / "model.ckpt"
    inputs = {str(src.resolve()): man.check_input(src), str(ck.resolve()): man.check_input(ck)}
    v = load_volume(src)
    net = load_checkpoint(ck)
    t0 = time.perf_counter()
    out = denoise(net, v, tile=_ints(opts.crop, name="crop"))
    path = save_volume(out, Path(opts.output) if opts.output else out_dir / "denoised")
    man.record("denoise", inputs, [path], {"crop": opts.crop, "overlap": 8}, int(opts.seed), time.perf_counter() - t0)
    print(f"denoise: wrote {path.name}")
    return EXIT_OK


def cmd_recon(opts) -> int:
    out_dir = _out(opts)
    man = RunManifest(out_dir)
    src = Path(opts.input) if opts.input else out_dir / "denoised.scv"
    inputs = {str(src.resolve()): man.check_input(src)}
    v = load_volume(src)
    if not isinstance(v, ProjectionVolume) or v.geometry is None:
        raise ValidationError(f"{src} is not a projection volume with geometry")
    t0 = time.perf_counter()
    img = fbp_reconstruct(v, None, opts.window)
    default = out_dir / ("recon_" + src.name[: -len(".scv")])
    path = save_volume(img, Path(opts.output) if opts.output else default)
    man.record("recon", inputs, [path], {"window": opts.window}, int(opts.seed), time.perf_counter() - t0)
    print(f"recon: wrote {path.name}")
    return EXIT_OK


def cmd_eval(opts) -> int:
    out_dir = _out(opts)
    man = RunManifest(out_dir)
    if not opts.reference or not opts.test:
        raise UsageError("eval needs --reference and --test")
    ref_p, test_p = Path(opts.reference), Path(opts.test)
    inputs = {str(ref_p.resolve()): man.check_input(ref_p), str(test_p.resolve()): man.check_input(test_p)}
    ref, test = load_volume(ref_p), load_volume(test_p)
    if opts.domain == "image" and (ref.kind != "image" or test.kind != "image"):
        raise ValidationError("image-domain eval needs two image volumes (run recon first, or pass --domain projection)")
    mask = disk_mask(ref.dims[1:], float(opts.mask_fraction)) if opts.domain == "image" else None
    t0 = time.perf_counter()
    rep = volume_report(ref, test, mask=mask, reference=ref_p.name, test_name=test_p.name, domain=opts.domain)
    name = opts.output or f"report_{test_p.name[:-len('.scv')]}.json"
    path = rep.save(out_dir / name)
    man.record("eval", inputs, [path, path.with_suffix(".csv")], {"domain": opts.domain}, int(opts.seed),
               time.perf_counter() - t0)
    psnr = rep.psnr_mean
    print(f"eval: psnr {'identical' if math.isinf(psnr) else f'{psnr:.4f} dB'}, ssim {rep.ssim_mean:.4f}, rmse {rep.rmse_mean:.6g}")
    return EXIT_OK


def cmd_pipeline(opts) -> int:
    out_dir = _out(opts)
    cmd_simulate(opts)
    cmd_bank(opts)
    cmd_train(opts)
    cmd_denoise(opts)
    measured = _default_input(out_dir)
    for name in (measured, out_dir / "denoised.scv"):
        opts._args.input, opts._args.output = str(name), None
        cmd_recon(opts)
    image = out_dir / "image.scv"
    for name in (measured, out_dir / "denoised.scv"):
        opts._args.reference = str(image)
        opts._args.test = str(out_dir / ("recon_" + name.name))
        opts._args.output = None
        cmd_eval(opts)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "bank": cmd_bank,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "recon": cmd_recon,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--config", help="JSON file with option values")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--phantom", choices=["shepp-logan", "ellipsoid-stack", "resolution-bars"])
    sim.add_argument("--dims", help="D,H,W")
    sim.add_argument("--mode", choices=["parallel", "fan"])
    sim.add_argument("--views", type=int)
    sim.add_argument("--dets", type=int)
    sim.add_argument("--pixel-pitch", type=float)
    sim.add_argument("--det-pitch", type=float)
    sim.add_argument("--source-to-center", type=float)
    sim.add_argument("--center-to-detector", type=float)
    sim.add_argument("--i0", type=float)
    sim.add_argument("--sigma-e2", type=float)
    sim.add_argument("--dose", type=float, help="dose fraction, e.g. 0.25")
    sim.add_argument("--rings", help="col:gain[:width],..., a JSON list, or a JSON file")
    sim.add_argument("--z-variation", type=float)

    bank = argparse.ArgumentParser(add_help=False)
    bank.add_argument("--k", type=int)
    bank.add_argument("--n", type=int)
    bank.add_argument("--W", type=int)
    bank.add_argument("--stride", type=int)
    bank.add_argument("--include-self", action="store_true", default=None)
    bank.add_argument("--p1", type=float)
    bank.add_argument("--p2", type=float)
    bank.add_argument("--m", type=int)

    tr = argparse.ArgumentParser(add_help=False)
    tr.add_argument("--lambda", dest="lam", type=float)
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--crop", help="D,H,W")
    tr.add_argument("--batch", type=int)
    tr.add_argument("--channels", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--decay-every", type=int)
    tr.add_argument("--decay-factor", type=float)

    rec = argparse.ArgumentParser(add_help=False)
    rec.add_argument("--window", choices=["ram-lak", "hann"])

    ev = argparse.ArgumentParser(add_help=False)
    ev.add_argument("--reference")
    ev.add_argument("--test")
    ev.add_argument("--domain", choices=["image", "projection"])
    ev.add_argument("--mask-fraction", type=float)

    io = argparse.ArgumentParser(add_help=False)
    io.add_argument("--input")
    io.add_argument("--output")

    parser = argparse.ArgumentParser(prog="scout", description="Zero-shot self-supervised denoising of CT projection volumes.")
    parser.add_argument("--version", action="version", version=f"scout {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common, sim], help="phantom, sinograms, low-dose noise, rings")
    b = sub.add_parser("bank", parents=[common, bank, io], help="build the pseudo-label banks")
    b.add_argument("--which", choices=["both", "statistical", "conjugate"], default="both")
    sub.add_parser("train", parents=[common, tr, io], help="train the denoiser on bank pairs")
    d = sub.add_parser("denoise", parents=[common, tr, io], help="apply a checkpoint to a volume")
    d.add_argument("--checkpoint")
    sub.add_parser("recon", parents=[common, rec, io], help="filtered backprojection")
    sub.add_parser("eval", parents=[common, ev, io], help="PSNR/SSIM/RMSE report")
    p = sub.add_parser("pipeline", parents=[common, sim, bank, tr, rec, ev, io], help="all stages in order")
    p.set_defaults(which="both", checkpoint=None)
    return parser


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        opts = Options(args, _load_config(args.config))
        _set_threads(opts.threads)
        return COMMANDS[args.command](opts)
    except (UsageError, ParameterError) as exc:
        print(f"scout {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, FormatError, CorruptionError) as exc:
        print(f"scout {args.command}: invalid data: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DependencyError, StalenessError) as exc:
        print(f"scout {args.command}: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (TrainingError, FloatingPointError) as exc:
        print(f"scout {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

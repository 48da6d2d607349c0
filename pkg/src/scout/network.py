"""Small 3D convolutional denoiser with hand-written backpropagation and Adam.

Parameters live in numpy arrays.  torch is used only for the 3D convolution
primitives; every gradient is assembled here so the reduction order is fixed.
In particular weight gradients are computed as a forward convolution of the
transposed activations with the transposed cotangent, which (unlike torch's
own weight-gradient kernel) gives the same bits for any thread count.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CorruptionError, FormatError, ParameterError, TrainingError, ValidationError
from .volume import RandomSource

ARCHITECTURE = "scout-cnn3d"
KERNEL = 3


@dataclass
class DenoiserNet:
    """``hidden_layers`` conv+LeakyReLU layers of width ``channels`` and one linear output conv.

    ``weights[i]`` has shape (c_out, c_in, 3, 3, 3) and ``biases[i]`` shape
    (c_out,).  Every layer pads by one voxel with edge replication, so the
    output has the input's shape.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    channels: int = 64
    hidden_layers: int = 5
    slope: float = 0.01
    seed: int = 0
    step: int = 0
    scale: float = 1.0  # data are divided by this before the first layer, see trainer

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def receptive_radius(self) -> int:
        return len(self.weights) * (KERNEL // 2)

    def parameters(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        self.weights = [np.ascontiguousarray(p) for p in params[0::2]]
        self.biases = [np.ascontiguousarray(p) for p in params[1::2]]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.channels,
            self.hidden_layers,
            self.slope,
            self.seed,
            self.step,
            self.scale,
        )

    def astype(self, dtype) -> "DenoiserNet":
        net = self.copy()
        net.set_parameters([p.astype(dtype) for p in net.parameters()])
        return net


def layer_shapes(channels: int, hidden_layers: int = 5) -> List[Tuple[int, int]]:
    """(c_out, c_in) for every conv, input layer first."""
    chans = [1] + [channels] * hidden_layers + [1]
    return [(chans[i + 1], chans[i]) for i in range(hidden_layers + 1)]


def expected_parameter_count(channels: int, hidden_layers: int = 5) -> int:
    return sum(co * ci * KERNEL**3 + co for co, ci in layer_shapes(channels, hidden_layers))


def init_net(channels: int = 64, hidden_layers: int = 5, slope: float = 0.01, seed: int = 0, dtype=np.float32) -> DenoiserNet:
    """Kaiming fan-in initialization drawn from ``RandomSource(seed)``; biases start at zero."""
    if channels < 1 or hidden_layers < 1:
        raise ParameterError("channels and hidden_layers must be >= 1")
    if slope < 0:
        raise ParameterError("LeakyReLU slope must be nonnegative")
    src = RandomSource(seed, stream_id=0x5C0)
    weights, biases = [], []
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    for i, (co, ci) in enumerate(layer_shapes(channels, hidden_layers)):
        fan_in = ci * KERNEL**3
        std = (gain if i < hidden_layers else 1.0) / math.sqrt(fan_in)
        gen = src.child(i).generator()
        weights.append((gen.standard_normal((co, ci, KERNEL, KERNEL, KERNEL)) * std).astype(dtype))
        biases.append(np.zeros(co, dtype=dtype))
    return DenoiserNet(weights, biases, channels, hidden_layers, slope, seed, 0)


def _pad(t: torch.Tensor) -> torch.Tensor:
    return F.pad(t, (1, 1, 1, 1, 1, 1), mode="replicate")


def _pad_adjoint(g: torch.Tensor) -> torch.Tensor:
    # Each border plane was a copy of its neighbour; fold it back in.  Axes are
    # handled one at a time so corners reach the right voxel.
    g = g.clone()
    for axis in (2, 3, 4):
        n = g.shape[axis]
        g.narrow(axis, 1, 1).add_(g.narrow(axis, 0, 1))
        g.narrow(axis, n - 2, 1).add_(g.narrow(axis, n - 1, 1))
        g = g.narrow(axis, 1, n - 2)
    return g.contiguous()


def _as_batch(net: DenoiserNet, x) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x)
    if arr.ndim == 3:
        arr, single = arr[None], True
    elif arr.ndim == 4:
        single = False
    else:
        raise ParameterError(f"expected a 3D volume or a batch of them, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ParameterError(f"input dims must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("network input contains non-finite values")
    out = np.ascontiguousarray(arr, dtype=net.dtype)
    # torch refuses to wrap read-only buffers (e.g. memory-mapped volumes)
    return (out if out.flags.writeable else out.copy()), single


def _run(net: DenoiserNet, xb: np.ndarray, keep: bool):
    h = torch.from_numpy(xb).unsqueeze(1)
    acts = []
    last = len(net.weights) - 1
    with torch.no_grad():
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            if keep:
                acts.append(h)
            h = F.conv3d(_pad(h), torch.from_numpy(w), torch.from_numpy(b))
            if i < last:
                h = F.leaky_relu(h, net.slope)
    return h.squeeze(1).numpy(), acts


def net_forward(net: DenoiserNet, x) -> np.ndarray:
    """Apply the network to a (D, H, W) volume or a (B, D, H, W) batch."""
    xb, single = _as_batch(net, x)
    out, _ = _run(net, xb, keep=False)
    return out[0] if single else out


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input: np.ndarray

    def parameters(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def _backward(net: DenoiserNet, acts, out: np.ndarray, grad_out: np.ndarray) -> Gradients:
    g = torch.from_numpy(np.ascontiguousarray(grad_out, dtype=net.dtype)).unsqueeze(1)
    last = len(net.weights) - 1
    gw: List[np.ndarray] = [None] * len(net.weights)
    gb: List[np.ndarray] = [None] * len(net.weights)
    with torch.no_grad():
        for i in range(last, -1, -1):
            if i < last:
                # LeakyReLU derivative read off the stored post-activation: its sign
                # matches the pre-activation because the slope is positive.
                post = acts[i + 1]
                g = torch.where(post > 0, g, g * net.slope) if net.slope > 0 else g * (post > 0)
            a = _pad(acts[i])
            gw[i] = F.conv3d(a.transpose(0, 1), g.transpose(0, 1)).transpose(0, 1).contiguous().numpy()
            gb[i] = g.numpy().sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(net.dtype)
            g = _pad_adjoint(F.conv_transpose3d(g, torch.from_numpy(net.weights[i])))
    return Gradients(gw, gb, g.squeeze(1).numpy())


def net_backward(net: DenoiserNet, x, grad_out) -> Gradients:
    """Gradients of ``<grad_out, net_forward(net, x)>`` w.r.t. every parameter and ``x``."""
    xb, single = _as_batch(net, x)
    go = np.asarray(grad_out)
    if single:
        go = go[None]
    if go.shape != xb.shape:
        raise ParameterError(f"grad_out shape {np.shape(grad_out)} does not match input {np.shape(x)}")
    out, acts = _run(net, xb, keep=True)
    grads = _backward(net, acts, out, go)
    if single:
        grads.input = grads.input[0]
    return grads


def forward_backward_mse(net: DenoiserNet, x: np.ndarray, target: np.ndarray) -> Tuple[float, Gradients]:
    """Mean squared error between net(x) and target plus its gradients (one pass)."""
    xb, single = _as_batch(net, x)
    tb = np.asarray(target, dtype=np.float64).reshape(xb.shape)
    out, acts = _run(net, xb, keep=True)
    diff = out.astype(np.float64) - tb
    loss = float(np.mean(diff * diff))
    grad_out = (2.0 / diff.size) * diff
    return loss, _backward(net, acts, out, grad_out)


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 1e-3
    decay_every: int = 500
    decay_factor: float = 0.5

    def __post_init__(self):
        if not self.initial > 0 or self.decay_every < 1 or not 0 < self.decay_factor <= 1:
            raise ParameterError("invalid learning-rate schedule")

    def lr(self, t: int) -> float:
        """Learning rate for 0-based iteration ``t``."""
        return self.initial * self.decay_factor ** (int(t) // self.decay_every)


@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 0.0

    @classmethod
    def for_net(cls, net: DenoiserNet) -> "OptimizerState":
        params = net.parameters()
        return cls([np.zeros(p.shape, np.float64) for p in params], [np.zeros(p.shape, np.float64) for p in params])


def adam_step(state: OptimizerState, params: List[np.ndarray], grads: List[np.ndarray], sched: LrSchedule) -> List[np.ndarray]:
    """One bias-corrected Adam update.  The learning rate is ``sched.lr(state.step)``."""
    if len(grads) != len(params):
        raise ParameterError("gradient list does not match parameter list")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", state.step)
    lr = sched.lr(state.step)
    state.step += 1
    state.lr = lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        upd = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        out.append((p.astype(np.float64) - upd).astype(p.dtype))
    return out


def _ckpt_paths(path) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".ckpt":
        path = path.with_name(path.name + ".ckpt")
    return path, path.with_name(path.name + ".json")


def save_checkpoint(net: DenoiserNet, path) -> Path:
    """Header JSON plus raw little-endian float32 parameters in layer order (w0, b0, w1, ...)."""
    path, hpath = _ckpt_paths(path)
    payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.parameters())
    header = {
        "architecture": ARCHITECTURE,
        "channels": net.channels,
        "hidden_layers": net.hidden_layers,
        "kernel": KERNEL,
        "slope": net.slope,
        "seed": net.seed,
        "step": net.step,
        "scale": net.scale,
        "dtype": "f32le",
        "shapes": [list(p.shape) for p in net.parameters()],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    hpath.write_text(json.dumps(header, indent=2))
    return path


def load_checkpoint(path) -> DenoiserNet:
    path, hpath = _ckpt_paths(path)
    if not hpath.exists() or not path.exists():
        raise FormatError(f"missing checkpoint {path}")
    try:
        header = json.loads(hpath.read_text())
        if header["architecture"] != ARCHITECTURE or header["dtype"] != "f32le":
            raise FormatError(f"unsupported checkpoint {hpath}")
        shapes = [tuple(s) for s in header["shapes"]]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint header {hpath}: {exc}") from exc
    raw = path.read_bytes()
    expected = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise CorruptionError(f"{path}: payload is {len(raw)} bytes, header implies {expected}")
    if "sha256" in header and hashlib.sha256(raw).hexdigest() != header["sha256"]:
        raise CorruptionError(f"{path}: checksum mismatch")
    params, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        params.append(np.frombuffer(raw, dtype="<f4", count=n, offset=4 * off).reshape(s).astype(np.float32))
        off += n
    net = DenoiserNet(
        params[0::2],
        params[1::2],
        int(header["channels"]),
        int(header["hidden_layers"]),
        float(header["slope"]),
        int(header["seed"]),
        int(header["step"]),
        float(header.get("scale", 1.0)),
    )
    if [p.shape for p in net.parameters()] != [tuple(s) for s in shapes] or len(net.weights) != net.hidden_layers + 1:
        raise FormatError(f"checkpoint shapes disagree with declared architecture in {hpath}")
    return net

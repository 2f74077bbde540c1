"""Layers, initialisation, optimisers and the desk-scale conv networks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CKPT_HEADER = "COARSEEM-CKPT-1"


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file does not follow the expected layout."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | upsample
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    factor: int = 1


def init_params(spec: LayerSpec, seed) -> list[Tensor]:
    """Uniform(-b, b) kernel with b = sqrt(6 / fan_in), zero bias."""
    if spec.kind != "conv":
        return []
    rng = np.random.default_rng(seed)
    fan_in = spec.in_channels * spec.kernel * spec.kernel
    bound = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
    return [Tensor(w, requires_grad=True), Tensor(np.zeros(spec.out_channels), requires_grad=True)]


class Sequential:
    """A chain of conv / relu / upsample layers."""

    def __init__(self, specs: list[LayerSpec], seed, prefix: str = ""):
        self.specs = list(specs)
        self._check_chain()
        self.params: dict[str, Tensor] = {}
        self._layer_params: list[list[Tensor]] = []
        for i, spec in enumerate(self.specs):
            ps = init_params(spec, [*_as_seq(seed), i])
            if ps:
                self.params[f"{prefix}{i}.weight"] = ps[0]
                self.params[f"{prefix}{i}.bias"] = ps[1]
            self._layer_params.append(ps)

    def _check_chain(self):
        ch = None
        for spec in self.specs:
            if spec.kind == "conv":
                if ch is not None and spec.in_channels != ch:
                    raise ValueError(f"layer expects {spec.in_channels} channels, previous gives {ch}")
                ch = spec.out_channels
            elif spec.kind not in ("relu", "upsample"):
                raise ValueError(f"unknown layer kind {spec.kind!r}")

    @property
    def total_stride(self) -> int:
        s = 1
        for spec in self.specs:
            if spec.kind == "conv":
                s *= spec.stride
        return s

    def __call__(self, x: Tensor) -> Tensor:
        for spec, ps in zip(self.specs, self._layer_params):
            if spec.kind == "conv":
                x = ad.conv2d(x, ps[0], ps[1], stride=spec.stride, pad=spec.pad)
            elif spec.kind == "relu":
                x = ad.relu(x)
            else:
                x = ad.upsample_nearest(x, spec.factor)
        return x


def _as_seq(seed) -> list:
    return list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]


def encoder_specs(in_channels: int, width: int) -> list[LayerSpec]:
    specs = []
    ch = in_channels
    for mult in (1, 2, 4):
        specs += [LayerSpec("conv", ch, width * mult, 4, 2, 1), LayerSpec("relu")]
        ch = width * mult
    return specs


def decoder_specs(in_channels: int, width: int, out_channels: int) -> list[LayerSpec]:
    specs = []
    ch = in_channels
    for mult in (2, 1, 1):
        specs += [
            LayerSpec("upsample", factor=2),
            LayerSpec("conv", ch, width * mult, 3, 1, 1),
            LayerSpec("relu"),
        ]
        ch = width * mult
    specs.append(LayerSpec("conv", ch, out_channels, 1, 1, 0))
    return specs


class Network:
    """Base container: named parameters plus a forward."""

    params: dict[str, Tensor]
    config: dict

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError("state dict keys do not match network parameters")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def _check_input(self, x: Tensor, channels: int) -> None:
        if x.ndim != 4 or x.shape[1] != channels:
            raise ValueError(f"expected N x {channels} x H x W input, got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError("input height and width must be divisible by 8")


class SegNet(Network):
    """Three stride-2 encoder stages, three upsampling decoder stages, 1x1 head."""

    def __init__(self, in_channels: int, out_channels: int, width: int = 16, seed=0):
        if min(in_channels, out_channels, width) < 1:
            raise ValueError("channel counts must be positive")
        self.config = dict(in_channels=in_channels, out_channels=out_channels, width=width)
        self.encoder = Sequential(encoder_specs(in_channels, width), [*_as_seq(seed), 0], "enc.")
        self.decoder = Sequential(decoder_specs(4 * width, width, out_channels), [*_as_seq(seed), 1], "dec.")
        self.params = {**self.encoder.params, **self.decoder.params}

    def __call__(self, x: Tensor) -> Tensor:
        self._check_input(x, self.config["in_channels"])
        return self.decoder(self.encoder(x))


class SplitPosteriorNet(Network):
    """Image encoder and coarse-label encoder joined channel-wise before one decoder."""

    def __init__(self, image_channels: int, coarse_channels: int, out_channels: int, width: int = 16, seed=0):
        if min(image_channels, coarse_channels, out_channels, width) < 1:
            raise ValueError("channel counts must be positive")
        self.config = dict(
            image_channels=image_channels,
            coarse_channels=coarse_channels,
            out_channels=out_channels,
            width=width,
        )
        s = _as_seq(seed)
        self.image_encoder = Sequential(encoder_specs(image_channels, width), [*s, 0], "img.")
        self.coarse_encoder = Sequential(encoder_specs(coarse_channels, width), [*s, 2], "coarse.")
        self.decoder = Sequential(decoder_specs(8 * width, width, out_channels), [*s, 1], "dec.")
        self.params = {**self.image_encoder.params, **self.coarse_encoder.params, **self.decoder.params}

    def __call__(self, image: Tensor, coarse: Tensor) -> Tensor:
        self._check_input(image, self.config["image_channels"])
        self._check_input(coarse, self.config["coarse_channels"])
        feats = ad.concat_channels([self.image_encoder(image), self.coarse_encoder(coarse)])
        return self.decoder(feats)


class MultiTaskNet(Network):
    """Shared encoder with a part decoder and a keypoint decoder."""

    def __init__(self, in_channels: int, part_channels: int, kp_channels: int, width: int = 16, seed=0):
        self.config = dict(in_channels=in_channels, part_channels=part_channels, kp_channels=kp_channels,
                           width=width)
        s = _as_seq(seed)
        self.encoder = Sequential(encoder_specs(in_channels, width), [*s, 0], "enc.")
        self.part_decoder = Sequential(decoder_specs(4 * width, width, part_channels), [*s, 1], "dec.")
        self.kp_decoder = Sequential(decoder_specs(4 * width, width, kp_channels), [*s, 3], "kpdec.")
        self.params = {**self.encoder.params, **self.part_decoder.params, **self.kp_decoder.params}

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._check_input(x, self.config["in_channels"])
        feats = self.encoder(x)
        return self.part_decoder(feats), self.kp_decoder(feats)


def build_segnet(in_channels: int, out_channels: int, width: int = 16, seed=0) -> SegNet:
    return SegNet(in_channels, out_channels, width, seed)


def build_split_posterior(
    image_channels: int, coarse_channels: int, out_channels: int, width: int = 16, seed=0
) -> SplitPosteriorNet:
    return SplitPosteriorNet(image_channels, coarse_channels, out_channels, width, seed)


# ---------------------------------------------------------------------------
# optimisers


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    buffers: dict = field(default_factory=dict)
    step: int = 0


def _grads_or_raise(params, grads):
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, g in enumerate(grads):
        if g is None:
            raise ValueError(f"parameter {i} has no gradient")
    return grads


def sgd_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState) -> None:
    """v <- m*v + (g + wd*p); p <- p - lr*v, in place."""
    _grads_or_raise(params, grads)
    state.step += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        d = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.buffers.get(i)
        v = d.copy() if v is None else state.momentum * v + d
        state.buffers[i] = v
        p.data = p.data - state.lr * v


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState) -> None:
    """Bias-corrected Adam, in place."""
    _grads_or_raise(params, grads)
    state.step += 1
    b1, b2 = state.betas
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m, v = state.buffers.get(i, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.buffers[i] = (m, v)
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)


class Optimizer:
    """Binds an :class:`OptimizerState` to a parameter list."""

    def __init__(self, params: list[Tensor], kind: str = "sgd", lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.state = OptimizerState(kind=kind, lr=lr, momentum=momentum, betas=tuple(betas), eps=eps,
                                    weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.state.kind == "sgd":
            sgd_step(self.params, grads, self.state)
        else:
            adam_step(self.params, grads, self.state)


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    if total < 1 or not 0 <= epoch <= total:
        raise ValueError("need 0 <= epoch <= total and total >= 1")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Header line, meta lines, one manifest line per parameter, then the blob."""
    lines = [CKPT_HEADER]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta {k} {v}")
    offset = 0
    blobs = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        lines.append(f"param {name} {'x'.join(map(str, arr.shape))} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append(f"blob {offset}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    if not raw.startswith((CKPT_HEADER + "\n").encode()):
        raise CheckpointFormatError(f"{path}: missing {CKPT_HEADER} header")
    meta: dict[str, str] = {}
    entries = []
    pos = len(CKPT_HEADER) + 1
    total = None
    while total is None:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointFormatError(f"{path}: truncated manifest")
        parts = raw[pos:end].decode("ascii", errors="replace").split(" ")
        pos = end + 1
        try:
            if parts[0] == "meta":
                meta[parts[1]] = " ".join(parts[2:])
            elif parts[0] == "param":
                shape = tuple(int(s) for s in parts[2].split("x")) if parts[2] else ()
                entries.append((parts[1], shape, int(parts[3])))
            elif parts[0] == "blob":
                total = int(parts[1])
            else:
                raise CheckpointFormatError(f"{path}: unknown manifest line {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: malformed manifest line") from exc
    blob = raw[pos:]
    if len(blob) != total:
        raise CheckpointFormatError(f"{path}: blob size {len(blob)} != declared {total}")
    params = {}
    for name, shape, off in entries:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > total:
            raise CheckpointFormatError(f"{path}: parameter {name} overruns blob")
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
    return params, meta

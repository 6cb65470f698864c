"""NeRV-lite: a frame-index INR (positional encoding -> dense stem -> conv/pixel-shuffle blocks).

Layers carry no biases; every learnable parameter is a weight tensor whose first
axis is the output-channel axis, so each layer is quantized as one unit.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .tensor import Graph, NonFiniteError, Tensor
from .video import VideoClip

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
CKPT_MAGIC = b"INRQCKPT"
CKPT_VERSION = 1


class SpecError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    posenc_freqs: int = 8
    posenc_base: float = 1.25
    stem_dims: Tuple[int, ...] = (32,)
    seed_shape: Tuple[int, int, int] = (8, 4, 4)
    blocks: Tuple[Tuple[int, int], ...] = ((16, 2), (12, 2), (8, 2))
    frames: int = 16

    def __post_init__(self):
        object.__setattr__(self, "stem_dims", tuple(int(d) for d in self.stem_dims))
        object.__setattr__(self, "seed_shape", tuple(int(d) for d in self.seed_shape))
        object.__setattr__(self, "blocks", tuple((int(c), int(r)) for c, r in self.blocks))

    @property
    def upsample(self) -> int:
        return int(np.prod([r for _, r in self.blocks])) if self.blocks else 1

    @property
    def height(self) -> int:
        return self.seed_shape[1] * self.upsample

    @property
    def width(self) -> int:
        return self.seed_shape[2] * self.upsample

    def validate(self) -> None:
        problems = []
        if self.posenc_freqs < 1:
            problems.append("posenc_freqs must be >= 1")
        if not self.posenc_base > 1:
            problems.append("posenc_base must be > 1")
        if any(d < 1 for d in self.stem_dims):
            problems.append("stem widths must be positive")
        if len(self.seed_shape) != 3 or any(d < 1 for d in self.seed_shape):
            problems.append(f"seed_shape must be 3 positive extents, got {self.seed_shape}")
        for c, r in self.blocks:
            if c < 1 or r < 1:
                problems.append(f"block ({c}, {r}) must have positive channels and factor")
        if self.frames < 2:
            problems.append("frames must be >= 2")
        if problems:
            raise SpecError("; ".join(problems))

    def check_clip(self, frames: int, height: int, width: int) -> None:
        self.validate()
        problems = []
        if frames != self.frames:
            problems.append(f"clip has {frames} frames, model expects {self.frames}")
        if height != self.height:
            problems.append(
                f"h0*prod(r) = {self.seed_shape[1]}*{self.upsample} = {self.height} != H = {height}"
            )
        if width != self.width:
            problems.append(
                f"w0*prod(r) = {self.seed_shape[2]}*{self.upsample} = {self.width} != W = {width}"
            )
        if problems:
            raise SpecError("; ".join(problems))

    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes = []
        fan_in = 2 * self.posenc_freqs
        for i, d in enumerate(self.stem_dims):
            shapes.append((f"stem.{i}", (d, fan_in)))
            fan_in = d
        c0, h0, w0 = self.seed_shape
        shapes.append((f"stem.{len(self.stem_dims)}", (c0 * h0 * w0, fan_in)))
        c_in = c0
        for i, (c, r) in enumerate(self.blocks):
            shapes.append((f"block.{i}", (c * r * r, c_in, 3, 3)))
            c_in = c
        shapes.append(("head", (3, c_in, 3, 3)))
        return shapes

    def param_counts(self) -> List[int]:
        return [int(np.prod(s)) for _, s in self.layer_shapes()]

    def to_text(self) -> str:
        """Canonical key=value text (sorted keys, one per line)."""
        items = {
            "blocks": ",".join(f"{c}x{r}" for c, r in self.blocks),
            "frames": str(self.frames),
            "posenc_base": repr(float(self.posenc_base)),
            "posenc_freqs": str(self.posenc_freqs),
            "seed_shape": ",".join(str(d) for d in self.seed_shape),
            "stem_dims": ",".join(str(d) for d in self.stem_dims),
        }
        return "".join(f"{k}={items[k]}\n" for k in sorted(items))

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        try:
            return cls(
                posenc_freqs=int(kv["posenc_freqs"]),
                posenc_base=float(kv["posenc_base"]),
                stem_dims=tuple(int(x) for x in kv["stem_dims"].split(",") if x),
                seed_shape=tuple(int(x) for x in kv["seed_shape"].split(",")),
                blocks=tuple(
                    tuple(int(p) for p in b.split("x")) for b in kv["blocks"].split(",") if b
                ),
                frames=int(kv["frames"]),
            )
        except (KeyError, ValueError) as exc:
            raise SpecError(f"malformed model spec text: {exc}") from None

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()


@dataclass
class Checkpoint:
    spec: ModelSpec
    weights: Dict[str, np.ndarray]
    layer_order: List[str]
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        expected = dict(self.spec.layer_shapes())
        if list(expected) != list(self.layer_order) or set(self.weights) != set(expected):
            raise SpecError("layer order must cover exactly the spec's layers")
        for name, shape in expected.items():
            w = np.asarray(self.weights[name], dtype=np.float64)
            if w.shape != shape:
                raise SpecError(f"weight {name!r} has shape {w.shape}, spec says {shape}")
            w = w.copy()
            w.setflags(write=False)
            self.weights[name] = w

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def param_counts(self) -> List[int]:
        return [self.weights[n].size for n in self.layer_order]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[n].reshape(-1) for n in self.layer_order])

    def unflatten(self, vec: np.ndarray) -> Dict[str, np.ndarray]:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != self.n_params:
            raise ValueError(f"flat vector has {vec.size} entries, model has {self.n_params}")
        out, i = {}, 0
        for n in self.layer_order:
            w = self.weights[n]
            out[n] = vec[i : i + w.size].reshape(w.shape)
            i += w.size
        return out

    def with_weights(self, weights: Dict[str, np.ndarray], **meta) -> "Checkpoint":
        m = dict(self.meta)
        m.update(meta)
        return Checkpoint(self.spec, dict(weights), list(self.layer_order), m)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.spec.digest())
        for n in self.layer_order:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.weights[n]).tobytes())
        return h.hexdigest()


def build_model(spec: ModelSpec, seed: int = 0) -> Checkpoint:
    """Untrained checkpoint with uniform fan-in scaled weights."""
    spec.validate()
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in spec.layer_shapes():
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape)
    order = [n for n, _ in spec.layer_shapes()]
    return Checkpoint(spec, weights, order, {"seed": int(seed), "epochs": 0})


# graph -------------------------------------------------------------------------

_GRAPHS: Dict[ModelSpec, "ModelGraph"] = {}


class ModelGraph:
    """The NeRV-lite forward graph for one spec, with named layer-output nodes."""

    def __init__(self, spec: ModelSpec):
        spec.validate()
        self.spec = spec
        g = Graph()
        g.input("tau")
        x = g.positional_encoding("tau", spec.posenc_freqs, spec.posenc_base, name="pe")
        self.layer_nodes: Dict[str, str] = {}
        shapes = spec.layer_shapes()
        n_stem = len(spec.stem_dims) + 1
        for name, shape in shapes[:n_stem]:
            g.parameter(name, np.zeros(shape))
            z = g.dense(name, x, name=f"{name}.out")
            self.layer_nodes[name] = z
            x = g.activation(z, "gelu", name=f"{name}.act")
        x = g.reshape(x, spec.seed_shape, name="seed")
        for (name, shape), (_, r) in zip(shapes[n_stem:-1], spec.blocks):
            g.parameter(name, np.zeros(shape))
            z = g.conv3x3(name, x, name=f"{name}.out")
            self.layer_nodes[name] = z
            x = g.pixel_shuffle(z, r, name=f"{name}.shuffle")
            x = g.activation(x, "gelu", name=f"{name}.act")
        g.parameter("head", np.zeros(shapes[-1][1]))
        z = g.conv3x3("head", x, name="head.out")
        self.layer_nodes["head"] = z
        self.output = g.activation(z, "sigmoid", name="frame")
        g.input("target")
        self.loss = g.mse_loss(self.output, "target", name="loss")
        # layer outputs as seen downstream (after shuffle/activation), each with its own loss node
        self.layer_outputs = {n: (f"{n}.act" if n != "head" else "frame") for n in self.layer_nodes}
        self.layer_losses = {}
        for n, node in self.layer_outputs.items():
            g.input(f"{n}.target")
            self.layer_losses[n] = g.mse_loss(node, f"{n}.target", name=f"{n}.loss")
        self.graph = g

    def taus(self, frame_indices) -> np.ndarray:
        t = np.asarray(frame_indices, dtype=np.float64).reshape(-1, 1)
        return t / (self.spec.frames - 1)

    def bindings(self, weights, frame_indices, target=None) -> dict:
        b = {name: Tensor._wrap(np.asarray(w, dtype=np.float64)) for name, w in weights.items()}
        b["tau"] = Tensor._wrap(self.taus(frame_indices))
        if target is not None:
            b["target"] = Tensor._wrap(np.asarray(target, dtype=np.float64))
        return b

    def render(self, weights, frame_indices) -> np.ndarray:
        out = self.graph.forward(self.bindings(weights, frame_indices), root=self.output)
        return out.array

    def loss_and_grads(self, weights, frame_indices, target) -> Tuple[float, Dict[str, np.ndarray]]:
        loss = self.graph.forward(self.bindings(weights, frame_indices, target), root=self.loss)
        grads = self.graph.backward(self.loss)
        return loss.item(), {k: v.array for k, v in grads.items()}

    def layer_output(self, weights, frame_indices, layer: str) -> np.ndarray:
        node = self.layer_outputs[layer]
        return self.graph.forward(self.bindings(weights, frame_indices), root=node).array

    def layer_loss_and_grads(self, weights, frame_indices, layer: str, target):
        b = self.bindings(weights, frame_indices)
        b[f"{layer}.target"] = Tensor._wrap(np.asarray(target, dtype=np.float64))
        root = self.layer_losses[layer]
        loss = self.graph.forward(b, root=root)
        grads = self.graph.backward(root)
        return loss.item(), {k: v.array for k, v in grads.items()}


def model_graph(spec: ModelSpec) -> ModelGraph:
    # graphs carry per-evaluation state; cached instances are not shared across threads
    mg = _GRAPHS.get(spec)
    if mg is None:
        mg = _GRAPHS[spec] = ModelGraph(spec)
    return mg


def render(ckpt: Checkpoint, t: int) -> Tensor:
    """Frame ``t`` as a [3, H, W] tensor with values in [0, 1]."""
    if not (0 <= int(t) < ckpt.spec.frames) or int(t) != t:
        raise IndexError(f"frame index {t} outside [0, {ckpt.spec.frames})")
    out = model_graph(ckpt.spec).render(ckpt.weights, [int(t)])
    return Tensor._wrap(out[0].copy())


def render_all(spec: ModelSpec, weights: Dict[str, np.ndarray], batch: int = 8) -> np.ndarray:
    """All frames [T, 3, H, W] for an arbitrary weight set on ``spec``."""
    mg = model_graph(spec)
    frames = []
    for start in range(0, spec.frames, batch):
        idx = list(range(start, min(spec.frames, start + batch)))
        frames.append(mg.render(weights, idx).copy())
    return np.concatenate(frames, axis=0)


def full_loss_and_grad(spec: ModelSpec, weights, target: np.ndarray, batch: int = 8):
    """Mean-over-clip MSE and its gradient, accumulated over frame batches."""
    mg = model_graph(spec)
    total = 0.0
    grads = {n: np.zeros(np.shape(w)) for n, w in weights.items()}
    T = spec.frames
    for start in range(0, T, batch):
        idx = list(range(start, min(T, start + batch)))
        loss, g = mg.loss_and_grads(weights, idx, target[idx])
        frac = len(idx) / T
        total += loss * frac
        for n in grads:
            grads[n] += g[n] * frac
    return total, grads


# metrics -----------------------------------------------------------------------


def psnr(a, b) -> float:
    a = np.asarray(a.array if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.array if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr operands differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# training -----------------------------------------------------------------------


@dataclass
class TrainOptions:
    epochs: int = 1500
    lr: float = 1e-2
    batch: int = 4
    seed: int = 0
    lr_min_frac: float = 0.01


class Adam:
    """Adam over a dict of arrays."""

    def __init__(self, params: Dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(base: float, step: int, total: int, min_frac: float = 0.0) -> float:
    if total <= 1:
        return base
    frac = step / (total - 1)
    return base * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def train(ckpt: Checkpoint, clip: VideoClip, opts: Optional[TrainOptions] = None, log_every: int = 0) -> Checkpoint:
    """Fit the weights to ``clip`` with Adam and a cosine-annealed learning rate."""
    opts = opts or TrainOptions()
    spec = ckpt.spec
    spec.check_clip(*clip.dims)
    target = clip.as_float()
    params = {n: ckpt.weights[n].copy() for n in ckpt.layer_order}
    initial_loss, _ = full_loss_and_grad(spec, params, target)
    if opts.epochs <= 0:
        return ckpt.with_weights(params, final_loss=initial_loss, initial_loss=initial_loss)
    mg = model_graph(spec)
    rng = np.random.default_rng(opts.seed)
    opt = Adam(params)
    T = spec.frames
    steps_per_epoch = math.ceil(T / opts.batch)
    total_steps = opts.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(opts.epochs):
        perm = rng.permutation(T)
        epoch_loss = 0.0
        for k in range(steps_per_epoch):
            idx = perm[k * opts.batch : (k + 1) * opts.batch]
            try:
                loss, grads = mg.loss_and_grads(params, idx, target[idx])
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite gradient at epoch {epoch}, step {step}: {exc}") from None
            if not math.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}, step {step}")
            opt.step(params, grads, cosine_lr(opts.lr, step, total_steps, opts.lr_min_frac))
            epoch_loss += loss * len(idx) / T
            step += 1
        history.append(epoch_loss)
        if log_every and (epoch % log_every == 0 or epoch == opts.epochs - 1):
            logger.info("epoch %d loss %.3e", epoch, epoch_loss)
    final_loss, _ = full_loss_and_grad(spec, params, target)
    return ckpt.with_weights(
        params,
        epochs=int(ckpt.meta.get("epochs", 0)) + opts.epochs,
        final_loss=final_loss,
        initial_loss=initial_loss,
        train_seed=opts.seed,
    )


# checkpoint file ------------------------------------------------------------------


def _meta_text(meta: Dict[str, object]) -> str:
    lines = []
    for k in sorted(meta):
        v = meta[k]
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}={v}\n")
    return "".join(lines)


def _parse_meta(text: str) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for line in text.splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    spec_text = ckpt.spec.to_text().encode()
    meta_text = _meta_text(ckpt.meta).encode()
    body = bytearray()
    body += struct.pack("<I", len(ckpt.layer_order))
    for name in ckpt.layer_order:
        w = np.ascontiguousarray(ckpt.weights[name], dtype="<f8")
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", w.ndim) + struct.pack(f"<{w.ndim}I", *w.shape)
        body += w.tobytes()
    head = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION)
    head += struct.pack("<I", len(spec_text)) + spec_text
    head += struct.pack("<I", len(meta_text)) + meta_text
    return bytes(head) + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", raw, 8)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        off = 12
        (n,) = struct.unpack_from("<I", raw, off)
        spec = ModelSpec.from_text(raw[off + 4 : off + 4 + n].decode())
        off += 4 + n
        (n,) = struct.unpack_from("<I", raw, off)
        meta = _parse_meta(raw[off + 4 : off + 4 + n].decode())
        off += 4 + n
        body = raw[off:-4]
        (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
        if zlib.crc32(body) != crc:
            raise CheckpointFormatError("checkpoint payload checksum mismatch")
        (count,) = struct.unpack_from("<I", body, 0)
        pos = 4
        weights, order = {}, []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2 : pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", body, pos)
            shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape))
            weights[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            order.append(name)
    except (struct.error, SpecError, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"checkpoint truncated or malformed: {exc}") from None
    return Checkpoint(spec, weights, order, meta)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())

"""Training, fine-tuning, and checkpoint persistence for the velocity field.

The whole pipeline is a pure function of (manifest, config): shuffles are
derived from (seed, epoch), noise and time draws from (seed, epoch), and
the optimizer is plain Adam, so repeated runs produce byte-identical
checkpoints.

Checkpoint file layout (little-endian):
    magic "RFLW" | version u32 | desc_len u32 | descriptor JSON (UTF-8)
    | base count u64 | base params f64[] | adapter count u64
    | adapter params f64[] | checksum u64
The checksum is 64-bit FNV-1a over the base-parameter bytes followed by
the adapter bytes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from . import numerics as nm
from .errors import (CheckpointFormatError, CompatibilityError, ConfigError,
                     DataError, DivergenceError)
from .flowmodel import VelocityFieldNet, flow_matching_loss, pixels_to_unit
from .lesiondata import Manifest, encode_caption
from .rng import Rng, derive_seed

CHECKPOINT_MAGIC = b"RFLW"
CHECKPOINT_VERSION = 1
SCHEDULES = ("constant", "cosine")

_TAG_INIT = 201
_TAG_SHUFFLE = 210
_TAG_NOISE = 211
_TAG_LORA_INIT = 212
_TAG_EVAL = 220

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a over raw bytes."""
    if _accel.HAVE_NUMBA:
        arr = np.frombuffer(data, dtype=np.uint8)
        return int(_accel.fnv1a_update(arr, np.uint64(h)))
    mask = 0xFFFFFFFFFFFFFFFF
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & mask
    return h


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 8.0
    layers: tuple[bool, bool, bool] = (True, True, True)

    def validate(self) -> None:
        if self.rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"lora alpha must be positive, got {self.alpha}")
        if len(self.layers) != 3 or not any(self.layers):
            raise ConfigError("lora layers must enable at least one of the three layers")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    schedule: str = "cosine"
    seed: int = 1
    resolution: int = 16
    hidden: int | None = None
    freeze_base: bool = False
    lora: LoraConfig | None = None

    def validate(self) -> None:
        # epochs == 0 is allowed only for adapter runs, where it means
        # "attach adapters, train nothing" (useful for identity checks)
        min_epochs = 0 if self.lora is not None else 1
        if self.epochs < min_epochs:
            raise ConfigError(f"epochs must be >= {min_epochs}, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.lora is not None:
            self.lora.validate()

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["lora"] = None if self.lora is None else dict(self.lora.__dict__)
        if out["lora"] is not None:
            out["lora"]["layers"] = list(out["lora"]["layers"])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        lora = d.get("lora")
        if lora is not None:
            lora = LoraConfig(rank=lora["rank"], alpha=lora["alpha"],
                              layers=tuple(lora["layers"]))
        d["lora"] = lora
        if d.get("hidden") is not None:
            d["hidden"] = int(d["hidden"])
        return cls(**d)


def cosine_lr(base_lr: float, progress: float) -> float:
    """0.5 * lr * (1 + cos(pi * progress)); lr at 0, exactly 0 at 1."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "constant":
        return config.learning_rate
    progress = step / total_steps if total_steps > 0 else 0.0
    return cosine_lr(config.learning_rate, progress)


class Adam:
    """Standard Adam with bias correction; state per parameter tensor."""

    def __init__(self, params: list[nm.Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if _accel.HAVE_NUMBA and g.flags.c_contiguous:
                _accel.adam_update(p.data.reshape(-1), g.reshape(-1),
                                   m.reshape(-1), v.reshape(-1),
                                   b1, b2, lr, self.eps, bias1, bias2)
            else:
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# ---------------------------------------------------------------------------
# data access


def load_split(manifest: Manifest, resolution: int, split: str,
               label: str | None = None) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(states in [-1,1], condition vectors, record ids) for one split."""
    records = manifest.select(split=split, resolution=resolution, label=label)
    if not records:
        raise DataError(f"no {split} records at resolution {resolution}"
                        + (f" with label {label}" if label else ""))
    x = np.stack([pixels_to_unit(manifest.load_image(r)) for r in records])
    c = np.stack([encode_caption(r.caption) for r in records])
    return x, c, [r.id for r in records]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """In-memory checkpoint: architecture, flat parameter blocks, metadata."""

    arch: dict
    base_params: list[np.ndarray]
    adapter_params: list[np.ndarray] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_net(cls, net: VelocityFieldNet, metadata: dict) -> "Checkpoint":
        arch = {
            "d_data": net.d_data,
            "hidden": net.hidden,
            "resolution": net.resolution,
            "layers": [[l.d_out, l.d_in] for l in net.layers],
            "lora": None,
        }
        adapters = []
        lora_layers = [l.adapter is not None for l in net.layers]
        if any(lora_layers):
            first = next(l.adapter for l in net.layers if l.adapter is not None)
            arch["lora"] = {"rank": first.rank, "alpha": first.alpha, "layers": lora_layers}
            for layer in net.layers:
                if layer.adapter is not None:
                    adapters.append(layer.adapter.A.data.copy())
                    adapters.append(layer.adapter.B.data.copy())
        base = []
        for layer in net.layers:
            base.append(layer.weight.data.copy())
            base.append(layer.bias.data.copy())
        return cls(arch=arch, base_params=base, adapter_params=adapters, metadata=metadata)

    def to_net(self) -> VelocityFieldNet:
        net = VelocityFieldNet(d_data=self.arch["d_data"], hidden=self.arch["hidden"],
                               resolution=self.arch["resolution"])
        expected = [[l.d_out, l.d_in] for l in net.layers]
        if [list(map(int, s)) for s in self.arch["layers"]] != expected:
            raise CompatibilityError(f"layer shapes {self.arch['layers']} do not match "
                                     f"architecture {expected}", field="layers")
        for layer, w, b in zip(net.layers, self.base_params[0::2], self.base_params[1::2]):
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise CompatibilityError("parameter block does not match layer shapes",
                                         field="layers")
            layer.weight.data[...] = w
            layer.bias.data[...] = b
        lora = self.arch.get("lora")
        if lora:
            idx = 0
            for layer, enabled in zip(net.layers, lora["layers"]):
                if not enabled:
                    continue
                adapter = layer.attach_lora(lora["rank"], lora["alpha"], Rng(0))
                adapter.A.data[...] = self.adapter_params[idx]
                adapter.B.data[...] = self.adapter_params[idx + 1]
                idx += 2
            # adapter checkpoints only come from frozen-base training
            net.freeze_base()
        return net

    def base_bytes(self) -> bytes:
        return b"".join(p.astype("<f8", copy=False).tobytes() for p in self.base_params)

    def adapter_bytes(self) -> bytes:
        return b"".join(p.astype("<f8", copy=False).tobytes() for p in self.adapter_params)


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    desc = json.dumps({"arch": ckpt.arch, "meta": ckpt.metadata}).encode("utf-8")
    base = ckpt.base_bytes()
    adapters = ckpt.adapter_bytes()
    checksum = fnv1a64(base + adapters)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<Q", len(base) // 8))
        f.write(base)
        f.write(struct.pack("<Q", len(adapters) // 8))
        f.write(adapters)
        f.write(struct.pack("<Q", checksum))


def load_checkpoint(path: Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(
                f"{path}: file truncated inside {what}; checksum cannot be verified",
                field="checksum")
        out = view[pos:pos + n]
        pos += n
        return out

    magic = bytes(take(4, "magic"))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}, expected "
                                    f"{CHECKPOINT_MAGIC!r}", field="magic")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}; supported: "
                                    f"[{CHECKPOINT_VERSION}]", field="version")
    (desc_len,) = struct.unpack("<I", take(4, "descriptor length"))
    desc = json.loads(bytes(take(desc_len, "descriptor")).decode("utf-8"))
    (base_count,) = struct.unpack("<Q", take(8, "parameter count"))
    base_blob = bytes(take(8 * base_count, "parameter block"))
    (adapter_count,) = struct.unpack("<Q", take(8, "adapter count"))
    adapter_blob = bytes(take(8 * adapter_count, "adapter block"))
    (stored_sum,) = struct.unpack("<Q", take(8, "checksum"))
    actual = fnv1a64(base_blob + adapter_blob)
    if actual != stored_sum:
        raise CheckpointFormatError(f"{path}: checksum mismatch (stored {stored_sum:#x}, "
                                    f"computed {actual:#x})", field="checksum")

    arch = desc["arch"]
    base_flat = np.frombuffer(base_blob, dtype="<f8")
    shapes = []
    for d, k in arch["layers"]:
        shapes.append((d, k))
        shapes.append((d,))
    lora = arch.get("lora")
    adapter_shapes = []
    if lora:
        for (d, k), enabled in zip(arch["layers"], lora["layers"]):
            if enabled:
                adapter_shapes.append((lora["rank"], k))
                adapter_shapes.append((d, lora["rank"]))
    if sum(int(np.prod(s)) for s in shapes) != base_count:
        raise CheckpointFormatError(f"{path}: parameter count {base_count} does not match "
                                    "the architecture descriptor", field="parameter count")
    adapter_flat = np.frombuffer(adapter_blob, dtype="<f8")
    if sum(int(np.prod(s)) for s in adapter_shapes) != adapter_count:
        raise CheckpointFormatError(f"{path}: adapter count {adapter_count} does not match "
                                    "the architecture descriptor", field="adapter count")

    def unflatten(flat, shape_list):
        out, ofs = [], 0
        for s in shape_list:
            n = int(np.prod(s))
            out.append(flat[ofs:ofs + n].reshape(s).copy())
            ofs += n
        return out

    return Checkpoint(arch=arch, base_params=unflatten(base_flat, shapes),
                      adapter_params=unflatten(adapter_flat, adapter_shapes),
                      metadata=desc.get("meta", {}), version=version)


# ---------------------------------------------------------------------------
# training loops


def _run_epochs(net: VelocityFieldNet, x: np.ndarray, c: np.ndarray,
                config: TrainConfig) -> list[float]:
    params = net.trainable_parameters()
    adam = Adam(params)
    n = x.shape[0]
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    curve = []
    step = 0
    d = net.d_data
    for epoch in range(config.epochs):
        perm = Rng(derive_seed(derive_seed(config.seed, _TAG_SHUFFLE), epoch)).permutation(n)
        noise = Rng(derive_seed(derive_seed(config.seed, _TAG_NOISE), epoch))
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            z1 = x[idx]
            z0 = noise.normals(len(idx) * d).reshape(len(idx), d)
            loss = flow_matching_loss(net, z0, z1, c[idx], noise)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch "
                                      f"{start // config.batch_size}", epoch=epoch,
                                      batch=start // config.batch_size)
            grads = nm.grad(loss, params)
            adam.step(grads, lr_at(config, step, total_steps))
            step += 1
            loss_sum += value * len(idx)
        curve.append(loss_sum / n)
    return curve


def train_base(manifest: Manifest, config: TrainConfig) -> tuple[Checkpoint, list[float]]:
    """Train all parameters of a fresh velocity field on the train split."""
    config.validate()
    if config.lora is not None:
        raise ConfigError("train_base does not take adapters; use finetune_lora")
    x, c, _ = load_split(manifest, config.resolution, "train")
    net = VelocityFieldNet.create(config.resolution, Rng(derive_seed(config.seed, _TAG_INIT)),
                                  hidden=config.hidden)
    curve = _run_epochs(net, x, c, config)
    meta = {"config": config.to_dict(), "final_loss": curve[-1] if curve else None,
            "seed": config.seed}
    return Checkpoint.from_net(net, meta), curve


def finetune_lora(base: Checkpoint, manifest: Manifest,
                  config: TrainConfig) -> tuple[Checkpoint, list[float]]:
    """Train low-rank adapters on a frozen base model.

    The returned checkpoint carries the base parameter block unchanged,
    byte for byte, plus the trained adapter block.
    """
    config.validate()
    if config.lora is None:
        raise ConfigError("finetune_lora needs a lora config")
    if not config.freeze_base:
        raise ConfigError("finetune_lora requires freeze_base = true")
    if base.arch.get("lora"):
        raise CompatibilityError("base checkpoint already carries adapters", field="lora")
    for name, got, want in (
        ("resolution", base.arch["resolution"], config.resolution),
        ("hidden", base.arch["hidden"], config.hidden or base.arch["hidden"]),
    ):
        if got != want:
            raise CompatibilityError(f"base checkpoint {name} is {got}, config wants {want}",
                                     field=name)

    net = base.to_net()
    base_bytes_before = base.base_bytes()
    lora_rng = Rng(derive_seed(config.seed, _TAG_LORA_INIT))
    for layer, enabled in zip(net.layers, config.lora.layers):
        if enabled:
            layer.attach_lora(config.lora.rank, config.lora.alpha, lora_rng)
    net.freeze_base()

    if config.epochs > 0:
        x, c, _ = load_split(manifest, config.resolution, "train")
        curve = _run_epochs(net, x, c, config)
    else:
        curve = []

    meta = {"config": config.to_dict(), "final_loss": curve[-1] if curve else None,
            "seed": config.seed, "base_meta": base.metadata}
    out = Checkpoint.from_net(net, meta)
    if out.base_bytes() != base_bytes_before:
        raise RuntimeError("frozen base parameters changed during fine-tuning")
    return out, curve


def evaluate_flow_loss(ckpt_or_net, manifest: Manifest, resolution: int, split: str,
                       seed: int, label: str | None = None, batch_size: int = 64) -> float:
    """Deterministic held-out flow-matching loss (no training).

    The same `seed` gives the same noise and time draws, so two models can
    be compared on identical evaluation instances.
    """
    net = ckpt_or_net.to_net() if isinstance(ckpt_or_net, Checkpoint) else ckpt_or_net
    x, c, _ = load_split(manifest, resolution, split, label=label)
    rng = Rng(derive_seed(seed, _TAG_EVAL))
    total = 0.0
    d = net.d_data
    with nm.no_grad():
        for start in range(0, x.shape[0], batch_size):
            z1 = x[start:start + batch_size]
            z0 = rng.normals(z1.shape[0] * d).reshape(z1.shape[0], d)
            loss = flow_matching_loss(net, z0, z1, c[start:start + batch_size], rng)
            total += loss.item() * z1.shape[0]
    return total / x.shape[0]


def write_loss_curve(curve: list[float], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,loss\n")
        for i, v in enumerate(curve):
            f.write(f"{i},{v!r}\n")

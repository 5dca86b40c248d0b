"""Training loop with pruning hooks, SGD-family optimizers and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, ParameterError
from .models import ModelSpec, evaluate
from .pruning import Pruner, PruneState, PruningSchedule, sparsity_at
from .tensor import SeededRng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" | "momentum"
    momentum: float = 0.9
    clip_norm: float | None = None
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "momentum"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


@dataclass(frozen=True)
class LrSchedule:
    """``constant``: lr.  ``exp``: lr * rate**(t/every).
    ``step``: lr * factor**(floor((t-start)/every)+1) from ``start`` on."""

    kind: str = "constant"
    lr: float = 0.1
    rate: float = 0.5
    every: int = 1000
    factor: float = 0.5
    start: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "exp", "step"):
            raise ConfigError(f"unknown learning-rate schedule {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.every < 1:
            raise ConfigError("decay interval must be at least 1 step")
        if self.kind == "step" and not 0 < self.factor < 1:
            raise ConfigError(f"decay factor must be in (0, 1), got {self.factor}")
        if self.kind == "exp" and not self.rate > 0:
            raise ConfigError(f"decay rate must be positive, got {self.rate}")


def lr_at(sched, t):
    if sched.kind == "constant":
        return sched.lr
    if sched.kind == "exp":
        return sched.lr * sched.rate ** (t / sched.every)
    if t < sched.start:
        return sched.lr
    return sched.lr * sched.factor ** ((t - sched.start) // sched.every + 1)


def global_norm(grads):
    total = 0.0
    for g in grads:
        total += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
    return math.sqrt(total)


def clip_global_norm(grads, ceiling):
    """Rescale ``grads`` (a list) so their joint L2 norm is at most ``ceiling``.

    Returns ``(grads, norm_before)``; the input list is returned untouched
    when no scaling is needed.
    """
    if not ceiling > 0:
        raise ParameterError(f"clip ceiling must be positive, got {ceiling}")
    norm = global_norm(grads)
    if norm <= ceiling:
        return grads, norm
    scale = ceiling / norm
    return [g * g.dtype.type(scale) for g in grads], norm


class Optimizer:
    """SGD with optional momentum, clipping and weight decay.

    Updates the model's stored arrays in place.  Gradients are masked after
    weight decay is added, so masked weights never move.
    """

    def __init__(self, cfg, tensors):
        self.cfg = cfg
        self.velocity = (
            {k: np.zeros_like(v) for k, v in tensors.items()} if cfg.kind == "momentum" else {}
        )

    def on_mask_update(self, masks):
        for name, mask in masks.items():
            v = self.velocity.get(name)
            if v is not None:
                v[~mask] = 0

    def step(self, tensors, grads, masks, lr):
        names = list(tensors)
        gs = [grads[k] for k in names]
        if self.cfg.clip_norm is not None:
            gs, _ = clip_global_norm(gs, self.cfg.clip_norm)
        wd = self.cfg.weight_decay
        for name, g in zip(names, gs):
            w = tensors[name]
            if wd:
                g = g + w.dtype.type(wd) * w
            mask = masks.get(name)
            if mask is not None:
                g = np.where(mask, g, g.dtype.type(0))
            if self.cfg.kind == "momentum":
                v = self.velocity[name]
                v *= v.dtype.type(self.cfg.momentum)
                v += g
                g = v
            w -= w.dtype.type(lr) * g


def train_step(model, batch, opt, lr, step=None):
    """One forward/backward/update.  Returns the batch loss."""
    loss, grads = model.loss_and_grads(batch)
    if not math.isfinite(loss):
        raise DivergenceError(step, loss)
    opt.step(model.tensors(), grads, model.masks(), lr)
    return loss


# --- run configuration ---------------------------------------------------


@dataclass
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr: LrSchedule = field(default_factory=LrSchedule)
    pruning: PruningSchedule | None = None
    steps: int = 1000
    batch_size: int = 64
    eval_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.eval_interval < 1 or self.batch_size < 1:
            raise ConfigError("steps, eval_interval and batch_size must be positive")


@dataclass
class TrainResult:
    trace: list
    model: object
    checkpoint: "Checkpoint"
    final: dict


TRACE_COLUMNS = [
    "step",
    "lr",
    "commanded_sparsity",
    "train_loss",
    "eval_metric",
    "eval_loss",
    "actual_sparsity",
    "nnz_params",
]


def _prunable_sparsity(model):
    params = model.masked_params()
    total = sum(p.size for p in params)
    return sum(p.zero_count for p in params) / total if total else 0.0


def run_training(cfg, resume=None, stop_at=None, manifest_extra=None, on_step=None):
    """Train ``cfg.model`` for ``cfg.steps`` steps, pruning on schedule.

    At every step ``t`` the pruner runs first, then (every
    ``eval_interval`` steps) the model is evaluated, then one optimizer
    step is taken.  Evaluating after the mask update makes pruning damage
    visible in the trace.  ``resume`` continues from a :class:`Checkpoint`;
    ``stop_at`` ends early (used to produce mid-run checkpoints).
    ``on_step(t, model)`` is called after every optimizer step.
    """
    spec = cfg.model
    data = spec.build_data()
    root = SeededRng(cfg.seed)
    model = spec.build_model(root.spawn(), data)
    data_rng = root.spawn()
    opt = Optimizer(cfg.optimizer, model.tensors())

    pruner = None
    if cfg.pruning is not None:
        pruner = Pruner(model.masked_params(), cfg.pruning, PruneState())
        if pruner.last_step >= cfg.steps:
            raise ConfigError(
                f"pruning schedule ends at step {pruner.last_step}, "
                f"past the end of training ({cfg.steps} steps)"
            )

    start = 0
    if resume is not None:
        start = resume.restore(model, opt, data_rng, pruner)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    batch_size = spec.batch_size(cfg.batch_size)

    trace = []
    loss_sum, loss_n = 0.0, 0

    def record(t):
        nonlocal loss_sum, loss_n
        m = evaluate(model, data)
        trace.append(
            {
                "step": t,
                "lr": lr_at(cfg.lr, t),
                "commanded_sparsity": sparsity_at(cfg.pruning, t) if cfg.pruning else 0.0,
                "train_loss": loss_sum / loss_n if loss_n else float("nan"),
                "eval_metric": m["value"],
                "eval_loss": m["loss"],
                "actual_sparsity": _prunable_sparsity(model),
                "nnz_params": m["nnz_params"],
            }
        )
        loss_sum, loss_n = 0.0, 0
        log.debug("step %d: %s=%.4f", t, m["metric"], m["value"])
        return m

    for t in range(start, end):
        if pruner is not None and pruner.step(t):
            opt.on_mask_update(model.masks())
        if t % cfg.eval_interval == 0:
            record(t)
        batch = data.batch(data_rng, batch_size)
        loss = train_step(model, batch, opt, lr_at(cfg.lr, t), step=t)
        loss_sum += loss
        loss_n += 1
        if on_step is not None:
            on_step(t, model)

    final = record(end)
    manifest = {"step": end, "config_hash": config_hash(cfg), "final": final}
    manifest.update(manifest_extra or {})
    ckpt = Checkpoint.capture(model, opt, end, data_rng, pruner, manifest)
    return TrainResult(trace=trace, model=model, checkpoint=ckpt, final=final)


def config_hash(cfg):
    from .config import config_to_text

    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()


# --- checkpoint container ------------------------------------------------

CKPT_MAGIC = b"SPZ1"
CKPT_VERSION = 1
KIND_TENSOR, KIND_MASK, KIND_OPT, KIND_SCALAR = 0, 1, 2, 3
_DTYPE_CODE = {
    np.dtype(bool): 0,
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.uint64): 3,
    np.dtype(np.int64): 4,
}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}


def write_container(path, entries):
    """Write ``[(name, kind, array), ...]`` as an SPZ1 container."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<IQ", CKPT_VERSION, len(entries))
    for name, kind, arr in entries:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BBB", kind, _DTYPE_CODE[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        if arr.dtype == bool:
            out += np.packbits(arr.ravel(), bitorder="little").tobytes()
        else:
            out += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(bytes(out))


def read_container(path):
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an SPZ1 container")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 16
    entries = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + n].decode("utf-8")
        off += n
        kind, code, rank = struct.unpack_from("<BBB", buf, off)
        off += 3
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(shape, dtype=np.int64))
        dtype = _CODE_DTYPE[code]
        if dtype == bool:
            nbytes = (size + 7) // 8
            bits = np.frombuffer(buf, np.uint8, nbytes, off)
            arr = np.unpackbits(bits, count=size, bitorder="little").astype(bool)
        else:
            nbytes = size * dtype.itemsize
            arr = np.frombuffer(buf, dtype.newbyteorder("<"), size, off).astype(dtype)
        off += nbytes
        entries.append((name, kind, arr.reshape(shape)))
    return entries


@dataclass
class Checkpoint:
    step: int
    tensors: dict
    masks: dict
    opt_state: dict
    scalars: dict
    manifest: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model, opt, step, rng, pruner, manifest=None):
        scalars = {
            "step": np.array(step, dtype=np.uint64),
            "rng_state": np.array(rng.state, dtype=np.uint64),
        }
        if pruner is not None:
            st = pruner.state
            scalars["prune.frozen"] = np.array(int(st.frozen), dtype=np.int64)
            scalars["prune.layer_cursor"] = np.array(st.layer_cursor, dtype=np.int64)
            scalars["prune.commanded"] = np.asarray(st.commanded, dtype=np.float64)
        return cls(
            step=step,
            tensors={k: v.copy() for k, v in model.tensors().items()},
            masks={k: m.copy() for k, m in model.masks().items()},
            opt_state={k: v.copy() for k, v in opt.velocity.items()},
            scalars=scalars,
            manifest=dict(manifest or {}),
        )

    def restore(self, model, opt, rng, pruner):
        """Load state into freshly built objects; returns the step to resume at."""
        params = model.named_parameters()
        for name, arr in self.tensors.items():
            target = model.tensors()[name]
            target[...] = arr
        for name, mask in self.masks.items():
            params[name].mask = mask.copy()
        for name, v in self.opt_state.items():
            opt.velocity[name][...] = v
        rng.state = int(self.scalars["rng_state"])
        if pruner is not None and "prune.frozen" in self.scalars:
            pruner.state.frozen = bool(self.scalars["prune.frozen"])
            pruner.state.layer_cursor = int(self.scalars["prune.layer_cursor"])
            pruner.state.commanded = [float(x) for x in self.scalars["prune.commanded"]]
        return self.step

    def effective_weights(self):
        """Stored values with masked positions zeroed."""
        out = {}
        for name, arr in self.tensors.items():
            mask = self.masks.get(name)
            out[name] = arr if mask is None else np.where(mask, arr, arr.dtype.type(0))
        return out

    def save(self, path):
        path = Path(path)
        entries = [(k, KIND_TENSOR, v) for k, v in self.tensors.items()]
        entries += [(k, KIND_MASK, m) for k, m in self.masks.items()]
        entries += [(k, KIND_OPT, v) for k, v in self.opt_state.items()]
        entries += [(k, KIND_SCALAR, v) for k, v in self.scalars.items()]
        write_container(path, entries)
        manifest = dict(self.manifest, step=self.step)
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        groups = {KIND_TENSOR: {}, KIND_MASK: {}, KIND_OPT: {}, KIND_SCALAR: {}}
        for name, kind, arr in read_container(path):
            groups[kind][name] = arr
        mpath = path.with_suffix(".json")
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        return cls(
            step=int(groups[KIND_SCALAR]["step"]),
            tensors=groups[KIND_TENSOR],
            masks=groups[KIND_MASK],
            opt_state=groups[KIND_OPT],
            scalars=groups[KIND_SCALAR],
            manifest=manifest,
        )

"""Desk-scale models and datasets for sparse-vs-dense comparisons.

* :class:`Mlp` - ReLU MLP whose hidden widths scale with a width multiplier,
  trained on a :class:`TeacherDataset` (labels from a frozen random network).
* :class:`LstmLm` - embedding, two stacked LSTM layers and a softmax,
  trained on the bundled character corpus (:class:`CharCorpus`).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import ConfigError, ParameterError
from .layers import Embedding, Linear, LstmCell, SoftmaxXentHead, nll_from_logits
from .pruning import MaskedParameter
from .tensor import F32, SeededRng, relu

LM_PRESETS = {"small": 64, "medium": 128, "large": 256}


def perplexity(mean_nll):
    return math.exp(mean_nll)


class Model:
    """Shared parameter bookkeeping. Subclasses define :meth:`layers`."""

    def layers(self):
        raise NotImplementedError

    def named_parameters(self):
        """``name -> MaskedParameter | ndarray`` in declaration order."""
        out = {}
        for prefix, layer in self.layers():
            for key, p in layer.named_parameters().items():
                out[f"{prefix}.{key}"] = p
        return out

    def masked_params(self):
        return [p for p in self.named_parameters().values() if isinstance(p, MaskedParameter)]

    def tensors(self):
        """``name -> stored values`` (the arrays the optimizer updates in place)."""
        return {
            k: (p.values if isinstance(p, MaskedParameter) else p)
            for k, p in self.named_parameters().items()
        }

    def masks(self):
        return {
            k: p.mask for k, p in self.named_parameters().items() if isinstance(p, MaskedParameter)
        }

    @property
    def total_params(self):
        return sum(int(v.size) for v in self.tensors().values())

    @property
    def nnz_params(self):
        """Unmasked weights plus every never-pruned parameter."""
        n = 0
        for p in self.named_parameters().values():
            n += p.active_count if isinstance(p, MaskedParameter) else int(p.size)
        return n

    def _collect(self, prefix, grads, into):
        for key, g in grads.items():
            into[f"{prefix}.{key}"] = g


# --- MLP -----------------------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 32
    hidden_widths: tuple = (64, 64)
    width_multiplier: float = 1.0
    output_dim: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not 0 < self.width_multiplier <= 1:
            raise ConfigError(f"width multiplier must be in (0, 1], got {self.width_multiplier}")

    @property
    def scaled_widths(self):
        return tuple(max(1, round(self.width_multiplier * w)) for w in self.hidden_widths)

    def param_count(self):
        dims = (self.input_dim, *self.scaled_widths, self.output_dim)
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    def weight_count(self):
        dims = (self.input_dim, *self.scaled_widths, self.output_dim)
        return sum(a * b for a, b in zip(dims[:-1], dims[1:]))


class Mlp(Model):
    kind = "mlp"

    def __init__(self, cfg, hidden, head):
        self.cfg = cfg
        self.hidden = hidden
        self.head = head

    def layers(self):
        return [(f"hidden{i}", l) for i, l in enumerate(self.hidden)] + [("softmax", self.head)]

    def logits(self, x):
        for layer in self.hidden:
            x = relu(layer.forward(x)[0])
        return self.head.forward(x)[0]

    def loss_and_grads(self, batch):
        x, y = batch
        caches, acts = [], []
        for layer in self.hidden:
            z, _, cache = layer.forward(x)
            caches.append(cache)
            acts.append(z)
            x = relu(z)
        logits, _, head_cache = self.head.forward(x)
        loss, dlogits = nll_from_logits(logits, y)
        grads = {}
        dx, g = self.head.backward(head_cache, dlogits)
        self._collect("softmax", g, grads)
        for i in range(len(self.hidden) - 1, -1, -1):
            dz = np.where(acts[i] > 0, dx, dx.dtype.type(0))
            dx, g = self.hidden[i].backward(caches[i], dz)
            self._collect(f"hidden{i}", g, grads)
        return loss, grads

    def evaluate_split(self, data, batch_size=4096):
        x, y = data
        nll, correct = 0.0, 0
        for lo in range(0, len(y), batch_size):
            logits = self.logits(x[lo : lo + batch_size])
            loss, _ = nll_from_logits(logits, y[lo : lo + batch_size])
            nll += loss * len(logits)
            correct += int((logits.argmax(axis=1) == y[lo : lo + batch_size]).sum())
        return {"metric": "accuracy", "value": correct / len(y), "loss": nll / len(y)}


def build_mlp(cfg, rng, dtype=F32):
    dims = (cfg.input_dim, *cfg.scaled_widths)
    hidden = [
        Linear.init(a, b, rng, dtype=dtype, name=f"hidden{i}")
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
    ]
    head = SoftmaxXentHead.init(dims[-1], cfg.output_dim, rng, dtype=dtype)
    return Mlp(cfg, hidden, head)


@dataclass(frozen=True)
class TeacherConfig:
    seed: int = 0
    input_dim: int = 32
    n_classes: int = 10
    teacher_widths: tuple = (512,)
    activation: str = "relu"
    teacher_sparsity: float = 0.9
    n_train: int = 200_000
    n_valid: int = 4096
    label_noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "teacher_widths", tuple(int(w) for w in self.teacher_widths))
        if self.activation not in _TEACHER_ACTIVATIONS:
            raise ParameterError(f"unknown teacher activation {self.activation!r}")
        if not 0.0 <= self.teacher_sparsity < 1.0:
            raise ParameterError("teacher_sparsity must lie in [0, 1)")


_TEACHER_ACTIVATIONS = {
    "relu": lambda x: np.sqrt(2.0) * np.maximum(x, 0.0),
    "tanh": lambda x: np.tanh(2.0 * x),
}


class TeacherDataset:
    """Gaussian inputs labelled by the argmax of a frozen random MLP.

    Hidden teacher weights are sparse (a random ``teacher_sparsity`` fraction
    is zeroed and the rest rescaled), which gives the labelling function a
    wide but sparsely connected structure.  Teacher logits are centred per
    class over the training inputs so the classes are roughly balanced.
    Everything is regenerated from ``seed``.
    """

    def __init__(self, cfg, dtype=F32):
        self.cfg = cfg
        rng = SeededRng(cfg.seed)
        dims = (cfg.input_dim, *cfg.teacher_widths, cfg.n_classes)
        self.teacher = [
            (rng.normal((b, a)) / math.sqrt(a), 0.1 * rng.normal(b)) for a, b in zip(dims[:-1], dims[1:])
        ]
        if cfg.teacher_sparsity > 0:
            keep = 1.0 - cfg.teacher_sparsity
            mask_rng = rng.spawn()
            self.teacher = [
                (w * (mask_rng.random(w.shape) < keep) / math.sqrt(keep), b) for w, b in self.teacher[:-1]
            ] + self.teacher[-1:]
        n = cfg.n_train + cfg.n_valid
        x = rng.normal((n, cfg.input_dim))
        logits = self._teacher_logits(x)
        logits -= logits[: cfg.n_train].mean(axis=0)
        y = logits.argmax(axis=1)
        if cfg.label_noise > 0:
            flip = rng.random(n) < cfg.label_noise
            y = np.where(flip, rng.integers(cfg.n_classes, n), y)
        x = x.astype(dtype)
        self.train = (x[: cfg.n_train], y[: cfg.n_train])
        self.valid = (x[cfg.n_train :], y[cfg.n_train :])

    def _teacher_logits(self, x):
        act = _TEACHER_ACTIVATIONS[self.cfg.activation]
        for i, (w, b) in enumerate(self.teacher):
            x = x @ w.T + b
            if i < len(self.teacher) - 1:
                x = act(x)
        return x

    def split(self, name):
        return {"train": self.train, "valid": self.valid}[name]

    def batch(self, rng, batch_size):
        idx = rng.integers(self.cfg.n_train, batch_size)
        return self.train[0][idx], self.train[1][idx]


# --- character LSTM language model ---------------------------------------


class CharCorpus:
    """Bundled public-domain text split 90/5/5 by position.

    The vocabulary is the sorted character set of the training split plus a
    final unknown-character id.
    """

    def __init__(self, text, max_chars=None):
        if max_chars:
            text = text[:max_chars]
        n = len(text)
        a, b = int(n * 0.90), int(n * 0.95)
        self.texts = {"train": text[:a], "valid": text[a:b], "test": text[b:]}
        self.chars = sorted(set(self.texts["train"]))
        self.unk = len(self.chars)
        lookup = {c: i for i, c in enumerate(self.chars)}
        self._ids = {
            k: np.fromiter((lookup.get(c, self.unk) for c in t), dtype=np.int64, count=len(t))
            for k, t in self.texts.items()
        }

    @classmethod
    def bundled(cls, max_chars=None):
        text = resources.files("prune_forge").joinpath("data/milton.txt").read_text("utf-8")
        return cls(text, max_chars)

    @property
    def vocab_size(self):
        return len(self.chars) + 1

    def ids(self, split):
        return self._ids[split]

    def encode(self, text):
        lookup = {c: i for i, c in enumerate(self.chars)}
        return np.array([lookup.get(c, self.unk) for c in text], dtype=np.int64)

    def split(self, name):
        return self._ids[name]


@dataclass(frozen=True)
class LstmLmConfig:
    vocab_size: int = 0  # 0: take it from the corpus
    hidden: int = 128
    num_layers: int = 2
    seq_len: int = 32
    batch_size: int = 32
    init_scale: float = 0.1
    forget_bias_offset: float = 1.0
    max_chars: int = 0

    def __post_init__(self):
        if self.num_layers != 2:
            raise ConfigError("the language model has exactly 2 LSTM layers")

    @classmethod
    def preset(cls, name, **kw):
        if name not in LM_PRESETS:
            raise ConfigError(f"unknown LM preset {name!r}; choose from {sorted(LM_PRESETS)}")
        return cls(hidden=LM_PRESETS[name], **kw)

    def param_count(self):
        v, h = self.vocab_size, self.hidden
        return v * h + self.num_layers * (4 * h * 2 * h + 4 * h) + v * h + v


class LstmLm(Model):
    kind = "lstm"

    def __init__(self, cfg, embedding, cells, head):
        self.cfg = cfg
        self.embedding = embedding
        self.cells = cells
        self.head = head

    def layers(self):
        return (
            [("embedding", self.embedding)]
            + [(f"lstm{i}", c) for i, c in enumerate(self.cells)]
            + [("softmax", self.head)]
        )

    def _forward(self, ids, state=None):
        # ids: [batch, time] -> time-major activations
        x, _, emb_cache = self.embedding.forward(ids.T)
        caches, new_state = [], []
        for i, cell in enumerate(self.cells):
            x, st, cache = cell.forward(x, None if state is None else state[i])
            caches.append(cache)
            new_state.append(st)
        T, B, h = x.shape
        logits, _, head_cache = self.head.forward(x.reshape(T * B, h))
        return logits, new_state, (emb_cache, caches, head_cache)

    def loss_and_grads(self, batch):
        ids = batch
        inputs, targets = ids[:, :-1], ids[:, 1:]
        logits, _, (emb_cache, caches, head_cache) = self._forward(inputs)
        loss, dlogits = nll_from_logits(logits, targets.T.reshape(-1))
        grads = {}
        dx, g = self.head.backward(head_cache, dlogits)
        self._collect("softmax", g, grads)
        T, B = inputs.shape[1], inputs.shape[0]
        dx = dx.reshape(T, B, -1)
        for i in range(len(self.cells) - 1, -1, -1):
            (dx, _), g = self.cells[i].backward(caches[i], dx)
            self._collect(f"lstm{i}", g, grads)
        _, g = self.embedding.backward(emb_cache, dx)
        self._collect("embedding", g, grads)
        return loss, grads

    def next_logits(self, ids, state=None):
        """Logits for every position of ``ids`` ([batch, time]) and the carried state."""
        logits, new_state, _ = self._forward(np.asarray(ids), state)
        return logits, new_state

    def evaluate_split(self, ids, streams=16):
        """Perplexity over ``ids`` read as ``streams`` parallel contiguous streams."""
        seq = self.cfg.seq_len
        n = (len(ids) - 1) // streams
        data = ids[: n * streams + 1]
        x = np.stack([data[k * n : (k + 1) * n] for k in range(streams)])
        y = np.stack([data[k * n + 1 : (k + 1) * n + 1] for k in range(streams)])
        state, total, count = None, 0.0, 0
        for lo in range(0, n, seq):
            xb, yb = x[:, lo : lo + seq], y[:, lo : lo + seq]
            logits, state, _ = self._forward(xb, state)
            loss, _ = nll_from_logits(logits, yb.T.reshape(-1))
            total += loss * yb.size
            count += yb.size
        mean = total / count
        return {"metric": "perplexity", "value": perplexity(mean), "loss": mean}


class LmBatches:
    """Random training windows of ``seq_len + 1`` characters."""

    def __init__(self, corpus, seq_len):
        self.corpus = corpus
        self.seq_len = seq_len

    def batch(self, rng, batch_size):
        ids = self.corpus.ids("train")
        starts = rng.integers(len(ids) - self.seq_len - 1, batch_size)
        return np.stack([ids[s : s + self.seq_len + 1] for s in starts])

    def split(self, name):
        return self.corpus.ids(name)


def build_lstm_lm(cfg, rng, dtype=F32):
    h, r = cfg.hidden, cfg.init_scale
    embedding = Embedding.init(cfg.vocab_size, h, rng, r=r, dtype=dtype)
    cells = [
        LstmCell.init(h, h, rng, r=r, dtype=dtype, forget_bias_offset=cfg.forget_bias_offset, name=f"lstm{i}")
        for i in range(cfg.num_layers)
    ]
    head = SoftmaxXentHead.init(h, cfg.vocab_size, rng, r=r, dtype=dtype)
    return LstmLm(cfg, embedding, cells, head)


def evaluate(model, data, split="valid"):
    """Validation metric plus parameter counts for ``model`` on ``data``."""
    metrics = model.evaluate_split(data.split(split))
    metrics["nnz_params"] = model.nnz_params
    metrics["total_params"] = model.total_params
    return metrics


def config_dict(cfg):
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model and its data."""

    kind: str = "mlp"
    mlp: MlpConfig = field(default_factory=MlpConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    lm: LstmLmConfig = field(default_factory=LstmLmConfig)
    dtype: str = "float32"

    def build_data(self):
        if self.kind == "mlp":
            return TeacherDataset(self.teacher, dtype=np.dtype(self.dtype))
        if self.kind == "lstm":
            corpus = CharCorpus.bundled(self.lm.max_chars or None)
            return LmBatches(corpus, self.lm.seq_len)
        raise ConfigError(f"unknown model kind {self.kind!r}")

    def build_model(self, rng, data=None):
        dtype = np.dtype(self.dtype)
        if self.kind == "mlp":
            return build_mlp(self.mlp, rng, dtype)
        if self.kind == "lstm":
            return build_lstm_lm(self.resolved_lm(data), rng, dtype)
        raise ConfigError(f"unknown model kind {self.kind!r}")

    def resolved_lm(self, data=None):
        cfg = self.lm
        if cfg.vocab_size:
            if data is not None and cfg.vocab_size != data.corpus.vocab_size:
                raise ConfigError(
                    f"vocab_size {cfg.vocab_size} != corpus vocabulary {data.corpus.vocab_size}"
                )
            return cfg
        if data is None:
            data = self.build_data()
        return replace(cfg, vocab_size=data.corpus.vocab_size)

    def batch_size(self, default):
        return self.lm.batch_size if self.kind == "lstm" else default

"""Layers with hand-written backward passes.

Every weight matrix is a :class:`~prune_forge.pruning.MaskedParameter`;
biases are plain arrays and are never pruned.  ``forward`` returns
``(output, new_state, cache)`` and ``backward(cache, grad)`` returns
``(input_grad, param_grads)`` where ``param_grads`` is keyed like
:meth:`named_parameters`.  Weight gradients are already zero at masked
positions.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .pruning import MaskedParameter
from .tensor import F32, sigmoid, uniform_init


class Cache(dict):
    """Values saved by ``forward`` for the matching ``backward``."""

    def __init__(self, owner, **values):
        super().__init__(**values)
        self.owner = owner


def _check_cache(layer, cache):
    if not isinstance(cache, Cache) or cache.owner is not layer:
        raise ContractError(f"cache was not produced by this {type(layer).__name__}")


def _masked_grad(grad, param):
    return np.where(param.mask, grad, grad.dtype.type(0))


class Linear:
    """``y = x @ W.T + b`` with ``W`` of shape ``[out, in]``."""

    def __init__(self, weight, bias):
        if not isinstance(weight, MaskedParameter):
            weight = MaskedParameter(np.asarray(weight))
        self.weight = weight
        self.bias = np.asarray(bias)
        if self.bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} for weight {weight.shape}")

    @classmethod
    def init(cls, in_dim, out_dim, rng, dtype=F32, name="linear"):
        r = np.sqrt(6.0 / in_dim)
        w = MaskedParameter(uniform_init((out_dim, in_dim), r, rng, dtype), name=name + ".weight")
        return cls(w, np.zeros(out_dim, dtype=dtype))

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def named_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, state=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"Linear expects [batch, {self.in_dim}], got {x.shape}")
        w = self.weight.effective
        y = x @ w.T + self.bias
        return y, None, Cache(self, x=x, w=w, out_shape=y.shape)

    def backward(self, cache, grad):
        _check_cache(self, cache)
        if grad.shape != cache["out_shape"]:
            raise ContractError(f"output grad {grad.shape} vs cached {cache['out_shape']}")
        dw = _masked_grad(grad.T @ cache["x"], self.weight)
        return grad @ cache["w"], {"weight": dw, "bias": grad.sum(axis=0)}


class LstmCell:
    """LSTM cell with gates packed ``i, f, g, o`` along the first axis.

    The gate matrix has shape ``[4h, in + h]``: columns ``[:in]`` act on the
    input, columns ``[in:]`` on the previous hidden state.
    ``forget_bias_offset`` is added to the forget-gate pre-activation.

    ``forward`` accepts a single step ``[batch, in]`` or a sequence
    ``[time, batch, in]`` and unrolls over time; ``backward`` does full
    backpropagation through time over the cached sequence.
    """

    def __init__(self, gate_weight, gate_bias, forget_bias_offset=1.0):
        if not isinstance(gate_weight, MaskedParameter):
            gate_weight = MaskedParameter(np.asarray(gate_weight))
        rows, cols = gate_weight.shape
        if rows % 4:
            raise DimensionError(f"gate weight rows must be 4*h, got {rows}")
        self.hidden = rows // 4
        if cols <= self.hidden:
            raise DimensionError(f"gate weight {gate_weight.shape} leaves no input columns")
        self.gate_weight = gate_weight
        self.gate_bias = np.asarray(gate_bias)
        if self.gate_bias.shape != (rows,):
            raise DimensionError(f"gate bias shape {self.gate_bias.shape}, expected ({rows},)")
        self.forget_bias_offset = forget_bias_offset

    @classmethod
    def init(cls, in_dim, hidden, rng, r=None, dtype=F32, forget_bias_offset=1.0, name="lstm"):
        r = r if r is not None else 1.0 / np.sqrt(hidden)
        w = MaskedParameter(
            uniform_init((4 * hidden, in_dim + hidden), r, rng, dtype), name=name + ".gate_weight"
        )
        return cls(w, np.zeros(4 * hidden, dtype=dtype), forget_bias_offset)

    @property
    def in_dim(self):
        return self.gate_weight.shape[1] - self.hidden

    def named_parameters(self):
        return {"gate_weight": self.gate_weight, "gate_bias": self.gate_bias}

    def zero_state(self, batch, dtype=None):
        dtype = dtype or self.gate_bias.dtype
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return z, z.copy()

    def forward(self, x, state=None):
        single = x.ndim == 2
        xs = x[None] if single else x
        if xs.ndim != 3 or xs.shape[2] != self.in_dim:
            raise DimensionError(f"LstmCell expects [.., batch, {self.in_dim}], got {x.shape}")
        T, B, _ = xs.shape
        h = self.hidden
        h_prev, c_prev = state if state is not None else self.zero_state(B, xs.dtype)
        if h_prev.shape != (B, h) or c_prev.shape != (B, h):
            raise DimensionError(f"state shapes {h_prev.shape}/{c_prev.shape}, expected {(B, h)}")

        w = self.gate_weight.effective
        wx, wh = w[:, : self.in_dim], w[:, self.in_dim :]
        bias = self.gate_bias.copy()
        bias[h : 2 * h] += self.forget_bias_offset
        pre_x = (xs.reshape(T * B, -1) @ wx.T + bias).reshape(T, B, 4 * h)

        gates = np.empty((T, B, 4 * h), dtype=xs.dtype)
        cs = np.empty((T + 1, B, h), dtype=xs.dtype)
        hs = np.empty((T + 1, B, h), dtype=xs.dtype)
        tcs = np.empty((T, B, h), dtype=xs.dtype)
        hs[0], cs[0] = h_prev, c_prev
        for t in range(T):
            a = pre_x[t] + hs[t] @ wh.T
            i = sigmoid(a[:, :h])
            f = sigmoid(a[:, h : 2 * h])
            g = np.tanh(a[:, 2 * h : 3 * h])
            o = sigmoid(a[:, 3 * h :])
            cs[t + 1] = f * cs[t] + i * g
            tcs[t] = np.tanh(cs[t + 1])
            hs[t + 1] = o * tcs[t]
            gates[t, :, :h], gates[t, :, h : 2 * h] = i, f
            gates[t, :, 2 * h : 3 * h], gates[t, :, 3 * h :] = g, o

        out = hs[1:]
        new_state = (hs[T].copy(), cs[T].copy())
        cache = Cache(self, xs=xs, gates=gates, cs=cs, hs=hs, tcs=tcs, w=w, single=single)
        return (out[0] if single else out), new_state, cache

    def backward(self, cache, grad, state_grad=None):
        """Backward through the cached unroll.

        ``grad`` is dL/dh for every output step.  ``state_grad`` optionally
        carries ``(dh, dc)`` flowing into the final state.  Returns
        ``((dx, (dh0, dc0)), param_grads)``.
        """
        _check_cache(self, cache)
        xs, gates, cs, hs, tcs, w = (cache[k] for k in ("xs", "gates", "cs", "hs", "tcs", "w"))
        dhs = grad[None] if cache["single"] else grad
        T, B, _ = xs.shape
        h = self.hidden
        if dhs.shape != (T, B, h):
            raise ContractError(f"output grad {grad.shape} does not match cached unroll")
        wx, wh = w[:, : self.in_dim], w[:, self.in_dim :]

        if state_grad is None:
            dh_next = np.zeros((B, h), dtype=xs.dtype)
            dc_next = np.zeros((B, h), dtype=xs.dtype)
        else:
            dh_next, dc_next = state_grad
        da = np.empty((T, B, 4 * h), dtype=xs.dtype)
        for t in range(T - 1, -1, -1):
            i, f = gates[t, :, :h], gates[t, :, h : 2 * h]
            g, o = gates[t, :, 2 * h : 3 * h], gates[t, :, 3 * h :]
            tc = tcs[t]
            dh = dhs[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            da[t, :, :h] = dc * g * i * (1.0 - i)
            da[t, :, h : 2 * h] = dc * cs[t] * f * (1.0 - f)
            da[t, :, 2 * h : 3 * h] = dc * i * (1.0 - g * g)
            da[t, :, 3 * h :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = da[t] @ wh

        da2 = da.reshape(T * B, 4 * h)
        dwx = da2.T @ xs.reshape(T * B, -1)
        dwh = da2.T @ hs[:T].reshape(T * B, h)
        dw = _masked_grad(np.concatenate([dwx, dwh], axis=1), self.gate_weight)
        dx = (da2 @ wx).reshape(xs.shape)
        grads = {"gate_weight": dw, "gate_bias": da2.sum(axis=0)}
        return ((dx[0] if cache["single"] else dx), (dh_next, dc_next)), grads


class Embedding:
    def __init__(self, table):
        if not isinstance(table, MaskedParameter):
            table = MaskedParameter(np.asarray(table))
        self.table = table

    @classmethod
    def init(cls, vocab, dim, rng, r=0.1, dtype=F32, name="embedding"):
        return cls(MaskedParameter(uniform_init((vocab, dim), r, rng, dtype), name=name + ".table"))

    @property
    def vocab(self):
        return self.table.shape[0]

    def named_parameters(self):
        return {"table": self.table}

    def forward(self, ids, state=None):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise IndexError(f"token id out of range [0, {self.vocab})")
        out = self.table.effective[ids]
        return out, None, Cache(self, ids=ids, out_shape=out.shape)

    def backward(self, cache, grad):
        _check_cache(self, cache)
        if grad.shape != cache["out_shape"]:
            raise ContractError(f"output grad {grad.shape} vs cached {cache['out_shape']}")
        dt = np.zeros(self.table.shape, dtype=grad.dtype)
        np.add.at(dt, cache["ids"].ravel(), grad.reshape(-1, self.table.shape[1]))
        return None, {"table": _masked_grad(dt, self.table)}


class SoftmaxXentHead:
    """Output projection ``[vocab, dim]`` + bias feeding a softmax."""

    def __init__(self, projection, bias):
        if not isinstance(projection, MaskedParameter):
            projection = MaskedParameter(np.asarray(projection))
        self.projection = projection
        self.bias = np.asarray(bias)

    @classmethod
    def init(cls, dim, vocab, rng, r=None, dtype=F32, name="softmax"):
        r = r if r is not None else np.sqrt(6.0 / dim)
        p = MaskedParameter(uniform_init((vocab, dim), r, rng, dtype), name=name + ".projection")
        return cls(p, np.zeros(vocab, dtype=dtype))

    @property
    def vocab(self):
        return self.projection.shape[0]

    def named_parameters(self):
        return {"projection": self.projection, "bias": self.bias}

    def forward(self, hidden, state=None):
        if hidden.ndim != 2 or hidden.shape[1] != self.projection.shape[1]:
            raise DimensionError(
                f"head expects [N, {self.projection.shape[1]}], got {hidden.shape}"
            )
        w = self.projection.effective
        logits = hidden @ w.T + self.bias
        return logits, None, Cache(self, x=hidden, w=w, out_shape=logits.shape)

    def backward(self, cache, grad):
        _check_cache(self, cache)
        if grad.shape != cache["out_shape"]:
            raise ContractError(f"logit grad {grad.shape} vs cached {cache['out_shape']}")
        dp = _masked_grad(grad.T @ cache["x"], self.projection)
        return grad @ cache["w"], {"projection": dp, "bias": grad.sum(axis=0)}

    def probabilities(self, hidden):
        logits, _, _ = self.forward(hidden)
        return np.exp(log_softmax(logits))


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def nll_from_logits(logits, target_ids):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    target_ids = np.asarray(target_ids)
    n, vocab = logits.shape
    if target_ids.shape != (n,):
        raise DimensionError(f"targets shape {target_ids.shape}, expected ({n},)")
    if n and (target_ids.min() < 0 or target_ids.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    mean_nll = -logp[rows, target_ids].sum(dtype=np.float64) / n
    dlogits = np.exp(logp)
    dlogits[rows, target_ids] -= 1.0
    dlogits /= n
    return float(mean_nll), dlogits


def softmax_xent(head, hidden, target_ids):
    """Mean NLL of ``target_ids`` under ``softmax(head(hidden))``.

    Returns ``(mean_nll, grads)`` with grads for ``projection``, ``bias`` and
    the incoming ``hidden`` activations.
    """
    logits, _, cache = head.forward(hidden)
    mean_nll, dlogits = nll_from_logits(logits, target_ids)
    dhidden, grads = head.backward(cache, dlogits)
    grads["hidden"] = dhidden
    return mean_nll, grads


def layer_forward(layer, x, state=None):
    return layer.forward(x, state)


def layer_backward(layer, cache, output_grad):
    if isinstance(layer, LstmCell) and isinstance(output_grad, tuple):
        dh, dstate = output_grad
        return layer.backward(cache, dh, dstate)
    return layer.backward(cache, output_grad)


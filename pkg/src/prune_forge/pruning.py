"""Binary weight masks and the gradual magnitude-pruning schedule.

The sparsity ramp is cubic: starting from ``s_i`` at step ``t0`` it rises to
``s_f`` over ``n`` mask updates spaced ``delta_t`` steps apart, pruning
fast at first and slowing down as fewer weights remain.  Three ways of
applying a commanded sparsity to a list of layers are provided:

* simultaneous - every layer is pruned to the commanded level at once;
* layerwise constant - the pruning interval is subdivided and one layer is
  brought to the commanded level per sub-step;
* global - one magnitude threshold over all layers, so per-layer sparsity
  differs.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, ParameterError


class Scheme(str, enum.Enum):
    SIMULTANEOUS = "simultaneous"
    LAYERWISE_CONSTANT = "layerwise_constant"
    GLOBAL = "global"


@dataclass
class MaskedParameter:
    """A weight tensor with a same-shape boolean mask (True = active).

    ``values`` keeps the stored weights, including those at masked
    positions; the layer only ever sees :attr:`effective`.
    """

    values: np.ndarray
    mask: np.ndarray = None
    name: str = ""
    last_update_step: int | None = None

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise DimensionError(
                f"mask shape {self.mask.shape} != values shape {self.values.shape}"
            )

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def effective(self):
        return np.where(self.mask, self.values, self.values.dtype.type(0))

    @property
    def zero_count(self):
        return int(self.size - np.count_nonzero(self.mask))

    @property
    def active_count(self):
        return int(np.count_nonzero(self.mask))

    @property
    def sparsity(self):
        return self.zero_count / self.size if self.size else 0.0


@dataclass(frozen=True)
class PruningSchedule:
    s_i: float = 0.0
    s_f: float = 0.5
    t0: int = 0
    n: int = 10
    delta_t: int = 100
    scheme: Scheme = Scheme.SIMULTANEOUS

    def __post_init__(self):
        if not 0.0 <= self.s_i <= self.s_f <= 1.0:
            raise ParameterError(
                f"need 0 <= s_i <= s_f <= 1, got s_i={self.s_i}, s_f={self.s_f}"
            )
        if self.s_i >= 1.0:
            raise ParameterError("initial sparsity must be below 1")
        if self.t0 < 0 or self.n < 1 or self.delta_t < 1:
            raise ParameterError(
                f"need t0 >= 0, n >= 1, delta_t >= 1; got {self.t0}, {self.n}, {self.delta_t}"
            )
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def end(self):
        """Step of the last mask update (where ``s_f`` is commanded)."""
        return self.t0 + self.n * self.delta_t

    def grid(self):
        return [self.t0 + k * self.delta_t for k in range(self.n + 1)]

    def on_grid(self, t):
        return self.t0 <= t <= self.end and (t - self.t0) % self.delta_t == 0


@dataclass
class PruneState:
    frozen: bool = False
    layer_cursor: int = 0
    commanded: list = field(default_factory=list)


def sparsity_at(sched, t):
    """Commanded sparsity at training step ``t``.

    Exact cubic law on the grid ``t0, t0+dt, ..., t0+n*dt``.  Before ``t0``
    the value is ``s_i``, after the last grid point ``s_f``; between grid
    points the value of the most recent grid point holds.
    """
    if t <= sched.t0:
        return sched.s_i
    if t >= sched.end:
        return sched.s_f
    k = (t - sched.t0) // sched.delta_t
    if k == 0:
        return sched.s_i
    frac = k / sched.n
    s = sched.s_f + (sched.s_i - sched.s_f) * (1.0 - frac) ** 3
    return min(max(s, sched.s_i), sched.s_f)  # guard against rounding past the ends


def target_zero_count(s, n_elems):
    """Number of weights to mask for sparsity ``s``: round half up, clamped."""
    k = math.floor(s * n_elems + 0.5)
    return min(max(k, 0), n_elems)


def _smallest(magnitudes, k):
    # stable sort: equal magnitudes are masked lowest flat index first
    return np.argsort(magnitudes, kind="stable")[:k]


def update_mask(param, s, step=None):
    """Mask the ``round(s*N)`` smallest-magnitude entries of ``param``.

    The mask is rebuilt from the current stored values, so a previously
    masked weight can come back if it is no longer among the smallest.
    Mutates and returns ``param``.
    """
    k = target_zero_count(s, param.size)
    mask = np.ones(param.size, dtype=bool)
    mask[_smallest(np.abs(param.values).ravel(), k)] = False
    param.mask = mask.reshape(param.shape)
    param.last_update_step = step
    return param


def _check_not_frozen(state):
    if state is not None and state.frozen:
        raise ContractError("masks are frozen; final sparsity already reached")


def prune_step_simultaneous(params, sched, t, state=None):
    _check_not_frozen(state)
    s = sparsity_at(sched, t)
    for p in params:
        update_mask(p, s, t)
    if state is not None:
        state.commanded = [s] * len(params)
        if t >= sched.end:
            state.frozen = True
    return params


def substep_spacing(sched, n_layers):
    return max(1, sched.delta_t // max(n_layers, 1))


def prune_step_layerwise_constant(params, sched, t, state):
    """Apply whatever layerwise-constant update is due at step ``t``.

    Call once per training step.  Inside the interval that starts at grid
    point ``g``, layer updates happen at ``g, g+d, ..., g+(L-1)d`` with
    ``d = max(1, delta_t // L)``; each brings the next layer (round-robin
    from ``state.layer_cursor``) to ``sparsity_at(g)``.  Returns the indices
    of the layers whose masks were updated.
    """
    _check_not_frozen(state)
    n_layers = len(params)
    if n_layers == 0 or t < sched.t0:
        return []
    if len(state.commanded) != n_layers:
        state.commanded = [sched.s_i] * n_layers
    k = min((t - sched.t0) // sched.delta_t, sched.n)
    g = sched.t0 + k * sched.delta_t
    d = substep_spacing(sched, n_layers)
    offset = t - g
    if offset % d or offset // d >= n_layers:
        return []
    s = sparsity_at(sched, g)
    idx = state.layer_cursor % n_layers
    update_mask(params[idx], s, t)
    state.commanded[idx] = s
    state.layer_cursor = (idx + 1) % n_layers
    if g == sched.end and offset // d == n_layers - 1:
        state.frozen = True
    return [idx]


def prune_step_global(params, sched, t, state=None):
    """One magnitude threshold across every layer.

    Ties are broken by layer declaration order, then flat index.
    """
    _check_not_frozen(state)
    s = sparsity_at(sched, t)
    sizes = [p.size for p in params]
    flat = np.concatenate([np.abs(p.values).ravel().astype(np.float64) for p in params])
    keep = np.ones(flat.size, dtype=bool)
    keep[_smallest(flat, target_zero_count(s, flat.size))] = False
    offsets = np.cumsum([0] + sizes)
    for p, lo, hi in zip(params, offsets[:-1], offsets[1:]):
        p.mask = keep[lo:hi].reshape(p.shape)
        p.last_update_step = t
    if state is not None:
        state.commanded = [s] * len(params)
        if t >= sched.end:
            state.frozen = True
    return params


def apply_masks_to_gradients(grads, masks):
    """Zero gradient entries at masked positions (exact +0.0)."""
    out = []
    for g, m in zip(grads, masks, strict=True):
        g = np.asarray(g)
        m = np.asarray(m, dtype=bool)
        if g.shape != m.shape:
            raise DimensionError(f"gradient shape {g.shape} != mask shape {m.shape}")
        out.append(np.where(m, g, g.dtype.type(0)))
    return out


class Pruner:
    """Drives mask updates from inside a training loop.

    ``step(t)`` is called before the optimizer update of every training step
    and returns True when any mask changed.
    """

    def __init__(self, params, schedule, state=None):
        self.params = list(params)
        self.schedule = schedule
        self.state = state if state is not None else PruneState()
        if not self.state.commanded:
            self.state.commanded = [schedule.s_i] * len(self.params)

    @property
    def last_step(self):
        """Last training step at which a mask may change."""
        sched = self.schedule
        if sched.scheme is Scheme.LAYERWISE_CONSTANT:
            return sched.end + (len(self.params) - 1) * substep_spacing(sched, len(self.params))
        return sched.end

    def step(self, t):
        if self.state.frozen or not self.params:
            return False
        sched = self.schedule
        if sched.scheme is Scheme.LAYERWISE_CONSTANT:
            return bool(prune_step_layerwise_constant(self.params, sched, t, self.state))
        if not sched.on_grid(t):
            return False
        if sched.scheme is Scheme.GLOBAL:
            prune_step_global(self.params, sched, t, self.state)
        else:
            prune_step_simultaneous(self.params, sched, t, self.state)
        return True

    def commanded_sparsity(self, t):
        return sparsity_at(self.schedule, t)

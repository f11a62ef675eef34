"""
Trainable building blocks on top of pilot_tts.tensor.

A Module finds its parameters by walking its attributes: Tensors with
requires_grad, child Modules and lists of Modules. Frozen projections are kept
as plain numpy arrays so they can never show up in a gradient set.
"""
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from pilot_tts import tensor as T
from pilot_tts.exceptions import CheckpointError, ContractError
from pilot_tts.tensor import Tensor


class Module:
    """Base class for everything with named parameters."""

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith('_'):
                continue
            name = f'{prefix}{attr}'
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f'{name}.')
            elif isinstance(value, (list, tuple)):
                for i, child in enumerate(value):
                    if isinstance(child, Module):
                        yield from child.named_parameters(prefix=f'{name}.{i}.')

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for _, p in self.named_parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = ''):
        """
        Copy arrays into the parameters (cast to each parameter's precision).

        Args:
            state: name -> array; extra keys outside ``prefix`` are ignored
            prefix: Prefix the names carry in ``state`` (e.g. 'qformer.')
        """
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in state:
                raise CheckpointError(f'checkpoint has no tensor named {key!r}')
            value = np.asarray(state[key])
            if value.shape != p.shape:
                raise CheckpointError(
                    f'{key}: checkpoint shape {value.shape} does not match model shape {p.shape}')
            p.data = value.astype(p.data.dtype).copy()

    def astype(self, precision) -> 'Module':
        dtype = T.resolve_dtype(precision)
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        self._cast_frozen(dtype)
        return self

    def _cast_frozen(self, dtype):
        for attr, value in vars(self).items():
            if isinstance(value, np.ndarray) and value.dtype.kind == 'f':
                setattr(self, attr, value.astype(dtype))
            elif isinstance(value, Module):
                value._cast_frozen(dtype)
            elif isinstance(value, (list, tuple)):
                for child in value:
                    if isinstance(child, Module):
                        child._cast_frozen(dtype)

    @property
    def dtype(self):
        for _, p in self.named_parameters():
            return p.dtype
        return np.float32


class Linear(Module):
    """x W + b with W of shape in_dim x out_dim."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True, std: Optional[float] = None):
        std = 1.0 / np.sqrt(in_dim) if std is None else std
        self.weight = T.parameter(rng.normal(0.0, std, size=(in_dim, out_dim)) if std else
                                  np.zeros((in_dim, out_dim)), dtype=dtype)
        self.bias = T.parameter(np.zeros(out_dim), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add_row(y, self.bias) if self.bias is not None else y


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, dtype=np.float32,
                 std: float = 0.02):
        self.table = T.parameter(rng.normal(0.0, std, size=(count, dim)), dtype=dtype)

    def __call__(self, ids) -> Tensor:
        return T.gather_rows(self.table, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(dim), dtype=dtype)
        self.beta = T.parameter(np.zeros(dim), dtype=dtype)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class MultiHeadAttention(Module):
    """
    Multi-head attention over row-major sequences.

    Queries come from ``x``; keys and values from ``context`` (self-attention
    when omitted).
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if d_model % heads:
            raise ContractError(f'd_model {d_model} is not divisible by {heads} heads')
        self.wq = Linear(d_model, d_model, rng, dtype)
        self.wk = Linear(d_model, d_model, rng, dtype)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)
        self._heads = heads
        self._head_dim = d_model // heads

    def __call__(self, x: Tensor, context: Optional[Tensor] = None,
                 causal: bool = False, keys: Optional[Tensor] = None) -> Tensor:
        """
        Args:
            x: T_q x d_model queries
            context: T_k x d_model values (defaults to x)
            causal: Mask keys after each query position
            keys: Optional T_k x d_model key input (defaults to context)
        """
        context = x if context is None else context
        keys = context if keys is None else keys
        q = self.wq(x)
        k = self.wk(keys)
        v = self.wv(context)
        outputs = []
        for h in range(self._heads):
            lo, hi = h * self._head_dim, (h + 1) * self._head_dim
            outputs.append(T.attention(T.slice_cols(q, lo, hi), T.slice_cols(k, lo, hi),
                                       T.slice_cols(v, lo, hi), causal=causal))
        merged = outputs[0] if len(outputs) == 1 else T.concat_cols(outputs)
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, dtype=np.float32,
                 hidden: Optional[int] = None):
        hidden = hidden or 4 * d_model
        self.fc1 = Linear(d_model, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def sinusoidal_table(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position table, shape length x dim."""
    return sinusoidal_embedding(np.arange(length, dtype=np.float64), dim, dtype)


def sinusoidal_embedding(positions, dim: int, dtype=np.float32, max_period: float = 10000.0
                         ) -> np.ndarray:
    """sin/cos features of (possibly fractional) positions, shape len(positions) x dim."""
    positions = np.atleast_1d(np.asarray(positions, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    angles = positions[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if table.shape[1] < dim:
        table = np.concatenate([table, np.zeros((len(positions), 1))], axis=1)
    return table.astype(dtype)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: Dict,
              lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              clip_norm: Optional[float] = None) -> float:
    """
    One Adam update in place, after global-norm clipping.

    Args:
        params: name -> parameter
        grads: name -> gradient array (same names)
        state: Optimiser state dict, updated in place ('t', 'm', 'v')
        lr: Learning rate
        betas: Moment decay rates
        eps: Denominator floor
        clip_norm: Global gradient norm cap (None disables clipping)

    Returns:
        Gradient norm before clipping
    """
    norm = global_norm(grads)
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / (norm + 1e-6)
    b1, b2 = betas
    state['t'] = state.get('t', 0) + 1
    t = state['t']
    m_all = state.setdefault('m', {})
    v_all = state.setdefault('v', {})
    for name in sorted(params):
        p = params[name]
        g = grads[name] * factor
        m = m_all.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = v_all[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_all[name], v_all[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return norm


class Adam:
    """Thin stateful wrapper around adam_step."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state: Dict = {}

    def step(self, grads: Dict[str, np.ndarray]) -> float:
        return adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps,
                         self.clip_norm)


def parameter_names(module: Module) -> List[str]:
    return [name for name, _ in module.named_parameters()]

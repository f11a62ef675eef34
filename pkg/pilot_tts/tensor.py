"""
Dense tensor kernels with reverse-mode automatic differentiation.

Every trainable module in the package is composed from the functions in this
file. A Tensor wraps a numpy array (float32 for training, float64 for the
verification suites); ops record their parents and a backward closure, and
backward() walks the recorded DAG in reverse topological order.

Broadcasting is limited to a row vector over a matrix (add_row / mul_row).
Everything else needs matching extents.
"""
import contextlib
import threading
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from pilot_tts.exceptions import ContractError, NumericalError, ShapeError

PRECISIONS = {
    32: np.float32,
    64: np.float64,
    'float32': np.float32,
    'float64': np.float64,
}

GELU_C = float(np.sqrt(2.0 / np.pi))

_state = threading.local()


def resolve_dtype(precision: Union[int, str, type, np.dtype]) -> type:
    """Map 32 / 64 / 'float32' / np.float64 ... to a numpy scalar type."""
    if precision in PRECISIONS:
        return PRECISIONS[precision]
    dtype = np.dtype(precision).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f'unsupported precision: {precision!r}')
    return dtype


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    A dense array plus the bookkeeping needed for backward().

    Leaves created with requires_grad=True are parameters. Results of ops
    require grad when any parent does (and grad recording is enabled).
    """

    __slots__ = ('data', 'requires_grad', 'name', '_parents', '_backward')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        array = np.array(data, dtype=resolve_dtype(dtype) if dtype is not None else None)
        if array.dtype.type not in (np.float32, np.float64):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> List[int]:
        return list(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype.type

    @property
    def precision(self) -> int:
        return 64 if self.data.dtype == np.float64 else 32

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f'item() needs a single element, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={self.shape}, precision={self.precision}{flag})'

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> 'Tensor':
        return transpose(self)


def constant(data, like: Optional[Tensor] = None, dtype=None) -> Tensor:
    """A leaf that never requires grad, cast to the precision of ``like``."""
    if like is not None:
        dtype = like.dtype
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x, like=like)


def _check_same_precision(*tensors: Tensor):
    kinds = {t.data.dtype for t in tensors}
    if len(kinds) > 1:
        raise ContractError(f'mixed precisions in one op: {sorted(str(k) for k in kinds)}')


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _require_matrix(x: Tensor, op: str):
    if x.data.ndim != 2:
        raise ShapeError(f'{op} expects a matrix, got shape {x.shape}')


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of an m x k and a k x n matrix."""
    b = _as_tensor(b, a)
    a = _as_tensor(a, b)
    _require_matrix(a, 'matmul')
    _require_matrix(b, 'matmul')
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f'matmul inner extents differ: {a.shape} x {b.shape}')
    _check_same_precision(a, b)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    _require_matrix(x, 'transpose')
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Row-major reshape; the element count must be preserved."""
    original = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f'cannot reshape {original} to {shape}') from e
    return _result(data, (x,), lambda g: (g.reshape(original),))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f'{op} needs equal shapes, got {a.shape} and {b.shape}')
    _check_same_precision(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    a = _as_tensor(a, b)
    _same_shape(a, b, 'add')
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    a = _as_tensor(a, b)
    _same_shape(a, b, 'sub')
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    a = _as_tensor(a, b)
    _same_shape(a, b, 'mul')

    def backward(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.dtype(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def _row_operand(x: Tensor, row: Tensor, op: str) -> np.ndarray:
    _require_matrix(x, op)
    if row.data.size != x.shape[1] or row.data.ndim > 2 or (
            row.data.ndim == 2 and row.shape[0] != 1):
        raise ShapeError(f'{op}: row of shape {row.shape} does not fit matrix {x.shape}')
    _check_same_precision(x, row)
    return row.data.reshape(1, -1)


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """x + row broadcast over every row of x."""
    row = _as_tensor(row, x)
    r = _row_operand(x, row, 'add_row')
    row_shape = row.shape

    def backward(g):
        return g, g.sum(axis=0).reshape(row_shape)

    return _result(x.data + r, (x, row), backward)


def mul_row(x: Tensor, row: Tensor) -> Tensor:
    """x * row broadcast over every row of x."""
    row = _as_tensor(row, x)
    r = _row_operand(x, row, 'mul_row')
    row_shape = row.shape

    def backward(g):
        return g * r, (g * x.data).sum(axis=0).reshape(row_shape)

    return _result(x.data * r, (x, row), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _result(y, (x,), backward)


def round_ste(x: Tensor) -> Tensor:
    """Round to nearest integer; the gradient passes straight through."""
    return _result(np.round(x.data), (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# Structural
# ---------------------------------------------------------------------------

def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    for p in parts:
        _require_matrix(p, 'concat_cols')
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeError(f'concat_cols row counts differ: {[p.shape for p in parts]}')
    _check_same_precision(*parts)
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    for p in parts:
        _require_matrix(p, 'concat_rows')
    if len({p.shape[1] for p in parts}) != 1:
        raise ShapeError(f'concat_rows widths differ: {[p.shape for p in parts]}')
    _check_same_precision(*parts)
    heights = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + heights)

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require_matrix(x, 'slice_cols')
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f'slice_cols [{start}:{stop}] out of range for {x.shape}')

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _require_matrix(x, 'slice_rows')
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f'slice_rows [{start}:{stop}] out of range for {x.shape}')

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop].copy(), (x,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Rows ``table[ids]`` (embedding lookup); repeated ids accumulate grads."""
    _require_matrix(table, 'gather_rows')
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f'gather_rows ids out of range for table {table.shape}')

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array([[x.data.sum()]], dtype=x.dtype),
                   (x,), lambda g: (np.full(shape, g.reshape(-1)[0], dtype=g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# Normalisation and attention
# ---------------------------------------------------------------------------

def _check_finite(values: np.ndarray, op: str):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f'{op} received non-finite values')


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    _require_matrix(x, 'softmax_rows')
    _check_finite(x.data, 'softmax_rows')
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Per-row normalisation to zero mean / unit variance, then gamma * x + beta.

    Args:
        x: m x n input
        gamma: scale with n entries
        beta: shift with n entries
        eps: variance floor, must be positive

    Returns:
        m x n tensor
    """
    _require_matrix(x, 'layer_norm')
    if eps <= 0:
        raise ContractError('layer_norm eps must be positive')
    n = x.shape[1]
    if gamma.data.size != n or beta.data.size != n:
        raise ShapeError(f'layer_norm params ({gamma.shape}, {beta.shape}) do not match width {n}')
    _check_same_precision(x, gamma, beta)
    g_row = gamma.data.reshape(1, n)
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * g_row + beta.data.reshape(1, n)

    def backward(g):
        d_xhat = g * g_row
        d_x = inv_std * (d_xhat - d_xhat.mean(axis=1, keepdims=True)
                         - xhat * (d_xhat * xhat).mean(axis=1, keepdims=True))
        d_gamma = (g * xhat).sum(axis=0).reshape(gamma.shape)
        d_beta = g.sum(axis=0).reshape(beta.shape)
        return d_x, d_gamma, d_beta

    return _result(y, (x, gamma, beta), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """
    Scaled dot-product attention softmax(q k^T / sqrt(d)) v.

    With ``causal`` the score matrix is masked above the diagonal, so query i
    only sees keys 0..i. Masked weights are exactly zero.
    """
    for t in (q, k, v):
        _require_matrix(t, 'attention')
    _check_same_precision(q, k, v)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f'attention q/k widths differ: {q.shape} vs {k.shape}')
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f'attention k/v lengths differ: {k.shape} vs {v.shape}')
    if causal and q.shape[0] != k.shape[0]:
        raise ShapeError('causal attention needs as many queries as keys')
    factor = q.dtype(1.0 / np.sqrt(q.shape[1]))
    scores = (q.data @ k.data.T) * factor
    if causal:
        scores = np.where(np.tri(q.shape[0], k.shape[0], dtype=bool), scores, -np.inf)
    for t in (q, k, v):
        _check_finite(t.data, 'attention')
    weights = _softmax(scores)
    out = weights @ v.data

    def backward(g):
        d_v = weights.T @ g
        d_w = g @ v.data.T
        d_scores = weights * (d_w - (d_w * weights).sum(axis=1, keepdims=True))
        d_q = (d_scores @ k.data) * factor
        d_k = (d_scores.T @ q.data) * factor
        return d_q, d_k, d_v

    return _result(out, (q, k, v), backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over every element."""
    b = _as_tensor(b, a)
    _same_shape(a, b, 'mse')
    diff = a.data - b.data
    count = diff.size
    value = np.array([[(diff * diff).sum() / count]], dtype=a.dtype)
    _check_finite(value, 'mse')

    def backward(g):
        d = g.reshape(-1)[0] * 2.0 * diff / count
        return d, -d

    return _result(value, (a, b), backward)


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """
    Mean cross-entropy over the rows selected by ``mask``.

    Unselected rows receive exactly zero gradient.

    Args:
        logits: m x C scores
        targets: m class ids (ignored where mask is false)
        mask: m booleans

    Returns:
        1 x 1 loss
    """
    _require_matrix(logits, 'masked_cross_entropy')
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    m, classes = logits.shape
    if targets.size != m or mask.size != m:
        raise ShapeError(f'targets/mask length must equal {m} rows')
    count = int(mask.sum())
    if count == 0:
        raise ContractError('masked_cross_entropy: mask selects no positions')
    rows = np.nonzero(mask)[0]
    picked = targets[rows]
    if picked.min() < 0 or picked.max() >= classes:
        raise ShapeError('masked_cross_entropy: target id outside the class range')
    selected = logits.data[rows]
    shifted = selected - selected.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[np.arange(count), picked]
    value = np.array([[nll.mean()]], dtype=logits.dtype)
    _check_finite(value, 'masked_cross_entropy')

    def backward(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[np.arange(count), picked] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = probs * (g.reshape(-1)[0] / count)
        return (full,)

    return _result(value, (logits,), backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> List[Tensor]:
    """Recorded nodes reachable from ``root``, parents before children."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def gradients(loss: Tensor, tensors: Sequence[Tensor]) -> List[np.ndarray]:
    """
    d loss / d t for every tensor in ``tensors`` (leaves or intermediates).

    Each recorded node is visited exactly once. Tensors the loss does not
    depend on get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f'backward needs a scalar loss, got shape {loss.shape}')
    wanted = {id(t) for t in tensors}
    collected: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(topological_order(loss)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                collected[id(node)] = g
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad
    return [collected.get(id(t), np.zeros_like(t.data)) for t in tensors]


class Graph:
    """
    Named parameter leaves of a model.

    The op records themselves live on the tensors produced during the forward
    pass; nodes() recovers them for a given loss.
    """

    def __init__(self, parameters: Union[Dict[str, Tensor], Iterable[Tuple[str, Tensor]]]):
        self.parameters: Dict[str, Tensor] = dict(parameters)

    def nodes(self, loss: Tensor) -> List[Tensor]:
        return topological_order(loss)

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        names = list(self.parameters)
        grads = gradients(loss, [self.parameters[n] for n in names])
        return dict(zip(names, grads))


def backward(graph: Graph, loss: Tensor) -> Dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every parameter of ``graph``."""
    return graph.backward(loss)

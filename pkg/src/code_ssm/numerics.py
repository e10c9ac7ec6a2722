"""
Dense tensor core for the CodeSSM encoder.

This module provides a numpy-backed Tensor with reverse-mode automatic
differentiation, the FFT and activation primitives the encoder is built from,
a seeded counter-based random generator, allocation instrumentation used by
the benchmarks, and finite-difference gradient verification.

Tensors are immutable by convention once produced. Training and inference
run in 32-bit floats; ``precision(np.float64)`` switches newly created
tensors to 64-bit for gradient checks.
"""

import contextlib
import logging
import math
import weakref
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special, stats

from .exceptions import InvalidInputError, NonFiniteError, ShapeError


logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
IGNORE_INDEX = -100

_default_dtype: type = np.float32
_grad_enabled = True
_tracker: Optional["AllocationTracker"] = None

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


# --- modes -----------------------------------------------------------------

@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the float type used for newly created tensors."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


def default_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


# --- allocation instrumentation --------------------------------------------

class AllocationTracker:
    """Counts bytes held by tensors created while the tracker is active.

    Live bytes go down when a tensor is garbage collected, so ``peak_bytes``
    is the largest transient footprint seen during the tracked block.
    Op-internal workspaces (FFT buffers, score matrices) are reported through
    ``scratch`` and contribute to the peak without staying live.
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self.total_bytes = 0
        self.allocations = 0

    def allocate(self, nbytes: int) -> None:
        self.live_bytes += nbytes
        self.total_bytes += nbytes
        self.allocations += 1
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def release(self, nbytes: int) -> None:
        self.live_bytes -= nbytes

    def scratch(self, *arrays: np.ndarray) -> None:
        nbytes = sum(int(a.nbytes) for a in arrays)
        self.allocate(nbytes)
        self.release(nbytes)


@contextlib.contextmanager
def track_allocations() -> Iterator[AllocationTracker]:
    """Record tensor allocations made inside the block."""
    global _tracker
    previous = _tracker
    tracker = AllocationTracker()
    _tracker = tracker
    try:
        yield tracker
    finally:
        _tracker = previous


def note_scratch(*arrays: np.ndarray) -> None:
    if _tracker is not None:
        _tracker.scratch(*arrays)


# --- tensor ----------------------------------------------------------------

class Tensor:
    """A numpy array that remembers how it was computed.

    Leaf tensors created with ``requires_grad=True`` receive ``.grad`` after
    ``backward()``; intermediate gradients are not retained.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

        if _tracker is not None:
            nbytes = int(self.data.nbytes)
            _tracker.allocate(nbytes)
            weakref.finalize(self, _tracker.release, nbytes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this tensor to every leaf that requires them."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a seed gradient for non-scalar shape {self.shape}")
            grad = np.ones_like(self.data)

        pending: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(_topological_order(self)):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.shape:
                    raise ShapeError(f"gradient shape {parent_grad.shape} does not match "
                                     f"tensor shape {parent.shape}")
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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


def tensor(data: Any, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Create a leaf tensor in the current default float type."""
    return Tensor(np.array(data, dtype=_default_dtype), requires_grad=requires_grad, name=name)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value)
    if array.dtype.kind == "f" and array.dtype != _default_dtype:
        array = array.astype(_default_dtype)
    return Tensor(array)


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap the result of an op, recording the graph edge when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise and linear ops --------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * a.dtype.type(factor), (a,), lambda g: (g * a.dtype.type(factor),))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return make_op(np.matmul(a.data, b.data), (a, b), backward)


def linear(x: ArrayLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (d_in, d_out)."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return make_op(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reduce_sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return scale(reduce_sum(a), 1.0 / max(a.size, 1))


def apply_mask(x: ArrayLike, mask: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 mask broadcast against ``x``."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=x.dtype)
    return make_op(x.data * mask, (x,), lambda g: (_unbroadcast(g * mask, x.shape),))


# --- activations and normalisation -----------------------------------------

def gelu(x: ArrayLike) -> Tensor:
    """GELU with the exact Gaussian CDF, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    out = (x.data * cdf).astype(x.dtype, copy=False)
    return make_op(out, (x,), lambda g: ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),))


def layer_norm(x: ArrayLike, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x = as_tensor(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match last dimension of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    x_hat = centered * inv_std

    def backward(g: np.ndarray):
        g_hat = g * gamma.data
        grad_x = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return grad_x, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return make_op(x_hat * gamma.data + beta.data, (x, gamma, beta), backward)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    note_scratch(shifted)
    y = exps / exps.sum(axis=axis, keepdims=True)
    return make_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def dropout(x: ArrayLike, p: float, rng: "Rng", training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,))


def l2_normalize(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norms == 0):
        raise InvalidInputError("cannot normalise a zero-norm vector")
    y = x.data / norms
    return make_op(y, (x,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norms,))


# --- indexing ops ----------------------------------------------------------

def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)

    def backward(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return make_op(table.data[ids], (table,), backward)


def flip_sequences(x: ArrayLike, lengths: Optional[np.ndarray] = None) -> Tensor:
    """Reverse the valid prefix of each sequence along the time axis.

    ``x`` is (B, L, d) and ``lengths`` holds the valid length of each sample;
    positions past the valid length stay where they are.
    """
    x = as_tensor(x)
    batch, length = x.shape[0], x.shape[1]
    if lengths is None:
        lengths = np.full(batch, length)
    positions = np.arange(length)[None, :]
    lengths = np.asarray(lengths)[:, None]
    index = np.where(positions < lengths, lengths - 1 - positions, positions)
    index = np.broadcast_to(index[..., None], x.shape)
    return make_op(np.take_along_axis(x.data, index, axis=1), (x,),
                   lambda g: (np.take_along_axis(g, index, axis=1),))


def select_position(x: ArrayLike, position: int) -> Tensor:
    """Pick one time step from a (B, L, d) tensor."""
    x = as_tensor(x)

    def backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[:, position, :] = g
        return (grad,)

    return make_op(x.data[:, position, :].copy(), (x,), backward)


def masked_mean(x: ArrayLike, valid: np.ndarray) -> Tensor:
    """Average a (B, L, d) tensor over the valid positions of each sample."""
    x = as_tensor(x)
    weights = np.asarray(valid, dtype=x.dtype)
    counts = weights.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise InvalidInputError("mean pooling needs at least one valid position per sample")
    weights = (weights / counts)[..., None]
    return make_op((x.data * weights).sum(axis=1), (x,), lambda g: (g[:, None, :] * weights,))


# --- losses ----------------------------------------------------------------

def cross_entropy(logits: ArrayLike, labels: np.ndarray,
                  ignore_index: int = IGNORE_INDEX) -> Tuple[Tensor, Optional[float]]:
    """Mean softmax cross-entropy over non-ignored positions.

    Returns the loss tensor and the argmax accuracy over the same positions
    (``None`` when every position is ignored, in which case the loss is 0).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")

    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype)), None

    flat_logits = logits.data.reshape(-1, logits.shape[-1]).astype(np.float64)
    flat_labels = labels.reshape(-1)
    flat_valid = valid.reshape(-1)
    rows = np.nonzero(flat_valid)[0]
    picked = flat_logits[rows]
    targets = flat_labels[rows]
    shifted = picked - picked.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = log_norm - shifted[np.arange(count), targets]
    loss = losses.sum() / count
    accuracy = float((picked.argmax(axis=1) == targets).mean())

    def backward(g: np.ndarray):
        probs = np.exp(shifted - log_norm[:, None])
        probs[np.arange(count), targets] -= 1.0
        grad = np.zeros_like(flat_logits)
        grad[rows] = probs * (float(g) / count)
        return (grad.reshape(logits.shape).astype(logits.dtype),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward), accuracy


# --- spectral primitives ---------------------------------------------------

def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    return 1 << max(int(n) - 1, 0).bit_length()


def fft(values: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Discrete Fourier transform along the last axis.

    The inverse carries the 1/n scale. Lengths must be powers of two; callers
    zero-pad.
    """
    values = np.asarray(values, dtype=np.complex128)
    n = values.shape[-1]
    if not is_power_of_two(n):
        raise ShapeError(f"fft length must be a power of two, got {n}")
    return np.fft.ifft(values, axis=-1) if inverse else np.fft.fft(values, axis=-1)


def real_dft(x: ArrayLike, axis: int = -2) -> Tensor:
    """Real part of the orthonormal DFT along ``axis``.

    The cosine matrix behind it is symmetric, so the transform is its own
    adjoint.
    """
    x = as_tensor(x)

    def transform(values: np.ndarray) -> np.ndarray:
        spectrum = np.fft.fft(values, axis=axis, norm="ortho")
        note_scratch(spectrum)
        return spectrum.real.astype(x.dtype)

    return make_op(transform(x.data), (x,), lambda g: (transform(g),))


# --- randomness ------------------------------------------------------------

class Rng:
    """Seeded Philox stream; the single owner of randomness in a run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._generator = np.random.Generator(np.random.Philox(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def random(self, shape: Union[int, Tuple[int, ...]]) -> np.ndarray:
        return self._generator.random(shape)

    def normal(self, shape: Union[int, Tuple[int, ...]], std: float = 1.0) -> np.ndarray:
        return (self._generator.standard_normal(shape) * std).astype(_default_dtype)

    def integers(self, low: int, high: int, shape: Union[int, Tuple[int, ...], None] = None) -> np.ndarray:
        return self._generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def truncated_normal(self, shape: Tuple[int, ...], std: float, bound: float = 2.0) -> np.ndarray:
        """Normal samples with |z| <= bound standard deviations."""
        samples = stats.truncnorm.rvs(-bound, bound, scale=std, size=shape,
                                      random_state=self._generator)
        return np.asarray(samples, dtype=_default_dtype).reshape(shape)

    def log_uniform(self, low: float, high: float, shape: Union[int, Tuple[int, ...]]) -> np.ndarray:
        return np.exp(self._generator.uniform(math.log(low), math.log(high), size=shape))

    def state(self) -> Dict[str, Any]:
        """JSON-serialisable generator state."""
        return _to_jsonable(self._generator.bit_generator.state)

    @classmethod
    def from_state(cls, seed: int, state: Dict[str, Any]) -> "Rng":
        rng = cls(seed)
        restored = dict(state)
        restored["state"] = {key: np.asarray(value, dtype=np.uint64)
                             for key, value in state["state"].items()}
        restored["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
        rng._generator.bit_generator.state = restored
        return rng


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _to_jsonable(item) for key, item in value.items()}
    if isinstance(value, np.ndarray):
        return [int(item) for item in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    return value


# --- gradient verification -------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_error: float
    worst_parameter: Optional[str] = None
    worst_index: Optional[Tuple[int, ...]] = None
    per_parameter: Dict[str, float] = field(default_factory=dict)
    checked_coordinates: int = 0


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor],
                      epsilon: float = 1e-5, atol: float = 1e-7,
                      max_coords_per_param: Optional[int] = None,
                      rng: Optional[Rng] = None) -> GradCheckReport:
    """Compare backprop gradients with (f(w+e) - f(w-e)) / 2e for every parameter.

    Args:
        loss_fn: Deterministic closure returning a scalar loss tensor built from ``params``
        params: Named leaf tensors; perturbed in place and restored
        epsilon: Central-difference step
        atol: Floor of the relative-error denominator
        max_coords_per_param: Optional cap on checked coordinates per tensor
        rng: Chooses the sampled coordinates when a cap is given

    Returns:
        Report with the worst relative error |a - n| / max(|a|, |n|, atol)
    """
    with precision(np.float64):
        return _central_difference_check(loss_fn, params, epsilon, atol, max_coords_per_param, rng)


def _central_difference_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor],
                              epsilon: float, atol: float, max_coords_per_param: Optional[int],
                              rng: Optional[Rng]) -> GradCheckReport:
    for name, param in params.items():
        if param.dtype != np.float64:
            logger.warning(f"Gradient check on {name} runs in {param.dtype}; differences "
                           f"will be dominated by rounding")
        param.grad = None

    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("loss is not finite at the unperturbed parameters", "<all>")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    report = GradCheckReport(max_rel_error=0.0)
    sampler = rng or Rng(0)
    with no_grad():
        for name, param in params.items():
            flat_count = param.size
            if max_coords_per_param is not None and flat_count > max_coords_per_param:
                flat = np.sort(sampler.permutation(flat_count)[:max_coords_per_param])
            else:
                flat = np.arange(flat_count)

            worst = 0.0
            for flat_index in flat:
                index = np.unravel_index(int(flat_index), param.shape)
                original = param.data[index]
                param.data[index] = original + epsilon
                plus = float(loss_fn().data)
                param.data[index] = original - epsilon
                minus = float(loss_fn().data)
                param.data[index] = original
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise NonFiniteError(f"loss became non-finite perturbing {name}{list(index)}", name)

                numeric = (plus - minus) / (2.0 * epsilon)
                exact = float(analytic[name][index])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), atol)
                report.checked_coordinates += 1
                if error > worst:
                    worst = error
                if error > report.max_rel_error:
                    report.max_rel_error = error
                    report.worst_parameter = name
                    report.worst_index = tuple(int(i) for i in index)
            report.per_parameter[name] = worst
            logger.debug(f"Gradient check {name}: {len(flat)} coordinates, worst {worst:.3e}")

    logger.info(f"Gradient check over {report.checked_coordinates} coordinates: "
                f"max relative error {report.max_rel_error:.3e} ({report.worst_parameter})")
    return report

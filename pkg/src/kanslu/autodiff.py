"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine records operations onto an explicit :class:`Tape`.  Every
primitive keeps only what its backward rule actually needs (compact masks,
normalized activations, pooling indices), never whole parent tensors, so
large-batch training fits in memory.  Gradient buffers are freed as soon
as the reverse sweep has consumed them.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ParameterError",
    "TapeError",
    "backward",
    "track_allocations",
    "add",
    "mul",
    "neg",
    "sum_all",
    "reshape",
    "matmul",
    "linear",
    "gelu",
    "swish",
    "conv2d",
    "batchnorm2d",
    "layernorm",
    "maxpool2d",
    "dropout",
    "softmax_cross_entropy",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Byte budget for transient conv workspaces (im2col chunks).
_WORKSPACE_BYTES = 192 * 1024 * 1024


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ParameterError(ValueError):
    """An operation parameter is outside its legal range."""


class TapeError(RuntimeError):
    """A tape was used in a way that violates the backward contract."""


# ---------------------------------------------------------------------------
# Allocation tracking (used by the memory-contract tests)
# ---------------------------------------------------------------------------

class AllocationLog:
    """Records the element count of every buffer allocated while active."""

    def __init__(self) -> None:
        self.sizes: list[int] = []

    def note(self, n_elements: int) -> None:
        self.sizes.append(int(n_elements))

    @property
    def largest(self) -> int:
        return max(self.sizes, default=0)

    @property
    def total(self) -> int:
        return sum(self.sizes)


_ALLOC_LOG: Optional[AllocationLog] = None


class track_allocations:
    """Context manager that captures buffer allocations into an AllocationLog."""

    def __enter__(self) -> AllocationLog:
        global _ALLOC_LOG
        self._prev = _ALLOC_LOG
        _ALLOC_LOG = AllocationLog()
        return _ALLOC_LOG

    def __exit__(self, *exc) -> None:
        global _ALLOC_LOG
        _ALLOC_LOG = self._prev


def _note_alloc(n_elements: int) -> None:
    if _ALLOC_LOG is not None:
        _ALLOC_LOG.note(n_elements)


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

_UIDS = itertools.count(1)


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Tensors are value-like: ops never mutate their inputs.  ``requires_grad``
    marks trainable leaves; intermediates produced on a tape receive
    transient gradients during the reverse sweep but only leaves keep a
    ``grad`` array afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "_uid", "_produced")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._uid = next(_UIDS)
        self._produced = False
        if arr.base is None:
            _note_alloc(arr.size)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Small operator sugar so tests and layer code read naturally.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Ref:
    """Lightweight handle to a parent: uid for grad routing, the tensor
    itself only when it is a leaf that must receive a .grad deposit."""

    __slots__ = ("uid", "leaf")

    def __init__(self, uid: int, leaf: Optional[Tensor]):
        self.uid = uid
        self.leaf = leaf


def _ref(t: Tensor) -> _Ref:
    leaf = t if (t.requires_grad and not t._produced) else None
    return _Ref(t._uid, leaf)


Rule = Callable[[np.ndarray], Iterable[tuple[_Ref, Optional[np.ndarray]]]]


class Tape:
    """Ordered record of differentiable operations.

    Recording order is execution order, which is automatically topological:
    every node's inputs precede it.  A tape supports exactly one backward
    pass; record a fresh tape per step.
    """

    def __init__(self) -> None:
        self._nodes: list[Optional[tuple[int, Rule]]] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self._nodes)


_ACTIVE: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(out: Tensor, rule: Rule) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._produced = True
        tape._nodes.append((out._uid, rule))


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad for every reachable leaf, walking the tape in reverse.

    Gradient buffers for intermediates are dropped as soon as their producer
    node has consumed them, and node closures are released on the way, so
    peak memory during the sweep stays near the forward-pass footprint.
    """
    if tape._done:
        raise TapeError("tape already consumed by a backward pass; record a fresh tape")
    if loss.size != 1:
        raise TapeError(f"backward root must be a scalar, got shape {loss.shape}")
    tape._done = True
    grads: dict[int, np.ndarray] = {loss._uid: np.ones_like(loss.data)}
    nodes = tape._nodes
    for i in range(len(nodes) - 1, -1, -1):
        out_uid, rule = nodes[i]
        nodes[i] = None  # release the closure and everything it pinned
        g = grads.pop(out_uid, None)
        if g is None:
            continue
        for ref, pg in rule(g):
            if pg is None:
                continue
            if ref.leaf is not None:
                t = ref.leaf
                t.grad = pg if t.grad is None else t.grad + pg
            else:
                acc = grads.get(ref.uid)
                grads[ref.uid] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        ra, rb = _ref(a), _ref(b)
        sa, sb = a.data.shape, b.data.shape
        na, nb = a.requires_grad, b.requires_grad

        def rule(g):
            return (
                (ra, _unbroadcast(g, sa) if na else None),
                (rb, _unbroadcast(g, sb) if nb else None),
            )

        _record(out, rule)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        ra, rb = _ref(a), _ref(b)
        ad, bd = a.data, b.data
        na, nb = a.requires_grad, b.requires_grad

        def rule(g):
            return (
                (ra, _unbroadcast(g * bd, ad.shape) if na else None),
                (rb, _unbroadcast(g * ad, bd.shape) if nb else None),
            )

        _record(out, rule)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=a.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        ra = _ref(a)
        _record(out, lambda g: ((ra, -g),))
    return out


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(a.data.sum(), requires_grad=a.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        ra = _ref(a)
        shape = a.data.shape

        def rule(g):
            return ((ra, np.broadcast_to(g, shape).copy()),)

        _record(out, rule)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        ra = _ref(a)
        orig = a.data.shape
        _record(out, lambda g: ((ra, g.reshape(orig)),))
    return out


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul requires [m,k] @ [k,n], got {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        ra, rb = _ref(a), _ref(b)
        ad, bd = a.data, b.data
        na, nb = a.requires_grad, b.requires_grad

        def rule(g):
            return (
                (ra, g @ bd.T if na else None),
                (rb, ad.T @ g if nb else None),
            )

        _record(out, rule)
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map y = x @ W.T + b with W of shape [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear requires x[B,in] and W[out,in], got {x.shape} and {weight.shape}"
        )
    y = x.data @ weight.data.T
    if bias is not None:
        y += bias.data
    req = x.requires_grad or weight.requires_grad or (bias is not None and bias.requires_grad)
    out = Tensor(y, requires_grad=req)
    if out.requires_grad and _active_tape() is not None:
        rx, rw = _ref(x), _ref(weight)
        rb = _ref(bias) if bias is not None else None
        xd, wd = x.data, weight.data
        nx, nw = x.requires_grad, weight.requires_grad
        nb = bias is not None and bias.requires_grad

        def rule(g):
            parents = [
                (rx, g @ wd if nx else None),
                (rw, g.T @ xd if nw else None),
            ]
            if rb is not None:
                parents.append((rb, g.sum(axis=0) if nb else None))
            return parents

        _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def _phi(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF via the error function (exact, no tanh approximation)."""
    return 0.5 * (1.0 + erf(x / _SQRT2))


def gelu(x: Tensor) -> Tensor:
    cdf = _phi(x.data)
    out = Tensor(x.data * cdf, requires_grad=x.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        rx = _ref(x)
        # d/dx [x Phi(x)] = Phi(x) + x phi(x); store the derivative so the
        # input array itself can be released.
        deriv = cdf + x.data * (_INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data))
        _record(out, lambda g: ((rx, g * deriv),))
    return out


def swish(x: Tensor) -> Tensor:
    """Swish-1: x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s, requires_grad=x.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        rx = _ref(x)
        deriv = s * (1.0 + x.data * (1.0 - s))
        _record(out, lambda g: ((rx, g * deriv),))
    return out


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------

def _corr2d(x: np.ndarray, kernel: np.ndarray, padding: int) -> np.ndarray:
    """Batched 2D cross-correlation (3x3, stride 1) via chunked im2col + GEMM."""
    B, C, H, W = x.shape
    O = kernel.shape[0]
    kh, kw = kernel.shape[2], kernel.shape[3]
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kmat = kernel.reshape(O, C * kh * kw).T
    out = np.empty((B, O, Ho, Wo))
    per_example = C * kh * kw * Ho * Wo * 8
    chunk = max(1, _WORKSPACE_BYTES // max(per_example, 1))
    for b0 in range(0, B, chunk):
        b1 = min(b0 + chunk, B)
        win = np.lib.stride_tricks.sliding_window_view(x[b0:b1], (kh, kw), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape((b1 - b0) * Ho * Wo, C * kh * kw)
        _note_alloc(cols.size)
        out[b0:b1] = (cols @ kmat).reshape(b1 - b0, Ho, Wo, O).transpose(0, 3, 1, 2)
    return out


def _corr2d_kernel_grad(x: np.ndarray, g: np.ndarray, kshape, padding: int) -> np.ndarray:
    """Gradient of _corr2d w.r.t. the kernel, accumulated over batch chunks."""
    B, C, H, W = x.shape
    O, _, kh, kw = kshape
    Ho, Wo = g.shape[2], g.shape[3]
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    dk = np.zeros((C * kh * kw, O))
    per_example = C * kh * kw * Ho * Wo * 8
    chunk = max(1, _WORKSPACE_BYTES // max(per_example, 1))
    for b0 in range(0, B, chunk):
        b1 = min(b0 + chunk, B)
        win = np.lib.stride_tricks.sliding_window_view(x[b0:b1], (kh, kw), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape((b1 - b0) * Ho * Wo, C * kh * kw)
        gmat = g[b0:b1].transpose(0, 2, 3, 1).reshape((b1 - b0) * Ho * Wo, O)
        dk += cols.T @ gmat
    return dk.T.reshape(O, C, kh, kw)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 2,
) -> Tensor:
    """2D cross-correlation with zero padding (3x3 kernel, stride 1)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d requires x[B,C,H,W] and kernel[O,C,3,3], got {x.shape} and {kernel.shape}")
    if kernel.shape[2] != 3 or kernel.shape[3] != 3:
        raise ShapeError(f"conv2d kernel spatial size must be 3x3, got {kernel.shape}")
    if stride != 1:
        raise ParameterError(f"conv2d supports stride 1 only, got {stride}")
    if not 0 <= padding <= 2:
        raise ParameterError(f"conv2d supports padding in [0,2], got {padding}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}"
        )
    y = _corr2d(x.data, kernel.data, padding)
    if bias is not None:
        y += bias.data[None, :, None, None]
    req = x.requires_grad or kernel.requires_grad or (bias is not None and bias.requires_grad)
    out = Tensor(y, requires_grad=req)
    if out.requires_grad and _active_tape() is not None:
        rx, rk = _ref(x), _ref(kernel)
        rb = _ref(bias) if bias is not None else None
        xd, kd = x.data, kernel.data
        nx, nk = x.requires_grad, kernel.requires_grad
        nb = bias is not None and bias.requires_grad
        kshape = kernel.shape

        def rule(g):
            dx = None
            if nx:
                # dX is a correlation of the output grad with the kernel
                # rotated 180 degrees and in/out channels swapped.
                kflip = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                dx = _corr2d(g, np.ascontiguousarray(kflip), 2 - padding)
            parents = [
                (rx, dx),
                (rk, _corr2d_kernel_grad(xd, g, kshape, padding) if nk else None),
            ]
            if rb is not None:
                parents.append((rb, g.sum(axis=(0, 2, 3)) if nb else None))
            return parents

        _record(out, rule)
    return out


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Window maximum; odd trailing rows/columns are dropped.

    Backward routes each window's gradient to the first maximal element in
    row-major window order.
    """
    if window != 2 or stride != 2:
        raise ParameterError("maxpool2d supports window=2, stride=2 only")
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool2d needs H,W >= 2, got {x.shape}")
    windows = (
        x.data[:, :, : Ho * 2, : Wo * 2]
        .reshape(B, C, Ho, 2, Wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, Ho, Wo, 4)
    )
    idx = windows.argmax(axis=-1)  # first occurrence on ties (row-major in window)
    out = Tensor(
        np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0],
        requires_grad=x.requires_grad,
    )
    if out.requires_grad and _active_tape() is not None:
        rx = _ref(x)
        idx8 = idx.astype(np.uint8)
        in_shape = (B, C, H, W)

        def rule(g):
            dwin = np.zeros((B, C, Ho, Wo, 4))
            np.put_along_axis(dwin, idx8[..., None].astype(np.intp), g[..., None], axis=-1)
            dx = np.zeros(in_shape)
            dx[:, :, : Ho * 2, : Wo * 2] = (
                dwin.reshape(B, C, Ho, Wo, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(B, C, Ho * 2, Wo * 2)
            )
            return ((rx, dx),)

        _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, momentum-weighted).  In eval mode
    the running statistics are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d requires x[B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    n = B * H * W
    if training:
        if n < 2:
            raise ShapeError(f"batchnorm2d needs at least 2 elements per channel in training mode, got {n}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean = running_mean
        var = running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = Tensor(
        gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None],
        requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad,
    )
    if out.requires_grad and _active_tape() is not None:
        rx, rg, rb = _ref(x), _ref(gamma), _ref(beta)
        gd = gamma.data
        nx, ng, nbeta = x.requires_grad, gamma.requires_grad, beta.requires_grad

        def rule(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if (ng or nx) else None
            dx = None
            if nx:
                scale = (gd * invstd)[None, :, None, None]
                if training:
                    gmean = g.mean(axis=(0, 2, 3))[None, :, None, None]
                    dx = scale * (g - gmean - xhat * (dgamma / n)[None, :, None, None])
                else:
                    dx = scale * g
            return (
                (rx, dx),
                (rg, dgamma if ng else None),
                (rb, g.sum(axis=(0, 2, 3)) if nbeta else None),
            )

        _record(out, rule)
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the feature axis of x[B, D]."""
    if x.ndim != 2:
        raise ShapeError(f"layernorm requires x[B,D], got {x.shape}")
    D = x.shape[1]
    if D < 2:
        raise ShapeError(f"layernorm requires feature width >= 2, got {D}")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * invstd
    out = Tensor(
        gamma.data * xhat + beta.data,
        requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad,
    )
    if out.requires_grad and _active_tape() is not None:
        rx, rg, rb = _ref(x), _ref(gamma), _ref(beta)
        gd = gamma.data
        nx, ng, nbeta = x.requires_grad, gamma.requires_grad, beta.requires_grad

        def rule(g):
            dx = None
            if nx:
                gg = g * gd
                dx = invstd * (
                    gg
                    - gg.mean(axis=1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=1, keepdims=True)
                )
            return (
                (rx, dx),
                (rg, (g * xhat).sum(axis=0) if ng else None),
                (rb, g.sum(axis=0) if nbeta else None),
            )

        _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# Regularization and loss
# ---------------------------------------------------------------------------

def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero each element with probability p; scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode requires an rng")
    keep = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    out = Tensor(np.where(keep, x.data * scale, 0.0), requires_grad=x.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        rx = _ref(x)

        def rule(g):
            return ((rx, np.where(keep, g * scale, 0.0)),)

        _record(out, rule)
    return out


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy requires logits[B,K], got {logits.shape}")
    B, K = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (B,):
        raise ShapeError(f"targets must have shape ({B},), got {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= K:
        bad = targets[(targets < 0) | (targets >= K)][0]
        raise IndexError(f"target class {bad} outside [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(sez)
    loss = -log_probs[np.arange(B), targets].mean()
    out = Tensor(loss, requires_grad=logits.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        rl = _ref(logits)
        softmax = ez / sez

        def rule(g):
            d = softmax.copy()
            d[np.arange(B), targets] -= 1.0
            return ((rl, d * (float(g) / B)),)

        _record(out, rule)
    return out

"""Dense float tensors with reverse-mode automatic differentiation.

The operation set is exactly what the denoising network needs: elementwise
arithmetic, shape bookkeeping (reshape, permute, concat), batched matrix
products, 2-D convolution, and quarter-turn rotation. Every op carries a
hand-written backward rule recorded on a ``Tape``; ``gradcheck`` compares tape
gradients against central finite differences.

Tensors are immutable values once produced by an op, so concurrent reads are
safe. A Tape is single-writer: one logical training thread appends nodes and
runs backward. Data is stored row-major; 64-bit precision exists for gradient
checking, training runs 32-bit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import SplitMix64


class TensorError(ValueError):
    """An op was called outside its contract (shape, rank, or tape misuse)."""


_grad_enabled = True
_checked = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Validate op outputs for NaN/Inf inside the block."""
    global _checked
    prev = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = prev


class Tensor:
    """A dense row-major float array, optionally bound to a recording tape."""

    __slots__ = ("data", "tape", "slot")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.tape = None
        self.slot = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class _Node:
    __slots__ = ("pull",)

    def __init__(self, pull):
        # pull(grad_out) -> iterable of (slot, grad_contribution); None marks a leaf
        self.pull = pull


class Tape:
    """Append-only record of executed ops plus the registry of trainable leaves."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def _leaf(self) -> int:
        self.nodes.append(_Node(None))
        return len(self.nodes) - 1

    def watch(self, t: Tensor) -> Tensor:
        """Bind a tensor to this tape as a gradient sink."""
        if t.tape is self and t.slot is not None:
            return t
        t.tape = self
        t.slot = self._leaf()
        return t

    def parameter(self, name: str, t: Tensor) -> Tensor:
        """Register a named trainable leaf."""
        if name in self.params:
            raise TensorError(f"duplicate parameter name {name!r}")
        self.watch(t)
        self.params[name] = t
        return t

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        """Reverse sweep from a scalar loss; one gradient per registered leaf.

        Leaves that did not participate in the loss receive zero gradients.
        """
        if loss.tape is not self or loss.slot is None:
            raise TensorError("loss was not produced through this tape")
        if loss.data.size != 1:
            raise TensorError(f"loss must be scalar, got shape {loss.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.slot] = np.ones_like(loss.data)
        for idx in range(len(self.nodes) - 1, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.pull is None:
                continue
            for slot, contrib in node.pull(g):
                if grads[slot] is None:
                    # defensive copy: pull results may be views of g
                    grads[slot] = np.positive(contrib)
                else:
                    grads[slot] = grads[slot] + contrib
            grads[idx] = None  # consumed
        out = {}
        for name, p in self.params.items():
            gp = grads[p.slot]
            out[name] = Tensor(np.zeros_like(p.data) if gp is None else gp)
        return out


def _assert_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise TensorError(f"non-finite values produced by {op}")


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor], pull_factory, op: str = "op") -> Tensor:
    """Wrap a computed array as a differentiable result.

    ``pull_factory(needs)`` receives a tuple of booleans marking which inputs
    require gradients and returns ``pull(g) -> list of per-input gradient
    arrays`` (entries for inputs with ``needs[i] == False`` may be None).
    Layers outside this module use this hook for their own backward rules.
    """
    if _checked:
        _assert_finite(out_data, op)
    out = Tensor(out_data)
    if not _grad_enabled:
        return out
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TensorError(f"{op}: inputs recorded on different tapes")
    if tape is None:
        return out
    slots = tuple(t.slot if t.tape is tape else None for t in inputs)
    needs = tuple(s is not None for s in slots)
    pull = pull_factory(needs)

    def node_pull(g):
        contribs = pull(g)
        return [
            (slot, c)
            for slot, c in zip(slots, contribs)
            if slot is not None and c is not None
        ]

    tape.nodes.append(_Node(node_pull))
    out.tape = tape
    out.slot = len(tape.nodes) - 1
    return out


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise TensorError("empty shape list")
    if any(s < 1 for s in shape):
        raise TensorError(f"non-positive dimension in shape {shape}")
    return shape


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype))


def full(shape, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype))


def gaussian(shape, mean: float, std: float, seed: int, dtype=np.float32) -> Tensor:
    shape = _check_shape(shape)
    n = int(np.prod(shape))
    data = SplitMix64(seed).gaussian(n, mean, std).reshape(shape)
    return Tensor(data.astype(dtype))


# ---------------------------------------------------------------------------
# elementwise ops (identical shapes; no general broadcasting)
# ---------------------------------------------------------------------------


def _match(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _match(a, b, "add")
    return apply_op(a.data + b.data, [a, b], lambda needs: lambda g: [g, g], "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _match(a, b, "sub")
    return apply_op(a.data - b.data, [a, b], lambda needs: lambda g: [g, -g], "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _match(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op(ad * bd, [a, b], lambda needs: lambda g: [g * bd, g * ad], "mul")


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return apply_op(a.data * k, [a], lambda needs: lambda g: [g * k], "scale")


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements as a shape-(1,) scalar tensor."""
    out = a.data.sum(dtype=a.data.dtype).reshape(1)
    shape = a.shape

    def factory(needs):
        def pull(g):
            return [np.broadcast_to(g.reshape(()), shape)]

        return pull

    return apply_op(out, [a], factory, "sum_all")


# ---------------------------------------------------------------------------
# shape bookkeeping
# ---------------------------------------------------------------------------


def reshape(t: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != t.size:
        raise TensorError(
            f"reshape: element count mismatch, {t.shape} -> {new_shape}"
        )
    old_shape = t.shape

    def factory(needs):
        return lambda g: [g.reshape(old_shape)]

    return apply_op(t.data.reshape(new_shape), [t], factory, "reshape")


def permute(t: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(len(t.shape))):
        raise TensorError(f"permute: invalid permutation {axes} for rank {len(t.shape)}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def factory(needs):
        return lambda g: [np.ascontiguousarray(np.transpose(g, inverse))]

    out = np.ascontiguousarray(np.transpose(t.data, axes))
    return apply_op(out, [t], factory, "permute")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise TensorError("concat: no tensors")
    rank = len(tensors[0].shape)
    axis = int(axis)
    if not 0 <= axis < rank:
        raise TensorError(f"concat: axis {axis} out of range for rank {rank}")
    for t in tensors[1:]:
        if len(t.shape) != rank:
            raise TensorError("concat: rank mismatch")
        for d in range(rank):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise TensorError(
                    f"concat: dimension mismatch on axis {d}: "
                    f"{t.shape} vs {tensors[0].shape}"
                )
    widths = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def factory(needs):
        def pull(g):
            out = []
            for i in range(len(widths)):
                if needs[i]:
                    sl = [slice(None)] * rank
                    sl[axis] = slice(offsets[i], offsets[i + 1])
                    out.append(g[tuple(sl)])
                else:
                    out.append(None)
            return out

        return pull

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, factory, "concat")


# ---------------------------------------------------------------------------
# batched matrix product
# ---------------------------------------------------------------------------


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Per-batch matrix product: (..., m, k) x (..., k, n) -> (..., m, n)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim:
        raise TensorError(f"matmul_batched: ranks {ad.ndim} vs {bd.ndim}")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise TensorError(
            f"matmul_batched: batch dims {ad.shape[:-2]} vs {bd.shape[:-2]}"
        )
    if ad.shape[-1] != bd.shape[-2]:
        raise TensorError(
            f"matmul_batched: inner dims {ad.shape[-1]} vs {bd.shape[-2]}"
        )

    def factory(needs):
        def pull(g):
            da = np.matmul(g, bd.swapaxes(-1, -2)) if needs[0] else None
            db = np.matmul(ad.swapaxes(-1, -2), g) if needs[1] else None
            return [da, db]

        return pull

    return apply_op(np.matmul(ad, bd), [a, b], factory, "matmul_batched")


# ---------------------------------------------------------------------------
# 2-D convolution (zero padding, cross-correlation convention)
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, st: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh * kw, oh * ow), dtype=xp.dtype)
    for i in range(kh):
        he = i + (oh - 1) * st + 1
        for j in range(kw):
            we = j + (ow - 1) * st + 1
            cols[:, :, i * kw + j, :] = xp[:, :, i:he:st, j:we:st].reshape(b, c, -1)
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, st: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp_shape[:2]
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dcols = dcols.reshape(b, c, kh * kw, oh, ow)
    for i in range(kh):
        he = i + (oh - 1) * st + 1
        for j in range(kw):
            we = j + (ow - 1) * st + 1
            dxp[:, :, i:he:st, j:we:st] += dcols[:, :, i * kw + j]
    return dxp


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Batched 2-D convolution of (b,cin,h,w) with weights (cout,cin,kh,kw).

    ``padding`` is symmetric zero padding, an int or an (ph, pw) pair.
    Output spatial size: (h + 2*ph - kh) // stride + 1, likewise for width.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise TensorError(f"conv2d: expected rank-4 input/weight, got {xd.ndim}/{wd.ndim}")
    b, cin, h, wid = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin != cin_w:
        raise TensorError(f"conv2d: channel mismatch, input {cin} vs weight {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise TensorError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    ph, pw = (padding, padding) if isinstance(padding, int) else (int(padding[0]), int(padding[1]))
    st = int(stride)
    oh = (h + 2 * ph - kh) // st + 1
    ow = (wid + 2 * pw - kw) // st + 1
    if oh < 1 or ow < 1:
        raise TensorError(f"conv2d: non-positive output size ({oh}, {ow})")
    inputs = [x, w] if bias is None else [x, w, bias]
    w2 = wd.reshape(cout, -1)

    if kh == 1 and kw == 1 and st == 1 and ph == 0 and pw == 0:
        # pointwise conv is a channel matmul; skip the im2col machinery
        x2 = xd.reshape(b, cin, h * wid)
        out = np.matmul(w2[None], x2).reshape(b, cout, h, wid)
        if bias is not None:
            out = out + bias.data[None, :, None, None]

        def factory(needs):
            def pull(g):
                g2 = g.reshape(b, cout, h * wid)
                dx = dw = db = None
                if needs[1]:
                    dw = np.matmul(g2, x2.swapaxes(1, 2)).sum(axis=0).reshape(wd.shape)
                if needs[0]:
                    dx = np.matmul(w2.T[None], g2).reshape(b, cin, h, wid)
                if bias is not None and needs[2]:
                    db = g.sum(axis=(0, 2, 3))
                return [dx, dw] if bias is None else [dx, dw, db]

            return pull

        return apply_op(out, inputs, factory, "conv2d")

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = _im2col(xp, kh, kw, st, oh, ow)
    out = np.matmul(w2[None], cols).reshape(b, cout, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    xp_shape = xp.shape

    def factory(needs):
        def pull(g):
            g2 = g.reshape(b, cout, oh * ow)
            dx = dw = db = None
            if needs[1]:
                dw = np.matmul(g2, cols.swapaxes(1, 2)).sum(axis=0).reshape(wd.shape)
            if needs[0]:
                dcols = np.matmul(w2.T[None], g2)
                dxp = _col2im(dcols, xp_shape, kh, kw, st, oh, ow)
                dx = dxp[:, :, ph:ph + h, pw:pw + wid] if (ph or pw) else dxp
            if bias is not None and needs[2]:
                db = g.sum(axis=(0, 2, 3))
            return [dx, dw] if bias is None else [dx, dw, db]

        return pull

    return apply_op(out, inputs, factory, "conv2d")


# ---------------------------------------------------------------------------
# quarter-turn rotation of the spatial grid
# ---------------------------------------------------------------------------


def rotate90k(t: Tensor, k: int) -> Tensor:
    """Rotate the last two axes by k counterclockwise quarter turns (k mod 4)."""
    if len(t.shape) < 2:
        raise TensorError(f"rotate90k: rank {len(t.shape)} < 2")
    k = int(k) % 4
    axes = (t.data.ndim - 2, t.data.ndim - 1)

    def factory(needs):
        return lambda g: [np.ascontiguousarray(np.rot90(g, -k, axes=axes))]

    out = np.ascontiguousarray(np.rot90(t.data, k, axes=axes))
    return apply_op(out, [t], factory, "rotate90k")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def gradcheck(
    forward: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-4,
    max_checks_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``forward`` against central finite differences.

    ``forward`` must return a scalar tensor computed from the tensors in
    ``params`` (the same objects, read at call time) and be deterministic;
    two differing baseline evaluations are rejected. Run with float64
    parameters: 32-bit cancellation cannot reach the 1e-5 tolerances.

    Returns the worst relative error over the checked coordinates, with
    max(|analytic|, |numeric|, 1e-8) as the denominator. When a parameter has
    more coordinates than ``max_checks_per_param``, a seeded deterministic
    sample of coordinates is checked instead of all of them.
    """
    eps = float(eps)
    if eps <= 0:
        raise TensorError("gradcheck: eps must be positive")

    def evaluate() -> float:
        with no_grad():
            out = forward()
        if out.data.size != 1:
            raise TensorError("gradcheck: forward must return a scalar")
        return float(out.data.reshape(-1)[0])

    if evaluate() != evaluate():
        raise TensorError("gradcheck: forward is not deterministic")

    tape = Tape()
    for name, t in params.items():
        tape.parameter(name, t)
    loss = forward()
    analytic = tape.backward(loss)
    for t in params.values():
        t.tape = None
        t.slot = None

    rng = SplitMix64(seed)
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_checks_per_param is None or n <= max_checks_per_param:
            coords: Iterable[int] = range(n)
        else:
            coords = sorted({min(int(u * n), n - 1) for u in rng.uniform(max_checks_per_param)})
        a_flat = analytic[name].data.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst

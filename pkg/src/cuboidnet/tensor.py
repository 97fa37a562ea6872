"""Dense float64 tensors with reverse-mode differentiation on a gradient tape.

Every differentiable operation records itself on the thread's active
:class:`ComputationTape`; :func:`backward` replays the tape in reverse from a
scalar loss and accumulates gradients into every ``requires_grad`` tensor that
the loss depends on. Convolutions run as im2col + one GEMM so the heavy
lifting stays inside BLAS.

Spatial operations accept their documented unbatched shapes (e.g. conv2d on
``(C, H, W)``) and, as an internal extension, the same shape with one extra
leading batch axis. Batched and unbatched calls share one code path.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

__all__ = [
    "Tensor",
    "ComputationTape",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "subtract",
    "multiply",
    "scale",
    "concat",
    "stack",
    "reshape",
    "permute",
    "index_axis",
    "axis_matmul",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "leaky_relu",
    "prelu",
    "sigmoid",
    "pool_channel_stats",
    "pool_spatial_stats",
    "conv2d",
    "conv3d",
    "conv_transpose3d",
]


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


# A record is (output, inputs, backward_fn); backward_fn maps the output
# gradient to one gradient array (or None) per input, in order.
_Record = tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], tuple]]


class ComputationTape:
    """Ordered record of executed differentiable operations.

    The tape a thread is currently recording onto is implicit; use the tape
    as a context manager to record a region onto a private tape (tapes on
    different threads are independent).
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], back) -> None:
        self._records.append((output, inputs, back))

    def clear(self) -> None:
        self._records.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into every reachable requires_grad tensor.

        The tape is cleared afterwards. Replaying an empty tape is a no-op
        apart from seeding the loss's own gradient.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward: loss must be scalar, got shape {loss.data.shape}"
            )
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, back in reversed(self._records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            parts = back(g)
            for t, part in zip(inputs, parts):
                if part is None or not t.requires_grad:
                    continue
                prev = pending.get(id(t))
                pending[id(t)] = part if prev is None else prev + part
                holders[id(t)] = t
        for key, t in holders.items():
            g = pending.get(key)
            if g is None or not t.requires_grad:
                continue
            t.grad = g if t.grad is None else t.grad + g
        self._records.clear()

    def __enter__(self) -> "ComputationTape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()


class _ThreadState(threading.local):
    def __init__(self):
        self.tapes: list[ComputationTape] = [ComputationTape()]
        self.grad_enabled = True


_state = _ThreadState()

# Names of operations whose backward pass should be deliberately corrupted.
# Used only by the self-test's negative control.
_fault_targets: set[str] = set()


def set_fault_injection(names: Sequence[str]) -> None:
    _fault_targets.clear()
    _fault_targets.update(names)


def active_tape() -> ComputationTape:
    return _state.tapes[-1]


def backward(loss: Tensor) -> None:
    """Run the active tape backward from ``loss`` and clear it."""
    active_tape().backward(loss)


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev


def _record(out: Tensor, inputs: tuple[Tensor, ...], back) -> Tensor:
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tapes[-1].record(out, inputs, back)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural operations
# ---------------------------------------------------------------------------


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> None:
    if len(sa) != len(sb):
        raise ContractError(f"{op}: rank mismatch {sa} vs {sb}")
    for axis, (a, b) in enumerate(zip(sa, sb)):
        if a != b and a != 1 and b != 1:
            raise ContractError(f"{op}: extent mismatch on axis {axis}: {a} vs {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    out = Tensor(a.data + b.data)

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), back)


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "subtract")
    out = Tensor(a.data - b.data)

    def back(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _record(out, (a, b), back)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "multiply")
    out = Tensor(a.data * b.data)

    def back(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), back)


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    out = Tensor(x.data * factor)

    def back(g):
        return (g * factor,)

    return _record(out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base):
            raise ContractError(f"concat: rank mismatch {t.shape} vs {base}")
        for ax in range(len(base)):
            if ax != axis and t.shape[ax] != base[ax]:
                raise ContractError(
                    f"concat: extent mismatch on axis {ax}: {t.shape[ax]} vs {base[ax]}"
                )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack: need at least one tensor")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ContractError(
                f"stack: shape mismatch {t.shape} vs {tensors[0].shape}"
            )
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def back(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return _record(out, tuple(tensors), back)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    src = x.data.shape

    def back(g):
        return (g.reshape(src),)

    return _record(out, (x,), back)


def permute(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _record(out, (x,), back)


def index_axis(x, axis: int, index: int) -> Tensor:
    """Select one subarray along ``axis`` (the axis is dropped)."""
    x = _as_tensor(x)
    if not 0 <= axis < x.ndim:
        raise ContractError(f"index_axis: axis {axis} out of range for {x.shape}")
    if not 0 <= index < x.shape[axis]:
        raise ContractError(
            f"index_axis: index {index} out of range on axis {axis} of {x.shape}"
        )
    out = Tensor(np.take(x.data, index, axis=axis))
    sel = (slice(None),) * axis + (index,)
    src = x.data.shape

    def back(g):
        dx = np.zeros(src)
        dx[sel] = g
        return (dx,)

    return _record(out, (x,), back)


def axis_matmul(x, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a fixed linear map ``matrix`` (out x in) along one axis of x."""
    x = _as_tensor(x)
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"axis_matmul: matrix must be 2-D, got {m.shape}")
    if x.shape[axis] != m.shape[1]:
        raise ContractError(
            f"axis_matmul: axis {axis} extent {x.shape[axis]} != matrix columns {m.shape[1]}"
        )
    moved = np.moveaxis(x.data, axis, -1)
    out_d = np.moveaxis(moved @ m.T, -1, axis)
    out = Tensor(np.ascontiguousarray(out_d))

    def back(g):
        gm = np.moveaxis(g, axis, -1)
        dx = np.moveaxis(gm @ m, -1, axis)
        return (np.ascontiguousarray(dx),)

    return _record(out, (x,), back)


def reduce_sum(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data))
    src = x.data.shape

    def back(g):
        return (np.broadcast_to(g, src).copy(),)

    return _record(out, (x,), back)


def reduce_mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out = Tensor(np.sum(x.data) / n)
    src = x.data.shape

    def back(g):
        return (np.broadcast_to(g / n, src).copy(),)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    xd = x.data

    def back(g):
        # subgradient 0 at the kink
        return (g * (xd > 0.0),)

    return _record(out, (x,), back)


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    slope = float(slope)
    xd = x.data
    out = Tensor(np.where(xd > 0.0, xd, slope * xd))

    def back(g):
        return (g * np.where(xd > 0.0, 1.0, slope),)

    return _record(out, (x,), back)


def prelu(x, alpha: Tensor) -> Tensor:
    """PReLU with one learned slope per channel (axis 0, or axis 1 if batched)."""
    x = _as_tensor(x)
    alpha = _as_tensor(alpha)
    if alpha.ndim != 1:
        raise ContractError(f"prelu: alpha must be 1-D per-channel, got {alpha.shape}")
    ch_axis = x.ndim - 3 if x.ndim >= 3 else 0
    if x.shape[ch_axis] != alpha.shape[0]:
        raise ContractError(
            f"prelu: channel extent {x.shape[ch_axis]} != alpha extent {alpha.shape[0]}"
        )
    a_shape = [1] * x.ndim
    a_shape[ch_axis] = alpha.shape[0]
    ab = alpha.data.reshape(a_shape)
    xd = x.data
    neg = xd <= 0.0
    out = Tensor(np.where(neg, ab * xd, xd))
    reduce_axes = tuple(i for i in range(x.ndim) if i != ch_axis)

    def back(g):
        dx = g * np.where(neg, ab, 1.0)
        da = (g * np.where(neg, xd, 0.0)).sum(axis=reduce_axes)
        return dx, da

    return _record(out, (x, alpha), back)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s)

    def back(g):
        return (g * s * (1.0 - s),)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# global pooling statistics (CBAM building blocks)
# ---------------------------------------------------------------------------


def _spatial_axes(x: Tensor) -> tuple[int, ...]:
    if x.ndim not in (3, 4):
        raise ContractError(f"pool stats: expected (C,H,W) or (B,C,H,W), got {x.shape}")
    return (x.ndim - 2, x.ndim - 1)


def pool_channel_stats(x) -> tuple[Tensor, Tensor]:
    """Global average and maximum over the spatial axes, one value per channel."""
    x = _as_tensor(x)
    hw = _spatial_axes(x)
    xd = x.data
    avg = Tensor(xd.mean(axis=hw))
    count = xd.shape[hw[0]] * xd.shape[hw[1]]

    def back_avg(g):
        return (np.broadcast_to(np.expand_dims(g, hw) / count, xd.shape).copy(),)

    _record(avg, (x,), back_avg)

    flat = xd.reshape(xd.shape[: hw[0]] + (-1,))
    arg = flat.argmax(axis=-1)  # first maximum in row-major order on ties
    mx = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def back_max(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        return (dflat.reshape(xd.shape),)

    _record(mx, (x,), back_max)
    return avg, mx


def pool_spatial_stats(x) -> tuple[Tensor, Tensor]:
    """Average and maximum over the channel axis, keeping a 1-channel map."""
    x = _as_tensor(x)
    _spatial_axes(x)
    ch = x.ndim - 3
    xd = x.data
    avg = Tensor(xd.mean(axis=ch, keepdims=True))
    count = xd.shape[ch]

    def back_avg(g):
        return (np.broadcast_to(g / count, xd.shape).copy(),)

    _record(avg, (x,), back_avg)

    arg = xd.argmax(axis=ch)  # first maximal channel on ties
    mx = Tensor(np.take_along_axis(xd, np.expand_dims(arg, ch), axis=ch))

    def back_max(g):
        dx = np.zeros_like(xd)
        np.put_along_axis(dx, np.expand_dims(arg, ch), g, axis=ch)
        return (dx,)

    _record(mx, (x,), back_max)
    return avg, mx


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _with_batch(x: Tensor, rank: int, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x.data[None], False
    if x.ndim == rank + 1:
        return x.data, True
    raise ContractError(f"{op}: expected rank {rank} or {rank + 1}, got shape {x.shape}")


def _out_extent(n: int, k: int, stride: int, pad: int, op: str, name: str) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ContractError(f"{op}: kernel {k} exceeds padded {name} extent {n + 2 * pad}")
    if span % stride:
        raise ContractError(
            f"{op}: {name} extent {n} with pad {pad}, kernel {k} not divisible by stride {stride}"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, ksizes: tuple, strides: tuple, outs: tuple) -> np.ndarray:
    """(B, C, *spatial_padded) -> (C * prod(k), B * prod(out)); one copy."""
    nsp = len(ksizes)
    v = sliding_window_view(xp, ksizes, axis=tuple(range(2, 2 + nsp)))
    sel = (slice(None), slice(None)) + tuple(
        slice(0, s * (o - 1) + 1, s) for s, o in zip(strides, outs)
    )
    v = v[sel]  # (B, C, *out, *k)
    b, c = xp.shape[0], xp.shape[1]
    order = (1,) + tuple(range(2 + nsp, 2 + 2 * nsp)) + (0,) + tuple(range(2, 2 + nsp))
    ksize = int(np.prod(ksizes))
    psize = int(np.prod(outs))
    return v.transpose(order).reshape(c * ksize, b * psize)


def _col2im(dcols: np.ndarray, xp_shape: tuple, ksizes: tuple, strides: tuple,
            outs: tuple) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add column gradients back."""
    b, c = xp_shape[0], xp_shape[1]
    nsp = len(ksizes)
    dc = dcols.reshape((c,) + ksizes + (b,) + outs)
    dc = np.moveaxis(dc, 1 + nsp, 0)  # (B, C, *k, *out)
    dxp = np.zeros(xp_shape)
    for idx in np.ndindex(*ksizes):
        sel = (slice(None), slice(None)) + tuple(
            slice(i, i + s * (o - 1) + 1, s) for i, s, o in zip(idx, strides, outs)
        )
        dxp[sel] += dc[(slice(None), slice(None)) + idx]
    return dxp


def _pad(xb: np.ndarray, pads: tuple) -> np.ndarray:
    if not any(pads):
        return xb
    width = ((0, 0), (0, 0)) + tuple((p, p) for p in pads)
    return np.pad(xb, width)


def _conv_input_grad_stride1(gb: np.ndarray, k: np.ndarray, pads: tuple,
                             in_shape: tuple) -> np.ndarray:
    """dX for a stride-1 conv: full correlation of g with the flipped kernel."""
    nsp = k.ndim - 2
    ksizes = k.shape[2:]
    gpads = tuple(ksz - 1 - p for ksz, p in zip(ksizes, pads))
    gp = _pad(gb, gpads)
    ins = in_shape[2:]
    cols = _im2col(gp, ksizes, (1,) * nsp, ins)
    flip = np.flip(k, axis=tuple(range(2, 2 + nsp)))
    wf = np.ascontiguousarray(flip.transpose((1, 0) + tuple(range(2, 2 + nsp))))
    ci = k.shape[1]
    dx = (wf.reshape(ci, -1) @ cols).reshape((ci,) + (in_shape[0],) + ins)
    return np.ascontiguousarray(np.moveaxis(dx, 1, 0))


def _conv_depth_blocked(xb: np.ndarray, k: np.ndarray, bias: np.ndarray,
                        padding: int, outs: tuple, track: bool):
    """Stride-1, batch-1 conv3d: depth treated as batch for a 2-D im2col.

    The im2col then expands by kh*kw instead of kd*kh*kw, and each depth tap
    becomes one GEMM on a contiguous column block.
    """
    co, ci, kd, kh, kw = k.shape
    do, ho, wo = outs
    p2 = ho * wo
    xp = _pad(xb, (padding,) * 3)
    xt = np.ascontiguousarray(xp[0].transpose(1, 0, 2, 3))  # (Dp, C, Hp, Wp)
    cols = _im2col(xt, (kh, kw), (1, 1), (ho, wo))  # (C*kh*kw, Dp*Ho*Wo)
    acc = np.zeros((co, do * p2))
    for dz in range(kd):
        acc += k[:, :, dz].reshape(co, -1) @ cols[:, dz * p2:(dz + do) * p2]
    out_d = acc.reshape(co, do, ho, wo) + bias.reshape(co, 1, 1, 1)
    return out_d[None], (cols if track else None)


def _conv_depth_blocked_grads(gb, xb, k, padding, outs, cols, need_dx, need_dk):
    co, ci, kd, kh, kw = k.shape
    do, ho, wo = outs
    p2 = ho * wo
    gf = gb[0].reshape(co, -1)
    dk = None
    if need_dk:
        if cols is None:
            xp = _pad(xb, (padding,) * 3)
            xt = np.ascontiguousarray(xp[0].transpose(1, 0, 2, 3))
            cols = _im2col(xt, (kh, kw), (1, 1), (ho, wo))
        dk = np.empty_like(k)
        for dz in range(kd):
            dk[:, :, dz] = (gf @ cols[:, dz * p2:(dz + do) * p2].T).reshape(co, ci, kh, kw)
    dx = None
    if need_dx:
        di, hi, wi = xb.shape[2:]
        pi = hi * wi
        gp = _pad(gb, (kd - 1 - padding, kh - 1 - padding, kw - 1 - padding))
        gt = np.ascontiguousarray(gp[0].transpose(1, 0, 2, 3))  # (Dgp, Co, ...)
        gcols = _im2col(gt, (kh, kw), (1, 1), (hi, wi))  # (Co*kh*kw, Dgp*Hi*Wi)
        wf = np.flip(k, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4)  # (C, Co, kd, kh, kw)
        dxf = np.zeros((ci, di * pi))
        for dz in range(kd):
            dxf += np.ascontiguousarray(wf[:, :, dz]).reshape(ci, -1) @ \
                gcols[:, dz * pi:(dz + di) * pi]
        dx = dxf.reshape(1, ci, di, hi, wi)
    return dx, dk


def _conv_nd(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, padding: int,
             nsp: int, op: str) -> Tensor:
    xb, batched = _with_batch(x, nsp + 1, op)
    k = kernel.data
    if kernel.ndim != nsp + 2:
        raise ContractError(f"{op}: kernel must have rank {nsp + 2}, got {kernel.shape}")
    if k.shape[1] != xb.shape[1]:
        raise ContractError(
            f"{op}: input channels {xb.shape[1]} != kernel input channels {k.shape[1]}"
        )
    ksizes = k.shape[2:]
    for name, ksz in zip("dhw"[-nsp:], ksizes):
        if ksz % 2 == 0:
            raise ContractError(f"{op}: kernel extent {ksz} on axis {name} must be odd")
    if stride < 1:
        raise ContractError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"{op}: padding must be >= 0, got {padding}")
    if bias.shape != (k.shape[0],):
        raise ContractError(
            f"{op}: bias shape {bias.shape} != (output channels,) = ({k.shape[0]},)"
        )
    names = ("depth", "height", "width")[-nsp:]
    outs = tuple(
        _out_extent(n, ksz, stride, padding, op, nm)
        for n, ksz, nm in zip(xb.shape[2:], ksizes, names)
    )
    strides = (stride,) * nsp
    pads = (padding,) * nsp
    co = k.shape[0]
    bsz = xb.shape[0]
    track = _state.grad_enabled and (
        x.requires_grad or kernel.requires_grad or bias.requires_grad
    )

    blocked = nsp == 3 and stride == 1 and bsz == 1
    if blocked:
        out_d, cols = _conv_depth_blocked(xb, k, bias.data, padding, outs, track)
    else:
        xp = _pad(xb, pads)
        cols_now = _im2col(xp, ksizes, strides, outs)
        out_d = (k.reshape(co, -1) @ cols_now).reshape((co, bsz) + outs)
        out_d = np.ascontiguousarray(np.moveaxis(out_d, 1, 0))
        out_d += bias.data.reshape((1, co) + (1,) * nsp)
        cols = cols_now if track else None
    out = Tensor(out_d if batched else out_d[0])
    if not track:
        return out

    def back(g):
        gb = g if batched else g[None]
        need_dx = x.requires_grad
        need_dk = kernel.requires_grad
        if blocked:
            dx, dk = _conv_depth_blocked_grads(gb, xb, k, padding, outs, cols,
                                               need_dx, need_dk)
            db = gb[0].sum(axis=(1, 2, 3)) if bias.requires_grad else None
        else:
            gf = np.ascontiguousarray(np.moveaxis(gb, 0, 1)).reshape(co, -1)
            db = gf.sum(axis=1) if bias.requires_grad else None
            dk = None
            if need_dk:
                cols_b = cols if cols is not None else _im2col(
                    _pad(xb, pads), ksizes, strides, outs
                )
                dk = (gf @ cols_b.T).reshape(k.shape)
            dx = None
            if need_dx:
                if stride == 1:
                    dx = _conv_input_grad_stride1(gb, k, pads, xb.shape)
                else:
                    dcols = k.reshape(co, -1).T @ gf
                    dxp = _col2im(dcols, _pad(xb, pads).shape, ksizes, strides, outs)
                    if padding:
                        core = (slice(None), slice(None)) + tuple(
                            slice(padding, padding + n) for n in xb.shape[2:]
                        )
                        dxp = dxp[core]
                    dx = dxp
        if dx is not None and op in _fault_targets:
            dx = dx + 1e-3  # deliberate corruption; self-test negative control
        if dx is not None and not batched:
            dx = dx[0]
        return dx, dk, db

    return _record(out, (x, kernel, bias), back)


def conv2d(x, kernel, bias, stride: int = 1, zero_padding: int = 0) -> Tensor:
    """Cross-correlation of (C,H,W) input with (Co,C,kh,kw) kernel plus bias."""
    return _conv_nd(_as_tensor(x), _as_tensor(kernel), _as_tensor(bias),
                    stride, zero_padding, 2, "conv2d")


def conv3d(x, kernel, bias, stride: int = 1, zero_padding: int = 0) -> Tensor:
    """Cross-correlation of (C,D,H,W) input with (Co,C,kd,kh,kw) kernel plus bias."""
    return _conv_nd(_as_tensor(x), _as_tensor(kernel), _as_tensor(bias),
                    stride, zero_padding, 3, "conv3d")


def conv_transpose3d(x, kernel, stride_per_axis, padding_per_axis,
                     target_shape) -> Tensor:
    """Adjoint of conv3d: (Ci,D,H,W) input, (Ci,Co,kd,kh,kw) kernel.

    Axis arithmetic: out = (in - 1) * stride - 2 * pad + kernel, which
    ``target_shape`` must match exactly.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    xb, batched = _with_batch(x, 4, "conv_transpose3d")
    k = kernel.data
    if kernel.ndim != 5:
        raise ContractError(
            f"conv_transpose3d: kernel must have rank 5, got {kernel.shape}"
        )
    if k.shape[0] != xb.shape[1]:
        raise ContractError(
            f"conv_transpose3d: input channels {xb.shape[1]} != kernel channels {k.shape[0]}"
        )
    strides = tuple(int(s) for s in stride_per_axis)
    pads = tuple(int(p) for p in padding_per_axis)
    target = tuple(int(t) for t in target_shape)
    if len(strides) != 3 or len(pads) != 3 or len(target) != 3:
        raise ContractError("conv_transpose3d: stride, padding, target must be 3-tuples")
    if any(s < 1 for s in strides) or any(p < 0 for p in pads):
        raise ContractError(
            f"conv_transpose3d: invalid stride {strides} or padding {pads}"
        )
    ksizes = k.shape[2:]
    ins = xb.shape[2:]
    for axis, (n, s, p, ksz, t) in enumerate(zip(ins, strides, pads, ksizes, target)):
        expect = (n - 1) * s - 2 * p + ksz
        if expect != t:
            raise ContractError(
                f"conv_transpose3d: target extent {t} on axis {axis} != "
                f"({n} - 1) * {s} - 2 * {p} + {ksz} = {expect}"
            )
    ci, co = k.shape[0], k.shape[1]
    bsz = xb.shape[0]
    fulls = tuple((n - 1) * s + ksz for n, s, ksz in zip(ins, strides, ksizes))
    psize = int(np.prod(ins))

    x_flat = np.ascontiguousarray(np.moveaxis(xb, 0, 1)).reshape(ci, -1)
    # scatter each kernel offset's contribution into the uncropped output
    full = np.zeros((co, bsz) + fulls)
    kview = k.reshape(ci, co, -1)
    contrib = np.tensordot(kview, x_flat, axes=([0], [0]))  # (co, k, B*P)
    contrib = contrib.reshape((co,) + ksizes + (bsz,) + ins)
    contrib = np.moveaxis(contrib, 4, 1)  # (co, B, kd, kh, kw, D, H, W)
    for idx in np.ndindex(*ksizes):
        sel = (slice(None), slice(None)) + tuple(
            slice(i, i + s * (n - 1) + 1, s) for i, s, n in zip(idx, strides, ins)
        )
        full[sel] += contrib[(slice(None), slice(None)) + idx]
    crop = (slice(None), slice(None)) + tuple(
        slice(p, p + t) for p, t in zip(pads, target)
    )
    out_d = np.ascontiguousarray(np.moveaxis(full, 1, 0)[crop])
    out = Tensor(out_d if batched else out_d[0])

    def back(g):
        gb = g if batched else g[None]
        gfull = np.zeros((bsz, co) + fulls)
        gfull[(slice(None), slice(None)) + tuple(
            slice(p, p + t) for p, t in zip(pads, target)
        )] = gb
        gcols = _im2col(gfull, ksizes, strides, ins)  # (co * k, B * P)
        dx_flat = k.reshape(ci, -1) @ gcols  # gather with the same kernel
        dx = np.moveaxis(dx_flat.reshape((ci, bsz) + ins), 1, 0)
        dk = (x_flat @ gcols.T).reshape(k.shape)
        dx = np.ascontiguousarray(dx)
        return (dx if batched else dx[0]), dk

    return _record(out, (x, kernel), back)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor. The relative error per element
    is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ContractError(f"grad_check: eps must be positive, got {eps}")
    base = x.data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    with ComputationTape() as tape:
        y = f(probe)
        if y.data.size != 1:
            raise ContractError(
                f"grad_check: f must be scalar-valued, got shape {y.data.shape}"
            )
        tape.backward(y)
    if probe.grad is None:
        analytic = np.zeros(base.size)
    else:
        analytic = probe.grad.reshape(-1).copy()

    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(base.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(base)).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(base)).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))

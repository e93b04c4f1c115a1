"""Dense float64 tensor kernels used by every other module.

All values are C-ordered ``numpy.float64`` arrays; shapes are explicit and the
flat row-major layout is part of the public contract (Jacobian layouts and
checkpoint blobs depend on it).  Kernels return fresh arrays and never mutate
their inputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "as_tensor",
    "check_finite",
    "matmul",
    "conv2d",
    "conv2d_batched",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "im2col",
    "col2im",
    "conv_out_hw",
    "softmax_rows",
    "softmax_lastaxis",
    "relu",
    "add",
    "mul",
    "scale",
    "sum_over_axes",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested kernel."""


def as_tensor(x, shape=None) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float64 array, optionally reshaped."""
    a = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if shape is not None:
        expected = int(np.prod(shape)) if len(shape) else 1
        if a.size != expected:
            raise ShapeError(f"cannot view {a.size} values as shape {tuple(shape)}")
        a = a.reshape(shape)
    return a


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product ``[m,k] @ [k,n] -> [m,n]``."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    return a @ b


def conv_out_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(
            f"kernel {k}x{k} does not fit input {h}x{w} with pad {pad}"
        )
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``[B,C,H,W]`` into patch rows ``[B, H'*W', C*k*k]``."""
    bsz, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, k, stride, pad)
    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    col = np.empty((bsz, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        i_max = i + stride * oh
        for j in range(k):
            j_max = j + stride * ow
            col[:, :, i, j, :, :] = img[:, :, i:i_max:stride, j:j_max:stride]
    return np.ascontiguousarray(
        col.transpose(0, 4, 5, 1, 2, 3).reshape(bsz, oh * ow, c * k * k)
    )


def col2im(col: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter patch rows back onto ``[B,C,H,W]``."""
    bsz, c, h, w = x_shape
    oh, ow = conv_out_hw(h, w, k, stride, pad)
    col = col.reshape(bsz, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((bsz, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        i_max = i + stride * oh
        for j in range(k):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, :, i, j, :, :]
    return np.ascontiguousarray(img[:, :, pad : pad + h, pad : pad + w])


def conv2d_batched(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Cross-correlation of ``[B,Ci,H,W]`` with ``[Co,Ci,k,k]`` plus bias."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] and [Co,Ci,k,k], got {x.shape}, {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    bsz, _, h, ww = x.shape
    co, _, k, _ = w.shape
    oh, ow = conv_out_hw(h, ww, k, stride, pad)
    cols = im2col(x, k, stride, pad)
    y = cols @ w.reshape(co, -1).T  # [B, P, Co]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (co,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({co},)")
        y = y + b
    return np.ascontiguousarray(y.transpose(0, 2, 1).reshape(bsz, co, oh, ow))


def conv2d(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Single-sample convolution: ``[Ci,H,W] -> [Co,H',W']``."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects a [C,H,W] input, got {x.shape}")
    return conv2d_batched(x[None], w, b, stride, pad)[0]


def conv2d_input_grad(
    g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int
) -> np.ndarray:
    """Cotangent of the conv input given output cotangent ``g`` ``[B,Co,H',W']``."""
    bsz, co = g.shape[0], g.shape[1]
    k = w.shape[2]
    gm = g.reshape(bsz, co, -1).transpose(0, 2, 1)  # [B, P, Co]
    cols_grad = gm @ w.reshape(co, -1)  # [B, P, Ci*k*k]
    return col2im(cols_grad, x_shape, k, stride, pad)


def conv2d_weight_grad(g: np.ndarray, cols: np.ndarray, w_shape) -> np.ndarray:
    """Weight cotangent from output cotangent ``g`` and unfolded input ``cols``."""
    bsz, co = g.shape[0], g.shape[1]
    gm = g.reshape(bsz, co, -1)  # [B, Co, P]
    gw = np.einsum("bop,bpk->ok", gm, cols)
    return gw.reshape(w_shape)


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a rank-2 tensor with max-shift stabilisation."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 tensor, got {x.shape}")
    return softmax_lastaxis(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return a + b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    return a * b


def scale(x: np.ndarray, c: float) -> np.ndarray:
    return as_tensor(x) * float(c)


def sum_over_axes(x: np.ndarray, axes=None) -> np.ndarray:
    x = as_tensor(x)
    if axes is None:
        return np.asarray(x.sum(), dtype=np.float64)
    axes = tuple(int(a) for a in (axes if isinstance(axes, (tuple, list)) else (axes,)))
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ShapeError(f"sum axis {a} out of range for shape {x.shape}")
    return np.asarray(x.sum(axis=axes), dtype=np.float64)

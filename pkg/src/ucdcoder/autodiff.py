"""Dense float64 tensors with taped reverse-mode differentiation.

The engine provides exactly the primitives the grid classifier needs.
Operations record backward rules onto the innermost active :class:`Tape`;
with no active tape they are plain numpy evaluations (the eval-mode path).

Conventions:
  * all data is float64; 32-bit floats appear only in checkpoint storage
  * convolution is cross-correlation (no kernel flip), channels last
  * "same" padding is symmetric with the extra cell on the trailing side
  * spatial tensors are (H, W, C) or batched (B, H, W, C)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised for invalid backward requests (non-scalar root, spent tape)."""


class Tensor:
    """A shaped float64 array, optionally carrying a gradient buffer.

    Leaf tensors created with ``requires_grad=True`` get an eagerly
    allocated zero gradient, so untouched parameters read as zero gradient
    after a backward pass. Intermediate results allocate lazily.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, needs_grad: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs_grad
    out.name = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


_TAPES: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of operations for one forward pass.

    Creation order is a topological order (inputs exist before their
    consumers), so the backward pass visits nodes exactly once in reverse.
    A tape may be walked once; calling ``backward`` again raises unless
    ``accumulate=True``, which resets intermediate gradients and adds the
    same contribution onto leaf gradients a second time (exact doubling).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        if popped is not self:
            raise GradientError("tape stack corrupted")

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: Tensor, accumulate: bool = False) -> None:
        if root.size != 1:
            raise GradientError(f"backward root must be scalar, has shape {root.shape}")
        if self._spent:
            if not accumulate:
                raise GradientError(
                    "tape already walked; pass accumulate=True to add gradients again"
                )
            for out, _ in self._nodes:
                out.grad = None
        _accumulate(root, np.ones_like(root.data))
        for out, backward in reversed(self._nodes):
            if out.grad is not None:
                backward(out.grad)
        self._spent = True


def _binary_needs(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise sum."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    out = _result(data, _binary_needs(a, b))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.shape))
        tape.record(out, backward)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (not differentiable in the factor)."""
    out = _result(x.data * factor, x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * factor)
        tape.record(out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        mask = x.data > 0
        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * mask)
        tape.record(out, backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (m, k) and b (k, n)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _result(a.data @ b.data, _binary_needs(a, b))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        tape.record(out, backward)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    out = _result(x.data.T.copy(), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            _accumulate(x, g.T)
        tape.record(out, backward)
    return out


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows start..stop-1 of a matrix; the gradient scatters back into place."""
    if x.ndim != 2:
        raise ShapeError(f"row_slice expects a matrix, got shape {x.shape}")
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"row range [{start}, {stop}) invalid for {x.shape[0]} rows")
    out = _result(x.data[start:stop].copy(), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            full = np.zeros_like(x.data)
            full[start:stop] = g
            _accumulate(x, full)
        tape.record(out, backward)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    out = _result(data.copy(), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        old = x.shape
        def backward(g: np.ndarray) -> None:
            _accumulate(x, g.reshape(old))
        tape.record(out, backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _result(data, _binary_needs(*tensors))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def backward(g: np.ndarray) -> None:
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(lo, hi)
                    _accumulate(t, g[tuple(index)])
        tape.record(out, backward)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    out = _result(np.array(x.data.sum()), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            _accumulate(x, np.full_like(x.data, float(g)))
        tape.record(out, backward)
    return out


def embed_gather(table: Tensor, indices) -> Tensor:
    """Rows of ``table`` selected by an integer index array.

    Output shape is indices.shape + (row width,). Gradients of repeated
    indices accumulate into the shared row.
    """
    if table.ndim != 2:
        raise ShapeError(f"embed_gather table must be a matrix, got {table.shape}")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embed_gather indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"index out of range [0, {table.shape[0] - 1}]: "
            f"min {idx.min()}, max {idx.max()}"
        )
    out = _result(table.data[idx], table.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx.ravel(), g.reshape(-1, table.shape[1]))
            _accumulate(table, acc)
        tape.record(out, backward)
    return out


def _as_batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (H, W, C) or (B, H, W, C), got shape {x.shape}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _conv_geometry(size: int, kernel: int, stride: int, dilation: int, padding: str):
    """Return (output size, pad before, pad after) along one axis."""
    effective = dilation * (kernel - 1) + 1
    if padding == "valid":
        out = (size - effective) // stride + 1
        if out < 1:
            raise ShapeError(
                f"kernel extent {effective} exceeds input extent {size} (valid padding)"
            )
        return out, 0, 0
    if padding == "same":
        out = -(-size // stride)  # ceil
        total = max(0, (out - 1) * stride + effective - size)
        return out, total // 2, total - total // 2
    raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(
    x: Tensor,
    kernels: Tensor,
    stride=(1, 1),
    dilation=(1, 1),
    padding: str = "valid",
) -> Tensor:
    """2-D cross-correlation of (B, H, W, Cin) with kernels (kh, kw, Cin, Cout).

    Implemented as kh*kw shifted matrix products so both passes stay in BLAS.
    """
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be (kh, kw, Cin, Cout), got {kernels.shape}")
    xb, squeeze = _as_batched(x)
    kh, kw, cin, cout = kernels.shape
    if xb.shape[3] != cin:
        raise ShapeError(
            f"input channels {xb.shape[3]} do not match kernel channels {cin} "
            f"(input {x.shape}, kernels {kernels.shape})"
        )
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    b, h, w, _ = xb.shape
    oh, ph0, ph1 = _conv_geometry(h, kh, sh, dh, padding)
    ow, pw0, pw1 = _conv_geometry(w, kw, sw, dw, padding)
    xp = np.pad(xb, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))

    kflat = kernels.data.reshape(kh * kw, cin, cout)
    acc = np.zeros((b * oh * ow, cout))
    for i in range(kh):
        for j in range(kw):
            slab = xp[:, i * dh : i * dh + sh * (oh - 1) + 1 : sh,
                      j * dw : j * dw + sw * (ow - 1) + 1 : sw, :]
            acc += np.ascontiguousarray(slab).reshape(-1, cin) @ kflat[i * kw + j]
    data = acc.reshape(b, oh, ow, cout)
    out = _result(data[0] if squeeze else data, _binary_needs(x, kernels))

    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            gb = g[None] if squeeze else g
            gflat = gb.reshape(-1, cout)
            dxp = np.zeros_like(xp) if x.requires_grad else None
            dk = np.zeros_like(kernels.data) if kernels.requires_grad else None
            for i in range(kh):
                for j in range(kw):
                    hs = slice(i * dh, i * dh + sh * (oh - 1) + 1, sh)
                    ws = slice(j * dw, j * dw + sw * (ow - 1) + 1, sw)
                    if dk is not None:
                        slab = np.ascontiguousarray(xp[:, hs, ws, :]).reshape(-1, cin)
                        dk[i, j] = slab.T @ gflat
                    if dxp is not None:
                        dxp[:, hs, ws, :] += (gflat @ kflat[i * kw + j].T).reshape(
                            b, oh, ow, cin
                        )
            if dk is not None:
                _accumulate(kernels, dk)
            if dxp is not None:
                dx = dxp[:, ph0 : ph0 + h, pw0 : pw0 + w, :]
                _accumulate(x, dx[0] if squeeze else dx)
        tape.record(out, backward)
    return out


def maxpool2d(x: Tensor, window, stride, padding: str = "valid") -> Tensor:
    """Max pooling with valid padding; gradient routes to the argmax cell.

    Ties are broken toward the earliest window offset in row-major order.
    """
    if padding != "valid":
        raise ShapeError("maxpool2d supports valid padding only")
    xb, squeeze = _as_batched(x)
    ph, pw = _pair(window)
    sh, sw = _pair(stride)
    b, h, w, c = xb.shape
    oh, _, _ = _conv_geometry(h, ph, sh, 1, "valid")
    ow, _, _ = _conv_geometry(w, pw, sw, 1, "valid")

    best = None
    winner = None
    for i in range(ph):
        for j in range(pw):
            cand = xb[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :]
            if best is None:
                best = cand.copy()
                winner = np.zeros(best.shape, dtype=np.int32)
            else:
                better = cand > best
                best[better] = cand[better]
                winner[better] = i * pw + j
    out = _result(best[0] if squeeze else best, x.requires_grad)

    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            gb = g[None] if squeeze else g
            dx = np.zeros_like(xb)
            for i in range(ph):
                for j in range(pw):
                    mask = winner == i * pw + j
                    dx[:, i : i + sh * (oh - 1) + 1 : sh,
                       j : j + sw * (ow - 1) + 1 : sw, :] += gb * mask
            _accumulate(x, dx[0] if squeeze else dx)
        tape.record(out, backward)
    return out


def avgpool2d(x: Tensor, window, stride=(1, 1), padding: str = "same") -> Tensor:
    """Average pooling; padded cells count as zeros in the average."""
    xb, squeeze = _as_batched(x)
    ph, pw = _pair(window)
    sh, sw = _pair(stride)
    b, h, w, c = xb.shape
    oh, ph0, ph1 = _conv_geometry(h, ph, sh, 1, padding)
    ow, pw0, pw1 = _conv_geometry(w, pw, sw, 1, padding)
    xp = np.pad(xb, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    scale = 1.0 / (ph * pw)
    acc = np.zeros((b, oh, ow, c))
    for i in range(ph):
        for j in range(pw):
            acc += xp[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :]
    acc *= scale
    out = _result(acc[0] if squeeze else acc, x.requires_grad)

    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            gb = (g[None] if squeeze else g) * scale
            dxp = np.zeros_like(xp)
            for i in range(ph):
                for j in range(pw):
                    dxp[:, i : i + sh * (oh - 1) + 1 : sh,
                        j : j + sw * (ow - 1) + 1 : sw, :] += gb
            dx = dxp[:, ph0 : ph0 + h, pw0 : pw0 + w, :]
            _accumulate(x, dx[0] if squeeze else dx)
        tape.record(out, backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each position over the trailing channel axis, then affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"gain/bias must have shape ({c},), got {gain.shape} and {bias.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = _result(xhat * gain.data + bias.data, _binary_needs(x, gain, bias))

    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).reshape(-1, c).sum(axis=0))
            if bias.requires_grad:
                _accumulate(bias, g.reshape(-1, c).sum(axis=0))
            if x.requires_grad:
                gx = g * gain.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, inv_std * (gx - m1 - xhat * m2))
        tape.record(out, backward)
    return out


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Zero each element with probability ``rate`` in train mode, scaling
    survivors by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = _result(x.data * keep * scale, x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * keep * scale)
        tape.record(out, backward)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise log-softmax of a (B, V) array."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent_smoothed(
    logits: Tensor, labels, epsilon: float
) -> tuple[Tensor, np.ndarray]:
    """Label-smoothed cross entropy, averaged over the batch.

    Labels are vocabulary indices in [1, V] mapping to logit columns 0..V-1;
    the PAD index 0 is rejected. The smoothed target mixes (1 - epsilon) of
    the one-hot label with an epsilon/V uniform component. Returns the
    scalar loss tensor and the detached softmax probabilities.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, V), got shape {logits.shape}")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {epsilon}")
    labels = np.asarray(labels)
    b, v = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min() < 1:
        raise ValueError("labels must be vocabulary indices >= 1; PAD (0) is not a label")
    if labels.max() > v:
        raise ValueError(f"label {labels.max()} exceeds vocabulary size {v}")

    logp = log_softmax(logits.data)
    probs = np.exp(logp)
    target = np.full((b, v), epsilon / v)
    target[np.arange(b), labels - 1] += 1.0 - epsilon
    loss = _result(np.array(-(target * logp).sum() / b), logits.requires_grad)

    tape = _active_tape()
    if tape is not None and loss.requires_grad:
        def backward(g: np.ndarray) -> None:
            _accumulate(logits, (probs - target) * (float(g) / b))
        tape.record(loss, backward)
    return loss, probs


@dataclass
class CoordinateResult:
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    status: str  # "ok" | "fail" | "excluded-nondifferentiable"


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    checked: int
    max_rel_error: float
    failures: list[CoordinateResult] = field(default_factory=list)
    excluded: list[CoordinateResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        state = "pass" if self.passed else f"FAIL ({len(self.failures)} coordinates)"
        return (
            f"{self.name}: {state}, {self.checked} coords checked, "
            f"max rel err {self.max_rel_error:.3e}, {len(self.excluded)} excluded"
        )


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    tolerance: float = 1e-4,
    name: str = "grad_check",
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the taped gradient of scalar-valued ``f`` with central
    finite differences, coordinate by coordinate.

    The step is h = 1e-5 * max(1, |x_i|); the relative error is
    |a - n| / max(1e-8, |a| + |n|). Coordinates where the one-sided slopes
    disagree are flagged as non-differentiable points and excluded rather
    than failed. ``f`` must be deterministic across calls. ``x.grad`` is
    reset to zeros afterwards; other parameters touched by ``f`` keep any
    gradients they accumulated.
    """
    if not x.requires_grad:
        raise GradientError("grad_check target must require gradients")
    with Tape() as tape:
        loss = f(x)
    tape.backward(loss)
    analytic = x.grad.copy()
    f0 = float(loss.data)

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
        coords.sort()
    else:
        coords = np.arange(n)

    report = GradCheckReport(name=name, tolerance=tolerance, checked=0, max_rel_error=0.0)
    for k in coords:
        original = flat[k]
        h = 1e-5 * max(1.0, abs(original))
        flat[k] = original + h
        fp = float(f(x).data)
        flat[k] = original - h
        fm = float(f(x).data)
        flat[k] = original

        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic.reshape(-1)[k])
        idx = np.unravel_index(k, x.shape)
        d_plus = (fp - f0) / h
        d_minus = (f0 - fm) / h
        kink = abs(d_plus - d_minus) > 1e-2 * max(1.0, abs(d_plus), abs(d_minus))
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        result = CoordinateResult(idx, a, numeric, rel, "ok")
        if kink:
            result.status = "excluded-nondifferentiable"
            report.excluded.append(result)
            continue
        report.checked += 1
        report.max_rel_error = max(report.max_rel_error, rel)
        if rel > tolerance:
            result.status = "fail"
            report.failures.append(result)
    x.zero_grad()
    return report

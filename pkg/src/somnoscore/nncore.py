"""Minimal differentiable operators for 1D separable CNNs.

Every operator works on a single feature map ``(channels, length)`` or a
batch ``(batch, channels, length)``.  Passing a :class:`GradTape` records
what the backward pass needs; ``tape.backward(upstream)`` then walks the
recorded chain in reverse and returns a dict of gradients keyed by the
``name`` given to each parametrised operator (``"<name>.w"``, ``"<name>.b"``)
plus ``"input"`` for the gradient with respect to the chain's input.

Operators compute in the dtype of their input (use float64 for gradient
checks); parameter gradients are always returned as float64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numba import njit

from .errors import BadArg, ShapeError, TapeConsumed

BackwardFn = Callable[[np.ndarray, dict, bool], "np.ndarray | None"]


class GradTape:
    """Single-use record of a linear chain of operators."""

    def __init__(self) -> None:
        self._entries: list[BackwardFn] = []
        self._consumed = False

    def record(self, fn: BackwardFn) -> None:
        if self._consumed:
            raise TapeConsumed("tape already used for a backward pass")
        self._entries.append(fn)

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, upstream: np.ndarray, input_grad: bool = True) -> dict[str, np.ndarray]:
        """Back-propagate ``upstream`` through the recorded chain.

        With ``input_grad=False`` the first operator skips computing the
        gradient with respect to the chain input (saves a full pass over the
        raw signal during training).
        """
        if self._consumed:
            raise TapeConsumed("backward may only be called once per tape")
        self._consumed = True
        grads: dict[str, np.ndarray] = {}
        g = upstream
        for pos in range(len(self._entries) - 1, -1, -1):
            need_dx = input_grad or pos > 0
            g = self._entries[pos](g, grads, need_dx)
        if input_grad:
            grads["input"] = g
        return grads


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected (C, L) or (B, C, L), got shape {x.shape}")
    return x, False


def _unbatch(y: np.ndarray, squeezed: bool) -> np.ndarray:
    return y[0] if squeezed else y


def _accumulate(grads: dict, key: str, value: np.ndarray) -> None:
    value = np.asarray(value, dtype=np.float64)
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


# ---------------------------------------------------------------------------
# convolution


def depthwise_conv1d(x, w, tape: GradTape | None = None, name: str = "depthwise"):
    """Per-channel valid cross-correlation, no bias.

    ``out[c, i] = sum_j x[c, i + j] * w[c, j]``
    """
    xb, squeezed = _as_batch(x)
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"depthwise kernel must be (channels, K), got {w.shape}")
    C, K = w.shape
    if xb.shape[1] != C:
        raise ShapeError(f"{name}: input has {xb.shape[1]} channels, kernel has {C}")
    L = xb.shape[2]
    if K < 1 or L < K:
        raise ShapeError(f"{name}: length {L} shorter than kernel {K}")
    Lo = L - K + 1
    wc = w.astype(xb.dtype, copy=False)
    out = xb[:, :, 0:Lo] * wc[:, 0, None]
    for j in range(1, K):
        out += xb[:, :, j : j + Lo] * wc[:, j, None]

    if tape is not None:

        def backward(g, grads, need_dx):
            g = g.reshape(out.shape)
            dw = np.empty((C, K), dtype=np.float64)
            for j in range(K):
                dw[:, j] = np.einsum("bci,bci->c", g, xb[:, :, j : j + Lo])
            _accumulate(grads, f"{name}.w", dw)
            if not need_dx:
                return None
            dx = np.zeros_like(xb)
            for j in range(K):
                dx[:, :, j : j + Lo] += g * wc[:, j, None]
            return _unbatch(dx, squeezed)

        tape.record(backward)
    return _unbatch(out, squeezed)


def pointwise_conv1d(x, w, b, tape: GradTape | None = None, name: str = "pointwise"):
    """1 x Ch convolution mixing channels: ``out[f, i] = b[f] + sum_c w[f, c] x[c, i]``."""
    xb, squeezed = _as_batch(x)
    w = np.asarray(w)
    b = np.asarray(b)
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"{name}: weights {w.shape} and bias {b.shape} disagree")
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"{name}: input has {xb.shape[1]} channels, weights expect {w.shape[1]}")
    wc = w.astype(xb.dtype, copy=False)
    out = np.matmul(wc, xb)
    out += b.astype(xb.dtype, copy=False)[:, None]

    if tape is not None:

        def backward(g, grads, need_dx):
            g = g.reshape(out.shape)
            _accumulate(grads, f"{name}.w", np.tensordot(g, xb, axes=([0, 2], [0, 2])))
            _accumulate(grads, f"{name}.b", g.sum(axis=(0, 2), dtype=np.float64))
            if not need_dx:
                return None
            return _unbatch(np.matmul(wc.T, g), squeezed)

        tape.record(backward)
    return _unbatch(out, squeezed)


def conv1d(x, w, b=None):
    """Standard multi-channel valid cross-correlation, ``w`` shaped (F, C, K).

    Reference implementation used to check separable equivalence; no tape.
    """
    xb, squeezed = _as_batch(x)
    w = np.asarray(w)
    F, C, K = w.shape
    if xb.shape[1] != C:
        raise ShapeError(f"conv1d: input has {xb.shape[1]} channels, kernel has {C}")
    Lo = xb.shape[2] - K + 1
    if Lo < 1:
        raise ShapeError("conv1d: input shorter than kernel")
    out = np.zeros((xb.shape[0], F, Lo), dtype=np.float64)
    for j in range(K):
        out += np.einsum("fc,bcl->bfl", w[:, :, j], xb[:, :, j : j + Lo])
    if b is not None:
        out += np.asarray(b)[:, None]
    return _unbatch(out, squeezed)


# ---------------------------------------------------------------------------
# fused separable block (training fast path)

_FASTMATH = {"reassoc", "contract", "nsz"}


@njit(cache=True, fastmath=_FASTMATH)
def _block_forward(x, wd, wp, bias, M, d, out, arg):
    B, C, L = x.shape
    K = wd.shape[1]
    F = wp.shape[0]
    Lc = L - K + 1
    Lp = Lc // M
    acc = np.empty(Lc, dtype=np.float64)
    z = np.empty(Lc, dtype=np.float64)
    for b in range(B):
        for c in range(C):
            xc = x[b, c]
            acc[:] = 0.0
            for j in range(K):
                w = np.float64(wd[c, j])
                for t in range(Lc):
                    acc[t] += w * xc[t + j]
            dc = d[b, c]
            for t in range(Lc):
                dc[t] = acc[t]
        for f in range(F):
            z[:] = bias[f]
            for c in range(C):
                w = np.float64(wp[f, c])
                dc = d[b, c]
                for t in range(Lc):
                    z[t] += w * dc[t]
            for i in range(Lp):
                best = 0.0
                where = -1
                for m in range(M):
                    v = z[i * M + m]
                    if v > best:
                        best = v
                        where = i * M + m
                out[b, f, i] = best
                arg[b, f, i] = where


@njit(cache=True, fastmath=_FASTMATH)
def _block_backward(x, wd, wp, d, arg, gout, need_dx, gx, gwd, gwp, gb):
    B, C, L = x.shape
    K = wd.shape[1]
    F = wp.shape[0]
    Lc = L - K + 1
    Lp = arg.shape[2]
    gz = np.empty((F, Lc), dtype=np.float64)
    gd = np.empty(Lc, dtype=np.float64)
    for b in range(B):
        # gradient at the pointwise output: nonzero only where a positive max was taken
        gz[:, :] = 0.0
        for f in range(F):
            for i in range(Lp):
                t = arg[b, f, i]
                if t >= 0:
                    gz[f, t] = gout[b, f, i]
                    gb[f] += gout[b, f, i]
        for c in range(C):
            gd[:] = 0.0
            dc = d[b, c]
            xc = x[b, c]
            for f in range(F):
                w = np.float64(wp[f, c])
                gzf = gz[f]
                s = 0.0
                for t in range(Lc):
                    s += gzf[t] * dc[t]
                gwp[f, c] += s
                for t in range(Lc):
                    gd[t] += w * gzf[t]
            for j in range(K):
                s = 0.0
                for t in range(Lc):
                    s += gd[t] * xc[t + j]
                gwd[c, j] += s
            if need_dx:
                gxc = gx[b, c]
                for j in range(K):
                    w = np.float64(wd[c, j])
                    for t in range(Lc):
                        gxc[t + j] += gd[t] * w


def separable_block(x, wd, wp, bias, m: int, tape: GradTape | None = None, name: str = "block"):
    """depthwise -> pointwise -> ReLU -> max-pool in one compiled pass.

    Numerically this is ``maxpool1d(relu(pointwise_conv1d(depthwise_conv1d(x))))``
    with activations stored in the input dtype and sums carried in float64.
    Gradient keys: ``<name>.depthwise.w``, ``<name>.pointwise.w``, ``<name>.pointwise.b``.
    """
    if m <= 0:
        raise BadArg(f"pool size must be >= 1, got {m}")
    xb, squeezed = _as_batch(x)
    xb = np.ascontiguousarray(xb)
    wd = np.ascontiguousarray(wd)
    wp = np.ascontiguousarray(wp)
    bias = np.ascontiguousarray(bias)
    B, C, L = xb.shape
    if wd.ndim != 2 or wd.shape[0] != C or wp.ndim != 2 or wp.shape[1] != C:
        raise ShapeError(f"{name}: input channels {C}, depthwise {wd.shape}, pointwise {wp.shape}")
    if bias.shape != (wp.shape[0],):
        raise ShapeError(f"{name}: bias {bias.shape} does not match {wp.shape[0]} filters")
    K = wd.shape[1]
    F = wp.shape[0]
    Lc = L - K + 1
    if K < 1 or Lc < 1:
        raise ShapeError(f"{name}: length {L} shorter than kernel {K}")
    Lp = Lc // m
    d = np.empty((B, C, Lc), dtype=xb.dtype)
    out = np.empty((B, F, Lp), dtype=xb.dtype)
    arg = np.empty((B, F, Lp), dtype=np.int32)
    _block_forward(xb, wd, wp, bias, m, d, out, arg)

    if tape is not None:

        def backward(g, grads, need_dx):
            g = np.ascontiguousarray(g.reshape(out.shape), dtype=np.float64)
            gx = np.zeros(xb.shape, dtype=np.float64) if need_dx else np.zeros((1, 1, 1))
            gwd = np.zeros((C, K))
            gwp = np.zeros((F, C))
            gb = np.zeros(F)
            _block_backward(xb, wd, wp, d, arg, g, need_dx, gx, gwd, gwp, gb)
            _accumulate(grads, f"{name}.depthwise.w", gwd)
            _accumulate(grads, f"{name}.pointwise.w", gwp)
            _accumulate(grads, f"{name}.pointwise.b", gb)
            return _unbatch(gx, squeezed) if need_dx else None

        tape.record(backward)
    return _unbatch(out, squeezed)


# ---------------------------------------------------------------------------
# pooling, activations, reshaping


def maxpool1d(x, m: int, tape: GradTape | None = None):
    """Non-overlapping max-pool; trailing ``length % m`` samples are dropped.

    Ties route the gradient to the lowest index in the window.
    """
    if m <= 0:
        raise BadArg(f"pool size must be >= 1, got {m}")
    xb, squeezed = _as_batch(x)
    B, C, L = xb.shape
    Lo = L // m
    if m == 1:
        out = xb.copy()
    elif m == 2:
        a = xb[:, :, 0 : 2 * Lo : 2]
        c = xb[:, :, 1 : 2 * Lo : 2]
        second = c > a
        out = np.where(second, c, a)
    else:
        win = xb[:, :, : Lo * m].reshape(B, C, Lo, m)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    if tape is not None:

        def backward(g, grads, need_dx):
            if not need_dx:
                return None
            g = g.reshape(out.shape)
            dx = np.zeros_like(xb, dtype=g.dtype)
            if m == 1:
                dx[:] = g
            elif m == 2:
                dx[:, :, 0 : 2 * Lo : 2] = np.where(second, 0, g)
                dx[:, :, 1 : 2 * Lo : 2] = np.where(second, g, 0)
            else:
                dwin = np.zeros((B, C, Lo, m), dtype=g.dtype)
                np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
                dx[:, :, : Lo * m] = dwin.reshape(B, C, Lo * m)
            return _unbatch(dx, squeezed)

        tape.record(backward)
    return _unbatch(out, squeezed)


def relu(x, tape: GradTape | None = None):
    x = np.asarray(x)
    pos = x > 0
    out = np.where(pos, x, 0).astype(x.dtype, copy=False)
    if tape is not None:

        def backward(g, grads, need_dx):
            return np.where(pos, g, 0) if need_dx else None

        tape.record(backward)
    return out


def flatten(x, tape: GradTape | None = None):
    """``(B, C, L) -> (B, C*L)`` (row-major; feature ``c*L + i``)."""
    x = np.asarray(x)
    shape = x.shape
    out = x.reshape(shape[0], -1) if x.ndim == 3 else x.reshape(-1)
    if tape is not None:
        tape.record(lambda g, grads, need_dx: g.reshape(shape) if need_dx else None)
    return out


def dropout(x, p: float = 0.5, train: bool = False, rng: np.random.Generator | None = None,
            tape: GradTape | None = None):
    """Inverted dropout: kept entries are scaled by ``1/(1-p)`` at train time."""
    if not 0.0 <= p < 1.0:
        raise BadArg(f"dropout probability must be in [0, 1), got {p}")
    x = np.asarray(x)
    if not train or p == 0.0:
        if tape is not None:
            tape.record(lambda g, grads, need_dx: g if need_dx else None)
        return x
    if rng is None:
        raise BadArg("train-mode dropout needs an explicit rng")
    scale = 1.0 / (1.0 - p)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(scale)
    out = x * mask
    if tape is not None:
        tape.record(lambda g, grads, need_dx: g * mask if need_dx else None)
    return out


def dense(x, W, b, tape: GradTape | None = None, name: str = "dense"):
    """Affine layer on vectors: ``x`` is (N,) or (B, N), ``W`` is (out, N)."""
    x = np.asarray(x)
    W = np.asarray(W)
    b = np.asarray(b)
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"{name}: input {x.shape}, weights {W.shape}, bias {b.shape}")
    Wc = W.astype(x.dtype, copy=False)
    out = x @ Wc.T + b.astype(x.dtype, copy=False)
    if tape is not None:

        def backward(g, grads, need_dx):
            g2 = np.atleast_2d(g)
            x2 = np.atleast_2d(x)
            _accumulate(grads, f"{name}.w", g2.T.astype(np.float64) @ x2.astype(np.float64))
            _accumulate(grads, f"{name}.b", g2.sum(axis=0, dtype=np.float64))
            return g @ Wc if need_dx else None

        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# classifier head


def softmax(z) -> np.ndarray:
    """Numerically stable softmax over the last axis (computed in float64)."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise BadArg("softmax input must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p, target) -> np.ndarray | float:
    """``-ln p[target]`` per row; ``p`` must come from :func:`softmax`."""
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(target)
    n = p.shape[-1]
    if np.any(t < 0) or np.any(t >= n):
        raise BadArg(f"target out of range 0..{n - 1}: {target}")
    if p.ndim == 1:
        return float(-np.log(p[int(t)]))
    return -np.log(p[np.arange(p.shape[0]), t])


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_from_logits(z, target) -> np.ndarray:
    """``-log softmax(z)[target]`` per row without forming tiny probabilities."""
    ls = np.atleast_2d(log_softmax(z))
    t = np.atleast_1d(np.asarray(target))
    if np.any(t < 0) or np.any(t >= ls.shape[-1]):
        raise BadArg(f"target out of range 0..{ls.shape[-1] - 1}")
    return -ls[np.arange(ls.shape[0]), t]


def softmax_cross_entropy_grad(p, target) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(z), target)`` w.r.t. the logits ``z``."""
    g = np.array(p, dtype=np.float64, copy=True)
    t = np.asarray(target)
    if g.ndim == 1:
        g[int(t)] -= 1.0
    else:
        g[np.arange(g.shape[0]), t] -= 1.0
    return g


# ---------------------------------------------------------------------------
# finite-difference verification


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros(arr.shape, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + eps
        fp = f()
        arr[i] = orig - eps
        fm = f()
        arr[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradient_check(build: Callable[[GradTape | None], np.ndarray], point: dict[str, np.ndarray],
                   eps: float = 1e-4, seed: int = 0) -> float:
    """Compare tape gradients against central finite differences.

    ``build(tape)`` must run a forward pass reading its inputs from the
    float64 arrays in ``point`` (keyed exactly as the tape keys gradients,
    ``"input"`` for the chain input) and return the output.  The scalar under
    test is ``sum(output * r)`` for a fixed random projection ``r``.
    Returns the maximum relative error over every entry of every array.
    """
    for key, arr in point.items():
        if arr.dtype != np.float64:
            raise BadArg(f"gradient_check needs float64 arrays, {key} is {arr.dtype}")
    tape = GradTape()
    out = np.asarray(build(tape), dtype=np.float64)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    grads = tape.backward(r)

    def scalar() -> float:
        return float(np.sum(np.asarray(build(None), dtype=np.float64) * r))

    worst = 0.0
    for key, arr in point.items():
        if key not in grads:
            raise BadArg(f"tape produced no gradient for {key!r}")
        numeric = numerical_grad(scalar, arr, eps)
        worst = max(worst, max_relative_error(grads[key], numeric))
    return worst

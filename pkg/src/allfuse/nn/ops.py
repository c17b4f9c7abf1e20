"""Differentiable operations used by the hybrid CNN+GRU models.

Image tensors are NHWC. Convolutions are stride-1 valid cross-correlations.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_result

PROB_FLOOR = 1e-12


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} and {b.data.shape} do not align")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(a.data @ b.data, (a, b), bwd)


def dense(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` for x of shape [N, D] and w of shape [D, U]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"dense expects [N,D] x [D,U], got {x.data.shape} and {w.data.shape}")
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    out = x.data @ w.data
    if b is not None:
        if parents[2].data.shape != (w.data.shape[1],):
            raise ShapeError(f"dense bias shape {parents[2].data.shape} != ({w.data.shape[1]},)")
        out = out + parents[2].data

    def bwd(g):
        grads = (g @ w.data.T, x.data.T @ g)
        if b is not None:
            grads += (g.sum(axis=0),)
        return grads

    return make_result(out, parents, bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),))


def tanh_op(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return make_result(t, (x,), lambda g: (g * (1 - t * t),))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects [N,K], got {x.data.shape}")
    s = _softmax(x.data)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result(s, (x,), bwd)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity (same object) at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.data.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.data.shape[0], -1))


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bwd)


def _im2col(x, kh, kw):
    n, h, w, c = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # n, ho, wo, c, kh, kw
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def conv2d(x, k, b=None, stride: int = 1) -> Tensor:
    """Valid stride-1 cross-correlation of x[N,H,W,Cin] with k[kh,kw,Cin,Cout]."""
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-D kernel, got {x.data.shape} and {k.data.shape}")
    n, h, w, c = x.data.shape
    kh, kw, cin, cout = k.data.shape
    if cin != c or kh > h or kw > w:
        raise ShapeError(f"conv2d input {x.data.shape} incompatible with kernel {k.data.shape}")

    cols, ho, wo = _im2col(x.data, kh, kw)
    k2 = k.data.reshape(kh * kw * cin, cout)
    out = cols @ k2
    parents = (x, k)
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.data.shape} != ({cout},)")
        out = out + b.data
        parents = (x, k, b)
    out = out.reshape(n, ho, wo, cout)

    def bwd(g):
        g2 = g.reshape(n * ho * wo, cout)
        dk = (cols.T @ g2).reshape(kh, kw, cin, cout)
        grads = [None, dk]
        if x.requires_grad:
            dcols = (g2 @ k2.T).reshape(n, ho, wo, kh, kw, cin)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
            grads[0] = dx
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, bwd)


def maxpool2d(x, window: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects NHWC input, got {x.data.shape}")
    n, h, w, c = x.data.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {x.data.shape}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    if window == stride:
        crop = x.data[:, :ho * window, :wo * window, :]
        blocks = crop.reshape(n, ho, window, wo, window, c).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(n, ho, wo, c, window * window)
    else:
        win = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride]
        blocks = win[:, :ho, :wo].reshape(n, ho, wo, c, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dx = np.zeros_like(x.data)
        if window == stride:
            dblk = np.zeros((n, ho, wo, c, window * window), dtype=g.dtype)
            np.put_along_axis(dblk, arg[..., None], g[..., None], axis=-1)
            dblk = dblk.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3)
            dx[:, :ho * window, :wo * window, :] = dblk.reshape(n, ho * window, wo * window, c)
        else:
            ni, hi, wi, ci = np.indices((n, ho, wo, c))
            rows = hi * stride + arg // window
            cols = wi * stride + arg % window
            np.add.at(dx, (ni, rows, cols, ci), g)
        return (dx,)

    return make_result(out, (x,), bwd)


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log-likelihood of the true class, with probabilities floored at 1e-12."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(n)
    picked = probs.data[rows, labels].astype(np.float64)
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = float(-np.log(clamped).mean())

    def bwd(g):
        d = np.zeros_like(probs.data)
        live = picked > PROB_FLOOR
        d[rows[live], labels[live]] = -g / (n * picked[live])
        return (d,)

    return make_result(np.asarray(loss, dtype=np.float64), (probs,), bwd)


def features_to_sequence(x) -> Tensor:
    """[N,h,w,c] feature map -> [N, h*w, c] sequence, row-major over spatial positions."""
    x = as_tensor(x)
    n, h, w, c = x.data.shape
    if h * w < 1:
        raise ShapeError("feature map has no spatial positions")
    return reshape(x, (n, h * w, c))


# ---------------------------------------------------------------- GRU


GRU_PARAM_NAMES = ("w_xr", "w_hr", "b_r", "w_xz", "w_hz", "b_z", "w_xh", "w_hh", "b_h")


def _check_gru(d, u, p):
    expected = {
        "w_xr": (d, u), "w_xz": (d, u), "w_xh": (d, u),
        "w_hr": (u, u), "w_hz": (u, u), "w_hh": (u, u),
        "b_r": (u,), "b_z": (u,), "b_h": (u,),
    }
    for name, shape in expected.items():
        got = as_tensor(p[name]).data.shape
        if got != shape:
            raise ShapeError(f"GRU parameter {name} has shape {got}, expected {shape}")


def gru_cell(x_t, h_prev, p) -> Tensor:
    """One GRU step built from primitive ops.

    r = sigmoid(x W_xr + h W_hr + b_r), u = sigmoid(x W_xz + h W_hz + b_z),
    c = tanh(x W_xh + (r * h) W_hh + b_h), h' = u * h + (1 - u) * c.
    """
    x_t, h_prev = as_tensor(x_t), as_tensor(h_prev)
    if x_t.data.ndim != 2 or h_prev.data.ndim != 2 or x_t.data.shape[0] != h_prev.data.shape[0]:
        raise ShapeError(f"gru_cell got x {x_t.data.shape} and h {h_prev.data.shape}")
    _check_gru(x_t.data.shape[1], h_prev.data.shape[1], p)
    r = sigmoid(add(add(matmul(x_t, p["w_xr"]), matmul(h_prev, p["w_hr"])), p["b_r"]))
    u = sigmoid(add(add(matmul(x_t, p["w_xz"]), matmul(h_prev, p["w_hz"])), p["b_z"]))
    c = tanh_op(add(add(matmul(x_t, p["w_xh"]), matmul(mul(r, h_prev), p["w_hh"])), p["b_h"]))
    one_minus_u = add(mul(u, -1.0), 1.0)
    return add(mul(u, h_prev), mul(one_minus_u, c))


def gru_sequence(xs, h0, p) -> Tensor:
    """Final hidden state of the GRU folded over xs[N,T,D].

    Fused forward/backward-through-time; numerically the same fold as repeated
    ``gru_cell`` calls.
    """
    xs, h0 = as_tensor(xs), as_tensor(h0)
    if xs.data.ndim != 3:
        raise ShapeError(f"gru_sequence expects [N,T,D], got {xs.data.shape}")
    n, t_len, d = xs.data.shape
    if t_len == 0:
        raise ValueError("gru_sequence needs at least one time step")
    if h0.data.shape[0] != n or h0.data.ndim != 2:
        raise ShapeError(f"h0 shape {h0.data.shape} incompatible with batch {n}")
    u_dim = h0.data.shape[1]
    _check_gru(d, u_dim, p)
    P = {k: as_tensor(p[k]) for k in GRU_PARAM_NAMES}
    W = {k: v.data for k, v in P.items()}

    x2 = xs.data.reshape(n * t_len, d)
    xr = (x2 @ W["w_xr"] + W["b_r"]).reshape(n, t_len, u_dim)
    xz = (x2 @ W["w_xz"] + W["b_z"]).reshape(n, t_len, u_dim)
    xh = (x2 @ W["w_xh"] + W["b_h"]).reshape(n, t_len, u_dim)

    hs = [h0.data]
    rs, us, cs = [], [], []
    h = h0.data
    for t in range(t_len):
        r = _sigmoid(xr[:, t] + h @ W["w_hr"])
        u = _sigmoid(xz[:, t] + h @ W["w_hz"])
        c = np.tanh(xh[:, t] + (r * h) @ W["w_hh"])
        h = u * h + (1 - u) * c
        rs.append(r)
        us.append(u)
        cs.append(c)
        hs.append(h)

    def bwd(g):
        dW = {k: np.zeros_like(v) for k, v in W.items()}
        dxr = np.empty_like(xr)
        dxz = np.empty_like(xz)
        dxh = np.empty_like(xh)
        dh = g
        for t in reversed(range(t_len)):
            hp, r, u, c = hs[t], rs[t], us[t], cs[t]
            dc = dh * (1 - u)
            du = dh * (hp - c)
            dh_prev = dh * u
            dac = dc * (1 - c * c)
            dxh[:, t] = dac
            rh = r * hp
            dW["w_hh"] += rh.T @ dac
            drh = dac @ W["w_hh"].T
            dr = drh * hp
            dh_prev += drh * r
            daz = du * u * (1 - u)
            dxz[:, t] = daz
            dW["w_hz"] += hp.T @ daz
            dh_prev += daz @ W["w_hz"].T
            dar = dr * r * (1 - r)
            dxr[:, t] = dar
            dW["w_hr"] += hp.T @ dar
            dh_prev += dar @ W["w_hr"].T
            dh = dh_prev
        gr = dxr.reshape(n * t_len, u_dim)
        gz = dxz.reshape(n * t_len, u_dim)
        gh = dxh.reshape(n * t_len, u_dim)
        dW["w_xr"] = x2.T @ gr
        dW["w_xz"] = x2.T @ gz
        dW["w_xh"] = x2.T @ gh
        dW["b_r"] = gr.sum(axis=0)
        dW["b_z"] = gz.sum(axis=0)
        dW["b_h"] = gh.sum(axis=0)
        dxs = None
        if xs.requires_grad:
            dxs = (gr @ W["w_xr"].T + gz @ W["w_xz"].T + gh @ W["w_xh"].T).reshape(n, t_len, d)
        return (dxs, dh) + tuple(dW[k] for k in GRU_PARAM_NAMES)

    return make_result(h, (xs, h0) + tuple(P[k] for k in GRU_PARAM_NAMES), bwd)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))

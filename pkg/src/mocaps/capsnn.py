"""Capsule network building blocks.

Every function accepts plain arrays or tape :class:`~mocaps.autodiff.Var`
values and records itself when a tape is active.  Shapes follow one
convention throughout:

* images and feature maps: ``[batch, channels, height, width]``
* capsules: ``[batch, num_capsules, capsule_dim]``
* transformation matrices: ``[in_capsules, out_capsules, out_dim, in_dim]``
* votes: ``[batch, in_capsules, out_capsules, out_dim]``
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mocaps import autodiff as ad
from mocaps.autodiff import Var, active_tape, defvjp, emit, needs_grad, value


# -- squash ------------------------------------------------------------------

def squash(s):
    """Scale each capsule to norm ``|s|^2 / (1 + |s|^2)``, keeping its direction."""
    sv = value(s)
    n2 = (sv * sv).sum(axis=-1, keepdims=True)
    out = sv * (np.sqrt(n2) / (1 + n2))
    if isinstance(s, Var):
        tape = active_tape()
        if tape is not None and tape.recording and s.tape is tape and np.any(n2 == 0):
            tape.warn("squash evaluated at the zero vector "
                      "(nondifferentiable point, gradient taken as 0)")
    return emit("squash", out, (s,), saved=(sv,))


@defvjp("squash")
def _squash_vjp(g, saved, attrs):
    (s,) = saved
    n2 = (s * s).sum(axis=-1, keepdims=True)
    n = np.sqrt(n2)
    safe_n = np.where(n > 0, n, 1)
    # (d/dn of n/(1+n^2)) / n, zero at the zero vector
    radial = np.where(n > 0, (1 - n2) / ((1 + n2) ** 2 * safe_n), 0)
    dot = (s * g).sum(axis=-1, keepdims=True)
    return ((n / (1 + n2)) * g + radial * dot * s,)


# -- convolution --------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _im2col(x, k, stride):
    b, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k), ho, wo


def conv2d(x, w, b, stride: int = 1):
    """Unpadded 2-D cross-correlation plus a per-channel bias."""
    xv, wv, bv = value(x), value(w), value(b)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValueError(f"conv2d expects [B,C,H,W] input and [O,C,k,k] kernel, got {xv.shape}, {wv.shape}")
    o, c, k, k2 = wv.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if xv.shape[1] != c:
        raise ValueError(f"conv2d channel mismatch: input has {xv.shape[1]}, kernel expects {c}")
    if k > xv.shape[2] or k > xv.shape[3]:
        raise ValueError(f"kernel {k}x{k} larger than input {xv.shape[2]}x{xv.shape[3]}")
    cols, ho, wo = _im2col(xv, k, stride)
    out = cols @ wv.reshape(o, -1).T + bv
    out = np.ascontiguousarray(out.reshape(xv.shape[0], ho, wo, o).transpose(0, 3, 1, 2))
    nx, nw, _ = needs_grad(x, w, b)
    return emit("conv2d", out, (x, w, b), saved=(xv if nw else None, wv if nx else None),
                stride=stride, kernel=k, x_shape=xv.shape)


@defvjp("conv2d")
def _conv2d_vjp(g, saved, attrs):
    x, w = saved
    stride, k, x_shape = attrs["stride"], attrs["kernel"], attrs["x_shape"]
    bsz, c = x_shape[:2]
    o, ho, wo = g.shape[1:]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = gx = None
    if x is not None:
        cols, _, _ = _im2col(x, k, stride)
        gw = (g2.T @ cols).reshape(o, c, k, k)
    if w is not None:
        gcols = (g2 @ w.reshape(o, -1)).reshape(bsz, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        gx = np.zeros(x_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
    return gx, gw, g2.sum(axis=0)


def conv_stem(image, w, b):
    """Stride-1 convolution followed by ReLU."""
    return ad.relu(conv2d(image, w, b, stride=1))


def primary_capsules(features, w, b, capsule_dim: int, stride: int = 2):
    """Convolve, regroup channels into capsules and squash.

    The kernel's output channels are read as ``groups x capsule_dim``; the
    result has ``groups * out_h * out_w`` capsules ordered group-major.
    """
    fv, wv = value(features), value(w)
    k = wv.shape[-1]
    if fv.ndim != 4 or fv.shape[2] < k or fv.shape[3] < k:
        raise ValueError(f"feature map {fv.shape} too small for a {k}x{k} primary-capsule convolution")
    if wv.shape[0] % capsule_dim:
        raise ValueError(f"{wv.shape[0]} output channels do not split into {capsule_dim}-D capsules")
    conv = conv2d(features, w, b, stride=stride)
    bsz, ch, h, wd = value(conv).shape
    groups = ch // capsule_dim
    caps = ad.reshape(conv, (bsz, groups, capsule_dim, h, wd))
    caps = ad.transpose(caps, (0, 1, 3, 4, 2))
    caps = ad.reshape(caps, (bsz, groups * h * wd, capsule_dim))
    return squash(caps)


# -- votes and routing --------------------------------------------------------

def votes(u, W):
    """Prediction vectors ``votes[b, i, j] = W[i, j] @ u[b, i]``."""
    uv, wv = value(u), value(W)
    if uv.ndim != 3 or wv.ndim != 4:
        raise ValueError(f"votes expects u [B,I,K] and W [I,J,D,K], got {uv.shape}, {wv.shape}")
    bsz, n_in, k = uv.shape
    if wv.shape[0] != n_in or wv.shape[3] != k:
        raise ValueError(
            f"votes: capsules {uv.shape[1:]} (count, dim) do not match W in-capsules "
            f"{wv.shape[0]} / in_dim {wv.shape[3]}"
        )
    if uv.dtype != wv.dtype:
        raise TypeError(f"dtype mismatch: {uv.dtype} vs {wv.dtype}")
    n_out, d = wv.shape[1], wv.shape[2]
    r = np.matmul(wv.reshape(n_in, n_out * d, k), uv.transpose(1, 2, 0))  # [I, J*D, B]
    out = np.ascontiguousarray(r.transpose(2, 0, 1)).reshape(bsz, n_in, n_out, d)
    nu, nw = needs_grad(u, W)
    return emit("votes", out, (u, W), saved=(wv if nu else None, uv if nw else None))


@defvjp("votes")
def _votes_vjp(g, saved, attrs):
    wv, uv = saved
    bsz, n_in, n_out, d = g.shape
    gr = g.reshape(bsz, n_in, n_out * d).transpose(1, 2, 0)  # [I, J*D, B]
    gu = gw = None
    if wv is not None:
        k = wv.shape[3]
        gu = np.ascontiguousarray(
            np.matmul(wv.reshape(n_in, n_out * d, k).transpose(0, 2, 1), gr).transpose(2, 0, 1))
    if uv is not None:
        gw = np.matmul(gr, uv.transpose(1, 0, 2)).reshape(n_in, n_out, d, uv.shape[2])
    return gu, gw


def route_sum(c, u_hat):
    """Coupling-weighted vote sum ``s[b, j] = sum_i c[b, i, j] * u_hat[b, i, j]``."""
    cv, uv = value(c), value(u_hat)
    out = np.einsum("bij,bijd->bjd", cv, uv)
    nc, nu = needs_grad(c, u_hat)
    return emit("route_sum", out, (c, u_hat), saved=(uv if nc else None, cv if nu else None))


@defvjp("route_sum")
def _route_sum_vjp(g, saved, attrs):
    uv, cv = saved
    gc = None if uv is None else np.einsum("bijd,bjd->bij", uv, g)
    gu = None if cv is None else cv[..., None] * g[:, None]
    return gc, gu


def agreement(u_hat, v):
    """Scalar products ``a[b, i, j] = u_hat[b, i, j] . v[b, j]``."""
    uv, vv = value(u_hat), value(v)
    out = np.einsum("bijd,bjd->bij", uv, vv)
    nu, nv = needs_grad(u_hat, v)
    return emit("agreement", out, (u_hat, v), saved=(vv if nu else None, uv if nv else None))


@defvjp("agreement")
def _agreement_vjp(g, saved, attrs):
    vv, uv = saved
    gu = None if vv is None else g[..., None] * vv[:, None]
    gv = None if uv is None else np.einsum("bij,bijd->bjd", g, uv)
    return gu, gv


@dataclass
class RoutingState:
    logits: np.ndarray
    couplings: np.ndarray
    iteration: int


def rba_route(u_hat, iterations: int = 3, trace: list | None = None):
    """Routing-by-agreement over the out-capsule axis.

    Logits start at zero; each pass soft-maxes them over output capsules,
    squashes the weighted vote sums and adds the vote/output agreement.
    The loop is unrolled on the tape, so gradients flow through the
    coupling updates.  When ``trace`` is a list, one :class:`RoutingState`
    per iteration is appended to it.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    uv = value(u_hat)
    if uv.ndim != 4:
        raise ValueError(f"votes must be [batch, in, out, dim], got shape {uv.shape}")
    logits = np.zeros(uv.shape[:3], dtype=uv.dtype)
    v = None
    for it in range(iterations):
        c = ad.softmax(logits, axis=2)
        if trace is not None:
            trace.append(RoutingState(np.array(value(logits)), np.array(value(c)), it))
        v = squash(route_sum(c, u_hat))
        if it < iterations - 1:
            logits = ad.add(logits, agreement(u_hat, v))
    return v


def capsule_layer(u, W, iterations: int = 3):
    """Fully connected capsule layer: votes, then routing."""
    return rba_route(votes(u, W), iterations)


# -- losses and reconstruction ------------------------------------------------

@dataclass(frozen=True)
class MarginLossParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    down_weight: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError("need 0 < m_minus < m_plus < 1")
        if not 0 < self.down_weight <= 1:
            raise ValueError("down_weight must be in (0, 1]")


def one_hot(labels, classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def margin_loss(class_caps, labels, p: MarginLossParams = MarginLossParams()):
    """Batch mean of the per-class hinge-squared margin loss on capsule lengths."""
    cv = value(class_caps)
    target = one_hot(labels, cv.shape[1], cv.dtype)
    norms = ad.l2norm(class_caps)
    present = ad.square(ad.relu(ad.add_scalar(ad.scale(norms, -1.0), p.m_plus)))
    absent = ad.square(ad.relu(ad.add_scalar(norms, -p.m_minus)))
    per_class = ad.add(ad.mul(present, target),
                       ad.mul(absent, (p.down_weight * (1 - target)).astype(cv.dtype)))
    return ad.mean(ad.sum_(per_class, axis=1))


def label_mask(labels, classes: int, dtype=np.float64) -> np.ndarray:
    return one_hot(labels, classes, dtype)


def reconstruction_net(class_caps, mask, params: dict):
    """Masked class capsules through dense ReLU, ReLU, sigmoid layers.

    ``params`` holds ``w1, b1, w2, b2, w3, b3`` with weights laid out
    ``[fan_in, fan_out]``.
    """
    cv = value(class_caps)
    mask = np.asarray(mask, dtype=cv.dtype)
    if mask.shape != cv.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match class capsules {cv.shape[:2]}")
    if not (np.all((mask == 0) | (mask == 1)) and np.all(mask.sum(axis=1) == 1)):
        raise ValueError("mask must select exactly one class capsule per sample")
    full = np.ascontiguousarray(np.broadcast_to(mask[..., None], cv.shape))
    h = ad.reshape(ad.mul(class_caps, full), (cv.shape[0], -1))
    h = ad.relu(ad.add_bias(ad.matmul(h, params["w1"]), params["b1"]))
    h = ad.relu(ad.add_bias(ad.matmul(h, params["w2"]), params["b2"]))
    return ad.sigmoid(ad.add_bias(ad.matmul(h, params["w3"]), params["b3"]))


def reconstruction_loss(recon, image):
    """Batch mean of the summed squared pixel error."""
    rv, iv = value(recon), value(image)
    if rv.shape != iv.shape:
        raise ValueError(f"reconstruction length mismatch: {rv.shape} vs {iv.shape}")
    return ad.mean(ad.sum_(ad.square(ad.sub(recon, image)), axis=1))


@dataclass
class LossBreakdown:
    total: float
    margin: float
    recon: float
    lam: float


def total_loss(margin, recon, lam: float = 5e-4):
    """``lam * recon + margin``; returns the (possibly taped) total."""
    if isinstance(margin, Var) or isinstance(recon, Var):
        return ad.add(ad.scale(recon, lam), margin)
    return lam * recon + margin


def loss_breakdown(margin, recon, lam: float = 5e-4) -> LossBreakdown:
    m, r = float(value(margin)), float(value(recon))
    return LossBreakdown(total=lam * r + m, margin=m, recon=r, lam=lam)

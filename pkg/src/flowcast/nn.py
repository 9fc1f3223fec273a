"""Differentiable neural-network kernels built on the autodiff engine.

Convolution is cross-correlation (no kernel flip).  Spatial kernels run
through strided window views contracted with a single ``tensordot`` per
call, which keeps the reduction order fixed and the results reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Tensor, _node, as_tensor, concat, sigmoid, tanh
from .errors import NumericError, ShapeError, StatisticsUnsetError


def _require_finite(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"{name}: non-finite input values")


def _out_len(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel size {k} exceeds padded input extent {n + 2 * padding}")
    return span // stride + 1


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x[B,C,H,W]`` with ``weight[O,C,kH,kW]`` plus bias.

    Output spatial extent is ``(n + 2*padding - k) // stride + 1`` per axis.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input/weight, got {x.shape}/{weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kH, kW = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    if bias.shape != (O,):
        raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d requires stride >= 1 and padding >= 0")
    _require_finite("conv2d", x, weight, bias)

    Ho = _out_len(H, kH, stride, padding)
    Wo = _out_len(W, kW, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sb, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(B, Ho, Wo, C, kH, kW),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
    )
    cols = np.ascontiguousarray(windows).reshape(B * Ho * Wo, C * kH * kW)
    wmat = weight.data.reshape(O, -1)
    out = (cols @ wmat.T + bias.data).reshape(B, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(O, C, kH, kW)
        gb = gmat.sum(axis=0)
        gx = None
        if x.requires_grad or x._prev:
            if stride == 1:
                # full correlation of the padded upstream gradient with the
                # spatially flipped kernel, contracted over output channels
                gp = np.pad(g, ((0, 0), (0, 0), (kH - 1, kH - 1), (kW - 1, kW - 1)))
                gb_, go_, gh_, gw_ = gp.strides
                gwin = as_strided(
                    gp,
                    shape=(B, H + 2 * padding, W + 2 * padding, O, kH, kW),
                    strides=(gb_, gh_, gw_, go_, gh_, gw_),
                )
                wrot = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1])
                gxp = np.tensordot(gwin, wrot, axes=([3, 4, 5], [0, 2, 3]))
                gx = gxp.transpose(0, 3, 1, 2)[:, :, padding : padding + H, padding : padding + W]
                gx = np.ascontiguousarray(gx)
            else:
                gxp = np.zeros((B, H + 2 * padding, W + 2 * padding, C))
                for ky in range(kH):
                    for kx in range(kW):
                        patch = np.tensordot(g, weight.data[:, :, ky, kx], axes=([1], [0]))
                        gxp[:, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride, :] += patch
                gx = np.ascontiguousarray(
                    gxp.transpose(0, 3, 1, 2)[:, :, padding : padding + H, padding : padding + W]
                )
        return gx, gw, gb

    return _node(out, (x, weight, bias), vjp)


def conv3d(x, weight, bias, stride: int = 1, padding=0) -> Tensor:
    """3D cross-correlation over ``x[B,C,D,H,W]``; padding may be per-axis."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input/weight, got {x.shape}/{weight.shape}")
    B, C, D, H, W = x.shape
    O, Cw, kD, kH, kW = weight.shape
    if Cw != C:
        raise ShapeError(f"conv3d channel mismatch: input {C}, weight {Cw}")
    if bias.shape != (O,):
        raise ShapeError(f"conv3d bias must have shape ({O},), got {bias.shape}")
    if stride < 1:
        raise ValueError("conv3d requires stride >= 1")
    pD, pH, pW = (padding, padding, padding) if isinstance(padding, int) else padding
    if min(pD, pH, pW) < 0:
        raise ValueError("conv3d requires padding >= 0")
    _require_finite("conv3d", x, weight, bias)

    Do = _out_len(D, kD, stride, pD)
    Ho = _out_len(H, kH, stride, pH)
    Wo = _out_len(W, kW, stride, pW)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pD, pD), (pH, pH), (pW, pW)))
    sb, sc, sd, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(B, Do, Ho, Wo, C, kD, kH, kW),
        strides=(sb, sd * stride, sh * stride, sw * stride, sc, sd, sh, sw),
    )
    cols = np.ascontiguousarray(windows).reshape(B * Do * Ho * Wo, C * kD * kH * kW)
    wmat = weight.data.reshape(O, -1)
    out = (cols @ wmat.T + bias.data).reshape(B, Do, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(B * Do * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(O, C, kD, kH, kW)
        gb = gmat.sum(axis=0)
        gx = None
        if x.requires_grad or x._prev:
            if stride == 1:
                gp = np.pad(g, ((0, 0), (0, 0), (kD - 1, kD - 1), (kH - 1, kH - 1), (kW - 1, kW - 1)))
                gb_, go_, gd_, gh_, gw_ = gp.strides
                gwin = as_strided(
                    gp,
                    shape=(B, D + 2 * pD, H + 2 * pH, W + 2 * pW, O, kD, kH, kW),
                    strides=(gb_, gd_, gh_, gw_, go_, gd_, gh_, gw_),
                )
                wrot = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1, ::-1])
                gxp = np.tensordot(gwin, wrot, axes=([4, 5, 6, 7], [0, 2, 3, 4]))
                gx = gxp.transpose(0, 4, 1, 2, 3)[:, :, pD : pD + D, pH : pH + H, pW : pW + W]
                gx = np.ascontiguousarray(gx)
            else:
                gxp = np.zeros((B, D + 2 * pD, H + 2 * pH, W + 2 * pW, C))
                for kd in range(kD):
                    for ky in range(kH):
                        for kx in range(kW):
                            patch = np.tensordot(g, weight.data[:, :, kd, ky, kx], axes=([1], [0]))
                            gxp[
                                :,
                                kd : kd + stride * Do : stride,
                                ky : ky + stride * Ho : stride,
                                kx : kx + stride * Wo : stride,
                                :,
                            ] += patch
                gx = np.ascontiguousarray(
                    gxp.transpose(0, 4, 1, 2, 3)[:, :, pD : pD + D, pH : pH + H, pW : pW + W]
                )
        return gx, gw, gb

    return _node(out, (x, weight, bias), vjp)


@dataclass
class BatchNormState:
    """Running normalization statistics for one batch-norm site."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0

    @classmethod
    def unset(cls, channels: int) -> "BatchNormState":
        return cls(mean=np.zeros(channels), var=np.ones(channels), updates=0)

    def absorb(self, mean: np.ndarray, var: np.ndarray, momentum: float) -> None:
        if self.updates == 0:
            self.mean[...] = mean
            self.var[...] = var
        else:
            self.mean[...] = (1.0 - momentum) * self.mean + momentum * mean
            self.var[...] = (1.0 - momentum) * self.var + momentum * var
        self.updates += 1


def batch_norm(
    x,
    gamma,
    beta,
    state: BatchNormState | None = None,
    training: bool = True,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Normalize per channel (axis 1) over every other axis.

    Training mode uses batch statistics (biased variance) and folds them
    into ``state``; eval mode normalizes by the running statistics and
    raises :class:`StatisticsUnsetError` if none were ever recorded.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ShapeError("batch_norm input needs a channel axis")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm parameters must have shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            state.absorb(mean, var, momentum)
    else:
        if state is None or state.updates == 0:
            raise StatisticsUnsetError("batch_norm eval mode: statistics unset")
        mean, var = state.mean, state.var

    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            dx = inv.reshape(bshape) * (dxhat - m1 - xhat * m2)
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), vjp)


def bilinear_sample(image, coords) -> Tensor:
    """Sample ``image[B,C,H,W]`` at ``coords[B,2,h,w]`` (x then y, pixels).

    Uses the four nearest neighbors with bilinear weights; coordinates
    falling outside the frame clamp to the border.  Differentiable with
    respect to the image and, inside the frame, the coordinates.
    """
    image, coords = as_tensor(image), as_tensor(coords)
    if image.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2:
        raise ShapeError(
            f"bilinear_sample expects image[B,C,H,W] and coords[B,2,h,w], "
            f"got {image.shape} and {coords.shape}"
        )
    if image.shape[0] != coords.shape[0]:
        raise ShapeError("bilinear_sample batch sizes differ")
    B, C, H, W = image.shape
    hs, ws = coords.shape[2], coords.shape[3]

    cx = np.clip(coords.data[:, 0], 0.0, W - 1.0)
    cy = np.clip(coords.data[:, 1], 0.0, H - 1.0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = cx - x0
    wy = cy - y0

    img = np.ascontiguousarray(image.data.transpose(0, 2, 3, 1))  # (B,H,W,C)
    bb = np.arange(B)[:, None, None]
    v00 = img[bb, y0, x0]
    v01 = img[bb, y0, x1]
    v10 = img[bb, y1, x0]
    v11 = img[bb, y1, x1]

    w00 = ((1.0 - wy) * (1.0 - wx))[..., None]
    w01 = ((1.0 - wy) * wx)[..., None]
    w10 = (wy * (1.0 - wx))[..., None]
    w11 = (wy * wx)[..., None]
    out = np.ascontiguousarray(
        (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11).transpose(0, 3, 1, 2)
    )

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1)  # (B,h,w,C)
        gimg = None
        if image.requires_grad or image._prev:
            buf = np.zeros((B, H, W, C))
            np.add.at(buf, (bb, y0, x0), gt * w00)
            np.add.at(buf, (bb, y0, x1), gt * w01)
            np.add.at(buf, (bb, y1, x0), gt * w10)
            np.add.at(buf, (bb, y1, x1), gt * w11)
            gimg = np.ascontiguousarray(buf.transpose(0, 3, 1, 2))
        gcoords = None
        if coords.requires_grad or coords._prev:
            dx = (1.0 - wy)[..., None] * (v01 - v00) + wy[..., None] * (v11 - v10)
            dy = (1.0 - wx)[..., None] * (v10 - v00) + wx[..., None] * (v11 - v01)
            # clamping freezes out-of-range coordinates
            mx = (coords.data[:, 0] >= 0.0) & (coords.data[:, 0] <= W - 1.0)
            my = (coords.data[:, 1] >= 0.0) & (coords.data[:, 1] <= H - 1.0)
            gx = (gt * dx).sum(axis=-1) * mx
            gy = (gt * dy).sum(axis=-1) * my
            gcoords = np.ascontiguousarray(np.stack([gx, gy], axis=1))
        return gimg, gcoords

    return _node(out, (image, coords), vjp)


@dataclass
class ConvLSTMGates:
    """The four gate convolutions of one ConvLSTM cell.

    Each weight has shape ``(hidden, input + hidden, k, k)`` and acts on
    the channel concatenation of the step input and the previous hidden
    state.  Gate order: input, forget, output, candidate.
    """

    w_i: Tensor
    b_i: Tensor
    w_f: Tensor
    b_f: Tensor
    w_o: Tensor
    b_o: Tensor
    w_g: Tensor
    b_g: Tensor

    def fused(self) -> tuple[Tensor, Tensor]:
        weight = concat([self.w_i, self.w_f, self.w_o, self.w_g], axis=0)
        bias = concat([self.b_i, self.b_f, self.b_o, self.b_g], axis=0)
        return weight, bias

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.gate_{gate}.{kind}": getattr(self, f"{abbrev}_{gate}")
            for gate in ("i", "f", "o", "g")
            for abbrev, kind in (("w", "weight"), ("b", "bias"))
        }


def convlstm_cell_step(x, h, c, gates: ConvLSTMGates) -> tuple[Tensor, Tensor]:
    """One ConvLSTM recurrence step; returns the new (hidden, cell) pair.

    i, f, o = sigmoid of their gate convolutions over [x, h]; the
    candidate g uses tanh; c' = f*c + i*g and h' = o*tanh(c').  All four
    convolutions use same-padding so the spatial extent is preserved.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    if x.shape[2:] != h.shape[2:] or h.shape != c.shape:
        raise ShapeError(
            f"convlstm spatial/state mismatch: x {x.shape}, h {h.shape}, c {c.shape}"
        )
    hidden = h.shape[1]
    k = gates.w_i.shape[2]
    weight, bias = gates.fused()
    pre = conv2d(concat([x, h], axis=1), weight, bias, stride=1, padding=k // 2)
    i = sigmoid(pre[:, :hidden])
    f = sigmoid(pre[:, hidden : 2 * hidden])
    o = sigmoid(pre[:, 2 * hidden : 3 * hidden])
    g = tanh(pre[:, 3 * hidden :])
    c_next = f * c + i * g
    h_next = o * tanh(c_next)
    return h_next, c_next

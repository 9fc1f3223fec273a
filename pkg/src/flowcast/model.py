"""The prediction pipeline: flow forecaster, motion estimator, frame predictor.

Three cooperating networks produce the next frame from N past frames and
their N-1 inter-frame flow maps:

* the flow forecaster (three 3x3 conv blocks, 32/64/128 feature maps,
  linear 2-channel head) extrapolates the next flow map;
* the motion estimator (three 3x3x3 3D-conv blocks at 64 feature maps
  over all N flow maps, depth-averaged, linear 6-channel head) emits a
  per-pixel 2x3 affine transform field whose head starts at the exact
  identity transform;
* the frame predictor (four stacked ConvLSTM layers at 128/96/64/32
  feature maps) summarizes the frame history; its top hidden state is
  fused with the transform-warped last frame through a 1x1 head.

Every convolution is stride-1 with same-padding, so all feature maps keep
the input resolution and the transform field stays dense.  Hidden channel
counts scale by a rational factor so tests run at toy widths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autodiff import Tensor, concat, moveaxis, relu, reshape, sigmoid, softmax, tanh, tensor_mean
from .errors import ConfigError, ShapeError
from .flow import estimate_flow_horn_schunck, identity_grid, rgb_to_grayscale
from .nn import BatchNormState, ConvLSTMGates, batch_norm, bilinear_sample, conv2d, conv3d

OFPN_CHANNELS = (32, 64, 128)
MEN_CHANNELS = (64, 64, 64)
STPN_CHANNELS = (128, 96, 64, 32)
KERNEL = 3

IDENTITY_TRANSFORM = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def scale_channels(base: int, scale: Fraction) -> int:
    """Apply the hidden-channel scale factor, keeping at least one channel."""
    return max(1, round(base * scale))


@dataclass(frozen=True)
class ModelConfig:
    """Static pipeline configuration carried inside every checkpoint."""

    mode: str = "rgb"
    n_input: int = 5
    num_classes: int = 0
    channel_scale: Fraction = Fraction(1)
    height: int = 32
    width: int = 64

    def __post_init__(self):
        if self.mode not in ("rgb", "semantic"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "semantic" and self.num_classes < 2:
            raise ConfigError("semantic mode needs num_classes >= 2")
        if self.n_input < 2:
            raise ConfigError("n_input must be at least 2")
        if not isinstance(self.channel_scale, Fraction):
            object.__setattr__(self, "channel_scale", Fraction(self.channel_scale))
        if self.channel_scale <= 0:
            raise ConfigError("channel_scale must be positive")

    @property
    def frame_channels(self) -> int:
        return self.num_classes if self.mode == "semantic" else 3

    @property
    def flow_channels(self) -> int:
        return 2 * (self.n_input - 1)


class ModelParams:
    """All learnable tensors plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], bn: dict[str, BatchNormState]):
        self.config = config
        self.tensors = tensors
        self.bn = bn

    def named_parameters(self) -> dict[str, Tensor]:
        return self.tensors

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def gates(self, layer: int) -> ConvLSTMGates:
        prefix = f"stpn.layer{layer}"
        return ConvLSTMGates(
            *(
                self.tensors[f"{prefix}.gate_{gate}.{kind}"]
                for gate in ("i", "f", "o", "g")
                for kind in ("weight", "bias")
            )
        )


def parameter_spec(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name-to-shape map of every learnable tensor, in creation order."""
    s = config.channel_scale
    spec: dict[str, tuple[int, ...]] = {}

    def conv_block(prefix: str, c_in: int, c_out: int, k3d: bool) -> int:
        kshape = (KERNEL,) * (3 if k3d else 2)
        spec[f"{prefix}.weight"] = (c_out, c_in) + kshape
        spec[f"{prefix}.bias"] = (c_out,)
        return c_out

    c = config.flow_channels
    for i, base in enumerate(OFPN_CHANNELS, start=1):
        c = conv_block(f"ofpn.conv{i}", c, scale_channels(base, s), False)
        spec[f"ofpn.bn{i}.gamma"] = (c,)
        spec[f"ofpn.bn{i}.beta"] = (c,)
    conv_block("ofpn.head", c, 2, False)

    c = 2
    for i, base in enumerate(MEN_CHANNELS, start=1):
        c = conv_block(f"men.conv{i}", c, scale_channels(base, s), True)
        spec[f"men.bn{i}.gamma"] = (c,)
        spec[f"men.bn{i}.beta"] = (c,)
    conv_block("men.head", c, 6, False)

    c = config.frame_channels
    for i, base in enumerate(STPN_CHANNELS, start=1):
        hidden = scale_channels(base, s)
        spec[f"stpn.layer{i}.bn.gamma"] = (c,)
        spec[f"stpn.layer{i}.bn.beta"] = (c,)
        for gate in ("i", "f", "o", "g"):
            spec[f"stpn.layer{i}.gate_{gate}.weight"] = (hidden, c + hidden, KERNEL, KERNEL)
            spec[f"stpn.layer{i}.gate_{gate}.bias"] = (hidden,)
        c = hidden
    spec["stpn.head.weight"] = (config.frame_channels, c + config.frame_channels, 1, 1)
    spec["stpn.head.bias"] = (config.frame_channels,)
    return spec


def bn_sites(config: ModelConfig) -> dict[str, int]:
    """Batch-norm site names and their channel counts (output heads have none)."""
    s = config.channel_scale
    sites = {f"ofpn.bn{i}": scale_channels(base, s) for i, base in enumerate(OFPN_CHANNELS, 1)}
    sites.update({f"men.bn{i}": scale_channels(base, s) for i, base in enumerate(MEN_CHANNELS, 1)})
    c = config.frame_channels
    for i, base in enumerate(STPN_CHANNELS, start=1):
        sites[f"stpn.layer{i}.bn"] = c
        c = scale_channels(base, s)
    return sites


def init_params(seed: int, config: ModelConfig) -> ModelParams:
    """Deterministic initialization from a seed.

    Convolution weights draw from the variance-preserving uniform range
    +-sqrt(6 / (fan_in + fan_out)); biases start at zero, batch-norm at
    gamma 1 / beta 0.  The motion head is the exception: zero weights and
    an identity-transform bias, so a fresh pipeline warps every frame to
    itself exactly.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_spec(config).items():
        if name == "men.head.weight":
            data = np.zeros(shape)
        elif name == "men.head.bias":
            data = np.array(IDENTITY_TRANSFORM)
        elif name.endswith(".weight") and len(shape) >= 4:
            receptive = math.prod(shape[2:])
            limit = math.sqrt(6.0 / ((shape[1] + shape[0]) * receptive))
            data = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:  # biases and betas
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    bn = {name: BatchNormState.unset(channels) for name, channels in bn_sites(config).items()}
    return ModelParams(config, tensors, bn)


def _conv_bn_relu(x, params: ModelParams, prefix: str, index: int, training: bool, three_d: bool):
    conv = conv3d if three_d else conv2d
    x = conv(
        x,
        params.tensors[f"{prefix}.conv{index}.weight"],
        params.tensors[f"{prefix}.conv{index}.bias"],
        stride=1,
        padding=KERNEL // 2,
    )
    x = batch_norm(
        x,
        params.tensors[f"{prefix}.bn{index}.gamma"],
        params.tensors[f"{prefix}.bn{index}.beta"],
        params.bn[f"{prefix}.bn{index}"],
        training=training,
    )
    return relu(x)


def ofpn_forward(flows, params: ModelParams, training: bool = True) -> Tensor:
    """Predict the next flow map from the channel-stacked past flow maps."""
    if flows.ndim != 4 or flows.shape[1] != params.config.flow_channels:
        raise ShapeError(
            f"flow forecaster expects (B, {params.config.flow_channels}, H, W), got {flows.shape}"
        )
    x = flows
    for i in range(1, len(OFPN_CHANNELS) + 1):
        x = _conv_bn_relu(x, params, "ofpn", i, training, three_d=False)
    return conv2d(
        x, params.tensors["ofpn.head.weight"], params.tensors["ofpn.head.bias"], 1, KERNEL // 2
    )


def men_forward(flows, params: ModelParams, training: bool = True) -> Tensor:
    """Map N flow maps (B, 2, N, H, W) to a per-pixel transform field (B, 6, H, W)."""
    if flows.ndim != 5 or flows.shape[1] != 2 or flows.shape[2] != params.config.n_input:
        raise ShapeError(
            f"motion estimator expects (B, 2, {params.config.n_input}, H, W), got {flows.shape}"
        )
    x = flows
    for i in range(1, len(MEN_CHANNELS) + 1):
        x = _conv_bn_relu(x, params, "men", i, training, three_d=True)
    x = tensor_mean(x, axis=2)
    return conv2d(
        x, params.tensors["men.head.weight"], params.tensors["men.head.bias"], 1, KERNEL // 2
    )


def identity_transform(batch: int, height: int, width: int) -> Tensor:
    """The transform field that maps every pixel to itself."""
    data = np.broadcast_to(
        IDENTITY_TRANSFORM.reshape(1, 6, 1, 1), (batch, 6, height, width)
    )
    return Tensor(np.ascontiguousarray(data))


def apply_transform(frame, transform) -> Tensor:
    """Warp a frame through a per-pixel 2x3 affine transform field.

    Channel order (a11, a12, a13, a21, a22, a23): each output pixel at
    homogeneous coordinates (x, y, 1) samples the source frame at
    (a11*x + a12*y + a13, a21*x + a22*y + a23) with bilinear weights and
    border clamping.
    """
    if frame.ndim != 4 or transform.ndim != 4 or transform.shape[1] != 6:
        raise ShapeError(
            f"apply_transform expects frame (B,C,H,W) and transform (B,6,H,W), "
            f"got {frame.shape} / {transform.shape}"
        )
    if frame.shape[2:] != transform.shape[2:] or frame.shape[0] != transform.shape[0]:
        raise ShapeError("frame and transform extents differ")
    b, _, h, w = frame.shape
    grid = identity_grid(h, w)
    gx = Tensor(np.ascontiguousarray(grid[0][None, None]))
    gy = Tensor(np.ascontiguousarray(grid[1][None, None]))
    sx = transform[:, 0:1] * gx + transform[:, 1:2] * gy + transform[:, 2:3]
    sy = transform[:, 3:4] * gx + transform[:, 4:5] * gy + transform[:, 5:6]
    return bilinear_sample(frame, concat([sx, sy], axis=1))


def stpn_forward(frames, warped, params: ModelParams, training: bool = True) -> Tensor:
    """Fuse the ConvLSTM summary of the frame history with the warped frame.

    Each of the four layers normalizes its input sequence (statistics over
    batch, time, and space) and unrolls one ConvLSTM over the N steps from
    zero states; the gate nonlinearities provide the activation.  The top
    layer's final hidden state is concatenated with the warped frame and
    mapped through the linear 1x1 head: sigmoid output in rgb mode,
    per-pixel softmax in semantic mode.
    """
    cfg = params.config
    if frames.ndim != 5 or frames.shape[1] != cfg.n_input or frames.shape[2] != cfg.frame_channels:
        raise ShapeError(
            f"frame predictor expects (B, {cfg.n_input}, {cfg.frame_channels}, H, W), "
            f"got {frames.shape}"
        )
    if warped.shape != (frames.shape[0],) + frames.shape[2:]:
        raise ShapeError(f"warped frame shape {warped.shape} does not match {frames.shape}")
    b, n, _, h, w = frames.shape

    seq = frames
    top = None
    for layer in range(1, len(STPN_CHANNELS) + 1):
        c_in = seq.shape[2]
        flat = reshape(seq, (b * n, c_in, h, w))
        flat = batch_norm(
            flat,
            params.tensors[f"stpn.layer{layer}.bn.gamma"],
            params.tensors[f"stpn.layer{layer}.bn.beta"],
            params.bn[f"stpn.layer{layer}.bn"],
            training=training,
        )
        gates = params.gates(layer)
        hidden = gates.w_i.shape[0]
        weight, bias = gates.fused()
        # the input-to-state half of each gate convolution batches over all
        # time steps at once; only the hidden-to-state half recurs
        pre_x = conv2d(flat, weight[:, :c_in], bias, stride=1, padding=KERNEL // 2)
        pre_x = reshape(pre_x, (b, n, 4 * hidden, h, w))
        w_h = weight[:, c_in:]
        zero_bias = Tensor(np.zeros(4 * hidden))
        state_h = Tensor(np.zeros((b, hidden, h, w)))
        state_c = Tensor(np.zeros((b, hidden, h, w)))
        outputs = []
        for t in range(n):
            pre = pre_x[:, t] + conv2d(state_h, w_h, zero_bias, stride=1, padding=KERNEL // 2)
            i = sigmoid(pre[:, :hidden])
            f = sigmoid(pre[:, hidden : 2 * hidden])
            o = sigmoid(pre[:, 2 * hidden : 3 * hidden])
            g = tanh(pre[:, 3 * hidden :])
            state_c = f * state_c + i * g
            state_h = o * tanh(state_c)
            if layer < len(STPN_CHANNELS):
                outputs.append(reshape(state_h, (b, 1, hidden, h, w)))
        if layer < len(STPN_CHANNELS):
            seq = concat(outputs, axis=1)
        else:
            top = state_h

    fused = concat([top, warped], axis=1)
    logits = conv2d(fused, params.tensors["stpn.head.weight"], params.tensors["stpn.head.bias"], 1, 0)
    return softmax(logits, axis=1) if cfg.mode == "semantic" else sigmoid(logits)


def predict_next(frames, flows, params: ModelParams, training: bool = True):
    """Full pipeline step: returns (next frame, next flow, transform field).

    ``frames`` is (B, N, C, H, W) in time order; ``flows`` holds the N-1
    inter-frame flow maps channel-concatenated as (B, 2(N-1), H, W) with
    (u, v) pairs in time order.
    """
    cfg = params.config
    if frames.ndim != 5 or flows.ndim != 4:
        raise ShapeError(f"expected 5D frames and 4D flows, got {frames.shape} / {flows.shape}")
    if frames.shape[3:] != flows.shape[2:]:
        raise ShapeError("frame and flow extents differ")
    b, n, c, h, w = frames.shape

    pred_flow = ofpn_forward(flows, params, training)
    observed = moveaxis(reshape(flows, (b, n - 1, 2, h, w)), 1, 2)
    men_input = concat([observed, reshape(pred_flow, (b, 2, 1, h, w))], axis=2)
    transform = men_forward(men_input, params, training)
    warped = apply_transform(frames[:, n - 1], transform)
    pred_frame = stpn_forward(frames, warped, params, training)
    return pred_frame, pred_flow, transform


def _frame_to_intensity(frame: np.ndarray) -> np.ndarray:
    """Grayscale for flow estimation; non-RGB frames average their channels."""
    if frame.shape[0] == 3:
        return rgb_to_grayscale(frame)
    return np.clip(frame.mean(axis=0), 0.0, 1.0)


def rollout(
    frames,
    flows,
    params: ModelParams,
    k: int,
    flow_source: str = "model",
    training: bool = False,
    hs_smoothness: float = 0.01,
    hs_iterations: int = 200,
    return_flows: bool = False,
):
    """Autoregressive k-step prediction; returns the k predicted frames.

    After each step the oldest frame and flow leave the window, the
    predicted frame enters, and the flow window grows by either the
    model's own flow forecast ("model") or a Horn-Schunck estimate
    between the last two frames of the new window ("estimate").  With
    ``return_flows`` the per-step flow maps fed back into the window are
    returned as a second list.
    """
    if k < 1:
        raise ValueError("rollout requires k >= 1")
    if flow_source not in ("model", "estimate"):
        raise ValueError(f"unknown flow source {flow_source!r}")
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    flows = flows if isinstance(flows, Tensor) else Tensor(flows)

    predictions: list[Tensor] = []
    step_flows: list[np.ndarray] = []
    for _ in range(k):
        pred_frame, pred_flow, _ = predict_next(frames, flows, params, training)
        predictions.append(pred_frame)
        b, n, c, h, w = frames.shape
        last_real = frames.data[:, n - 1]
        frames = Tensor(np.concatenate([frames.data[:, 1:], pred_frame.data[:, None]], axis=1))
        if flow_source == "model":
            new_flow = pred_flow.data
        else:
            maps = []
            for i in range(b):
                est = estimate_flow_horn_schunck(
                    _frame_to_intensity(last_real[i]),
                    _frame_to_intensity(np.clip(pred_frame.data[i], 0.0, 1.0)),
                    smoothness=hs_smoothness,
                    iterations=hs_iterations,
                )
                maps.append(est.to_array())
            new_flow = np.stack(maps)
        step_flows.append(new_flow)
        flows = Tensor(np.concatenate([flows.data[:, 2:], new_flow], axis=1))
    return (predictions, step_flows) if return_flows else predictions

"""Joint end-to-end training with Adam, plus rollout evaluation.

Each step draws a batch with a generator seeded by (seed, step), so a
run is bit-reproducible and a resumed run replays exactly the steps an
uninterrupted one would have taken.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .data import SequenceSample
from .errors import DataError, NumericError
from .flow import estimate_flow_horn_schunck
from .losses import LossWeights, loss_l1, loss_of, loss_st
from .metrics import psnr, ssim
from .model import ModelConfig, ModelParams, _frame_to_intensity, init_params, predict_next, rollout


@dataclass
class AdamState:
    """First and second moment estimates per parameter, plus hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            m={name: np.zeros(t.shape) for name, t in params.tensors.items()},
            v={name: np.zeros(t.shape) for name, t in params.tensors.items()},
            lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
        )


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied in place.

    theta -= lr * m_hat / sqrt(v_hat + epsilon).  Missing gradient
    entries count as zero, so an all-zero step leaves parameters intact
    while still advancing the timestep.
    """
    tensors = params.tensors if isinstance(params, ModelParams) else params
    state.t += 1
    corr1 = 1.0 - state.beta1**state.t
    corr2 = 1.0 - state.beta2**state.t
    for name in sorted(state.m):
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(state.m[name])
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / corr1) / np.sqrt(v / corr2 + state.epsilon)
        tensors[name].data -= state.lr * update
    return state


@dataclass
class TrainConfig:
    """Everything a training run needs besides the data itself."""

    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "rgb"
    n_input: int = 5
    num_classes: int = 0
    channel_scale: Fraction = Fraction(1)
    checkpoint_interval: int = 0  # 0: only on completion
    eval_interval: int = 0  # 0: never during training
    flow_source: str = "dataset"  # dataset | horn_schunck
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    clip_norm: float | None = None
    hs_smoothness: float = 0.01
    hs_iterations: int = 200

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.flow_source not in ("dataset", "horn_schunck"):
            raise ValueError(f"unknown flow source {self.flow_source!r}")
        if not isinstance(self.channel_scale, Fraction):
            self.channel_scale = Fraction(self.channel_scale)
        if self.weights.mode != self.mode:
            self.weights = replace(self.weights, mode=self.mode)

    def model_config(self, height: int, width: int) -> ModelConfig:
        return ModelConfig(
            mode=self.mode,
            n_input=self.n_input,
            num_classes=self.num_classes,
            channel_scale=self.channel_scale,
            height=height,
            width=width,
        )


@dataclass
class TrainLogRow:
    step: int
    loss_of: float
    loss_st: float
    loss_final: float
    wall_ms: float


@dataclass
class TrainResult:
    params: ModelParams
    adam_state: AdamState
    log: list[TrainLogRow]
    eval_reports: list[tuple[int, "EvalReport"]] = field(default_factory=list)


def _estimate_sample_flows(sample: SequenceSample, config: TrainConfig) -> SequenceSample:
    """Replace every flow map (targets included) with a Horn-Schunck estimate."""
    flows = np.empty_like(sample.flows)
    for t in range(sample.flows.shape[0]):
        est = estimate_flow_horn_schunck(
            _frame_to_intensity(sample.frames[t]),
            _frame_to_intensity(sample.frames[t + 1]),
            smoothness=config.hs_smoothness,
            iterations=config.hs_iterations,
        )
        flows[t] = est.to_array()
    return SequenceSample(
        frames=sample.frames, flows=flows, sequence_id=sample.sequence_id, mode=sample.mode
    )


def train(
    samples: Sequence[SequenceSample],
    config: TrainConfig,
    params: ModelParams | None = None,
    adam_state: AdamState | None = None,
    checkpoint_path=None,
    eval_sequences: "Sequence[EvalSequence] | None" = None,
) -> TrainResult:
    """Optimize the joint objective over the samples for config.steps steps.

    Passing a loaded ``params``/``adam_state`` pair resumes at the stored
    timestep and reproduces an uninterrupted run bit for bit.  A
    non-finite loss aborts with a diagnostic naming the offending step.
    With ``eval_sequences`` given and ``eval_interval`` positive, a
    one-step evaluation report is collected every interval.
    """
    if not samples:
        raise DataError("no training samples")
    shape = samples[0].frames.shape
    for s in samples:
        if s.frames.shape != shape:
            raise DataError("training samples must share a common shape")
        if s.n_input != config.n_input:
            raise DataError(
                f"sample window {s.n_input} does not match configured n_input {config.n_input}"
            )
    height, width = shape[2], shape[3]

    if config.flow_source == "horn_schunck":
        samples = [_estimate_sample_flows(s, config) for s in samples]
    if params is None:
        params = init_params(config.seed, config.model_config(height, width))
    if adam_state is None:
        adam_state = AdamState.for_params(
            params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
            epsilon=config.adam_epsilon,
        )

    n = config.n_input
    log: list[TrainLogRow] = []
    eval_reports: list[tuple[int, EvalReport]] = []
    for step in range(adam_state.t, config.steps):
        tic = time.perf_counter()
        rng = np.random.default_rng((config.seed, step))
        picks = rng.integers(0, len(samples), size=config.batch_size)
        frames = np.stack([samples[i].frames for i in picks])
        flows = np.stack([samples[i].flows for i in picks])
        batch = frames.shape[0]

        in_frames = Tensor(frames[:, :n])
        in_flows = Tensor(flows[:, : n - 1].reshape(batch, 2 * (n - 1), height, width))
        target_frame = Tensor(frames[:, n])
        target_flow = Tensor(flows[:, n - 1])

        try:
            pred_frame, pred_flow, _ = predict_next(in_frames, in_flows, params, training=True)
            l_of = loss_of(pred_flow, target_flow)
            if config.mode == "semantic":
                l_st = loss_l1(pred_frame, target_frame)
            else:
                l_st = loss_st(pred_frame, target_frame, config.weights.alpha)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from exc
        total = config.weights.lambda_of * l_of + config.weights.lambda_st * l_st
        if not np.isfinite(total.data):
            raise NumericError(
                f"step {step}: non-finite loss (of={l_of.item()!r}, st={l_st.item()!r})"
            )

        params.zero_grad()
        total.backward()
        grads = {
            name: t.grad for name, t in params.tensors.items() if t.grad is not None
        }
        if config.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > config.clip_norm:
                factor = config.clip_norm / norm
                grads = {name: g * factor for name, g in grads.items()}
        adam_step(params, grads, adam_state)

        wall_ms = (time.perf_counter() - tic) * 1e3
        log.append(TrainLogRow(step, l_of.item(), l_st.item(), total.item(), wall_ms))
        if (
            checkpoint_path is not None
            and config.checkpoint_interval > 0
            and (step + 1) % config.checkpoint_interval == 0
        ):
            save_checkpoint(params, adam_state, checkpoint_path)
        if (
            eval_sequences
            and config.eval_interval > 0
            and (step + 1) % config.eval_interval == 0
        ):
            eval_reports.append((step, evaluate(eval_sequences, params, rollout_k=1)))

    if checkpoint_path is not None:
        save_checkpoint(params, adam_state, checkpoint_path)
    return TrainResult(params=params, adam_state=adam_state, log=log, eval_reports=eval_reports)


def write_train_log(log: Sequence[TrainLogRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        fp.write("step,loss_of,loss_st,loss_final,wall_ms\n")
        for row in log:
            fp.write(
                f"{row.step},{row.loss_of!r},{row.loss_st!r},{row.loss_final!r},{row.wall_ms:.3f}\n"
            )


# ---- evaluation -------------------------------------------------------------


@dataclass
class EvalSequence:
    """A clip long enough to score a k-step rollout against ground truth."""

    sequence_id: str
    frames: np.ndarray  # (T, C, H, W)
    flows: np.ndarray  # (T-1, 2, H, W)


@dataclass
class EvalRow:
    sequence_id: str
    step: int
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mean_psnr: float
    mean_ssim: float

    def to_csv(self, path) -> None:
        """Per-row metrics at 6 decimal places, aggregate row (step 0) last."""
        with open(path, "w", encoding="utf-8") as fp:
            fp.write("sequence_id,step,psnr_db,ssim\n")
            for row in self.rows:
                fp.write(f"{row.sequence_id},{row.step},{row.psnr_db:.6f},{row.ssim:.6f}\n")
            fp.write(f"aggregate,0,{self.mean_psnr:.6f},{self.mean_ssim:.6f}\n")


def evaluate(
    sequences: Sequence[EvalSequence],
    params: ModelParams,
    rollout_k: int = 1,
    flow_source: str = "model",
    predict_fn: Callable | None = None,
) -> EvalReport:
    """Score k rollout steps per sequence with PSNR and SSIM.

    ``predict_fn(frames, flows, k) -> list of (C, H, W) arrays`` may
    replace the model rollout, which keeps the metric plumbing testable
    against known predictions.
    """
    if rollout_k < 1:
        raise ValueError("rollout_k must be >= 1")
    n = params.config.n_input

    if predict_fn is None:

        def predict_fn(frames, flows, k):
            window_frames = frames[None, :n]
            window_flows = flows[: n - 1].reshape(1, 2 * (n - 1), *frames.shape[2:])
            preds = rollout(window_frames, window_flows, params, k, flow_source, training=False)
            return [p.data[0] for p in preds]

    rows: list[EvalRow] = []
    for seq in sequences:
        if seq.frames.shape[0] < n + rollout_k:
            raise DataError(
                f"{seq.sequence_id}: need at least {n + rollout_k} frames "
                f"for a {rollout_k}-step evaluation, have {seq.frames.shape[0]}"
            )
        predictions = predict_fn(seq.frames, seq.flows, rollout_k)
        for j, prediction in enumerate(predictions, start=1):
            truth = seq.frames[n + j - 1]
            rows.append(
                EvalRow(
                    sequence_id=seq.sequence_id,
                    step=j,
                    psnr_db=psnr(prediction, truth, 1.0),
                    ssim=ssim(prediction, truth, 1.0),
                )
            )
    mean_psnr = float(np.mean([r.psnr_db for r in rows]))
    mean_ssim = float(np.mean([r.ssim for r in rows]))
    return EvalReport(rows=rows, mean_psnr=mean_psnr, mean_ssim=mean_ssim)

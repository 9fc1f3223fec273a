"""Training data: synthetic moving shapes with exact flow, frame-dir loading.

Synthetic clips translate rectangles (axis-aligned, coverage-rasterized)
and disks at constant per-shape velocity over a constant or gradient
background.  The ground-truth flow map of step t carries each shape's
velocity on its support in frame t and zeros elsewhere, matching the
backward-warping convention used by the sampler.

Frame directories use binary netpbm containers: P6 for RGB frames, P5
for semantic label maps.  Lexicographic filename order defines time, and
``.flo`` sidecars with matching stems supply precomputed flow.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .flow import read_flo

# palette of shape intensities; all values are multiples of 1/255 so the
# P6 round trip is lossless
_PALETTE = np.array(
    [
        [204, 64, 64],
        [64, 204, 64],
        [64, 64, 204],
        [204, 204, 64],
        [204, 64, 204],
        [64, 204, 204],
    ],
    dtype=np.float64,
) / 255.0
_BACKGROUND = 64.0 / 255.0


@dataclass
class SequenceSample:
    """One training tuple: N input frames + target, N-1 input flows + target."""

    frames: np.ndarray  # (N+1, C, H, W) in [0, 1]
    flows: np.ndarray  # (N, 2, H, W); flows[t] maps frame t to frame t+1
    sequence_id: str = ""
    mode: str = "rgb"

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        self.flows = np.ascontiguousarray(self.flows, dtype=np.float64)
        if self.frames.ndim != 4 or self.flows.ndim != 4 or self.flows.shape[1] != 2:
            raise ShapeError(
                f"sample needs frames (N+1,C,H,W) and flows (N,2,H,W), "
                f"got {self.frames.shape} / {self.flows.shape}"
            )
        if self.flows.shape[0] != self.frames.shape[0] - 1:
            raise ShapeError("sample must hold exactly one flow per frame pair")
        if self.frames.shape[2:] != self.flows.shape[2:]:
            raise ShapeError("frame and flow extents differ")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise DataError("frame values must lie in [0, 1]")
        if self.mode == "semantic":
            sums = self.frames.sum(axis=1)
            if not np.allclose(sums, 1.0, atol=1e-12):
                raise DataError("semantic frames must be one-hot per pixel")

    @property
    def n_input(self) -> int:
        return self.frames.shape[0] - 1


@dataclass
class SyntheticConfig:
    """Geometry and motion parameters of the moving-shapes generator."""

    width: int = 64
    height: int = 32
    num_shapes: int = 1
    shape_kinds: tuple[str, ...] = ("rectangle", "disk")
    speed_range: tuple[int, int] = (1, 2)  # per-component magnitude, px/frame
    background: str = "constant"  # constant | gradient | noise
    n_input: int = 5
    seed: int = 0
    mode: str = "rgb"
    num_classes: int = 0
    allow_subpixel: bool = False

    def __post_init__(self):
        if self.width < 4 or self.height < 4:
            raise ConfigError("canvas must be at least 4x4 pixels")
        if self.num_shapes < 0:
            raise ConfigError("num_shapes must be non-negative")
        if self.n_input < 2:
            raise ConfigError("n_input must be at least 2")
        if self.background not in ("constant", "gradient", "noise"):
            raise ConfigError(f"unknown background {self.background!r}")
        if self.mode not in ("rgb", "semantic"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "semantic" and self.num_classes < 2:
            raise ConfigError("semantic mode needs num_classes >= 2")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ConfigError("speed_range must satisfy 0 <= lo <= hi")
        for kind in self.shape_kinds:
            if kind not in ("rectangle", "disk"):
                raise ConfigError(f"unknown shape kind {kind!r}")

    @property
    def channels(self) -> int:
        return self.num_classes if self.mode == "semantic" else 3


@dataclass
class _Shape:
    kind: str
    x: float  # top-left (rectangle) or center (disk) at frame 0
    y: float
    w: float  # extent; disks use w as diameter
    h: float
    vx: float
    vy: float
    color: np.ndarray = field(default_factory=lambda: _PALETTE[0])
    label: int = 1

    def bbox(self, t: float) -> tuple[float, float, float, float]:
        x = self.x + self.vx * t
        y = self.y + self.vy * t
        return x, y, x + self.w, y + self.h


def _coverage_1d(start: float, extent: float, n: int) -> np.ndarray:
    """Per-cell overlap of the interval [start, start+extent) with unit cells."""
    cells = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(cells + 1.0, start + extent) - np.maximum(cells, start), 0.0, 1.0)


def _shape_coverage(shape: _Shape, t: float, height: int, width: int) -> np.ndarray:
    x, y, _, _ = shape.bbox(t)
    if shape.kind == "rectangle":
        return np.outer(_coverage_1d(y, shape.h, height), _coverage_1d(x, shape.w, width))
    # disk: hard threshold on the center distance
    cx = x + shape.w / 2.0
    cy = y + shape.h / 2.0
    r = shape.w / 2.0
    ys, xs = np.mgrid[0:height, 0:width]
    return (((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2) <= r * r).astype(np.float64)


def _background_canvas(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    c = config.channels
    canvas = np.zeros((c, config.height, config.width))
    if config.mode == "semantic":
        canvas[0] = 1.0  # class 0 everywhere
    elif config.background == "gradient":
        ramp = np.linspace(0.1, 0.4, config.width)
        # snap to the 8-bit grid so the P6 container round-trips exactly
        ramp = np.rint(ramp * 255.0) / 255.0
        canvas[:] = np.broadcast_to(ramp, (config.height, config.width))
    elif config.background == "noise":
        # smooth mid-range static texture (coarse noise upsampled 4x); a
        # flat background would let the warp hide content erasure, which
        # no real scene permits
        ch = max(2, -(-config.height // 4) + 1)
        cw = max(2, -(-config.width // 4) + 1)
        coarse = rng.integers(77, 180, size=(c, ch, cw)) / 255.0
        smooth = resize_bilinear(coarse, config.width, config.height)
        canvas[:] = np.rint(smooth * 255.0) / 255.0
    else:
        canvas[:] = _BACKGROUND
    return canvas


def _place_shapes(config: SyntheticConfig, total_frames: int, rng: np.random.Generator) -> list[_Shape]:
    # greedy placement can paint itself into a corner; restart a few times
    # before declaring the geometry infeasible
    last_error: ConfigError | None = None
    for _ in range(8):
        try:
            return _place_shapes_once(config, total_frames, rng)
        except ConfigError as exc:
            last_error = exc
    raise last_error


def _place_shapes_once(config: SyntheticConfig, total_frames: int, rng: np.random.Generator) -> list[_Shape]:
    shapes: list[_Shape] = []
    span = total_frames - 1
    for s in range(config.num_shapes):
        kind = config.shape_kinds[int(rng.integers(len(config.shape_kinds)))]
        for attempt in range(300):
            # bias toward smaller, slower candidates as attempts accumulate
            shrink = attempt // 75
            w_hi = max(4, max(5, config.width // 4) - 2 * shrink)
            h_hi = max(4, max(5, config.height // 3) - shrink)
            w = float(rng.integers(4, w_hi + 1))
            h = w if kind == "disk" else float(rng.integers(4, h_hi + 1))
            lo, hi = config.speed_range
            hi = max(lo, hi - shrink)
            vx = float(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
            vy = float(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
            if config.allow_subpixel:
                vx += float(rng.uniform(-0.5, 0.5))
                vy += float(rng.uniform(-0.5, 0.5))
            # keep >= 1 px of border for every frame of the clip
            x_lo = 1.0 + max(0.0, -vx * span)
            x_hi = config.width - 1.0 - w - max(0.0, vx * span)
            y_lo = 1.0 + max(0.0, -vy * span)
            y_hi = config.height - 1.0 - h - max(0.0, vy * span)
            if x_hi < x_lo or y_hi < y_lo:
                continue
            x = float(rng.integers(int(np.ceil(x_lo)), int(np.floor(x_hi)) + 1))
            y = float(rng.integers(int(np.ceil(y_lo)), int(np.floor(y_hi)) + 1))
            candidate = _Shape(
                kind=kind,
                x=x,
                y=y,
                w=w,
                h=h,
                vx=vx,
                vy=vy,
                color=_PALETTE[s % len(_PALETTE)],
                label=1 + s % max(1, config.num_classes - 1) if config.mode == "semantic" else 1,
            )
            # reject trajectories whose swept boxes collide with a placed shape
            def swept(sh: _Shape) -> tuple[float, float, float, float]:
                x0, y0, x1, y1 = sh.bbox(0)
                x0e, y0e, x1e, y1e = sh.bbox(span)
                return min(x0, x0e), min(y0, y0e), max(x1, x1e), max(y1, y1e)

            cx0, cy0, cx1, cy1 = swept(candidate)
            if all(
                cx1 <= ox0 or ox1 <= cx0 or cy1 <= oy0 or oy1 <= cy0
                for ox0, oy0, ox1, oy1 in (swept(o) for o in shapes)
            ):
                shapes.append(candidate)
                break
        else:
            raise ConfigError(
                f"could not place shape {s}: geometry infeasible for a "
                f"{config.width}x{config.height} canvas over {total_frames} frames"
            )
    return shapes


def generate_synthetic_clip(config: SyntheticConfig, total_frames: int | None = None):
    """Render a clip of frames plus exact ground-truth flow maps.

    Returns ``(frames, flows)`` with shapes ``(T, C, H, W)`` and
    ``(T-1, 2, H, W)``.  Deterministic for a given config.
    """
    total = config.n_input + 1 if total_frames is None else total_frames
    if total < 2:
        raise ConfigError("a clip needs at least two frames")
    rng = np.random.default_rng(config.seed)
    shapes = _place_shapes(config, total, rng)

    frames = np.empty((total, config.channels, config.height, config.width))
    flows = np.zeros((total - 1, 2, config.height, config.width))
    base = _background_canvas(config, rng)
    for t in range(total):
        canvas = np.array(base)
        for shape in shapes:
            cov = _shape_coverage(shape, float(t), config.height, config.width)
            if config.mode == "semantic":
                mask = cov >= 0.5
                canvas[:, mask] = 0.0
                canvas[shape.label, mask] = 1.0
            else:
                for ch in range(3):
                    canvas[ch] = canvas[ch] * (1.0 - cov) + shape.color[ch] * cov
            if t < total - 1:
                support = cov >= 0.5
                flows[t, 0, support] = shape.vx
                flows[t, 1, support] = shape.vy
        frames[t] = canvas
    return frames, flows


def generate_synthetic_sequence(config: SyntheticConfig) -> SequenceSample:
    """One training tuple straight from the generator."""
    frames, flows = generate_synthetic_clip(config)
    return SequenceSample(
        frames=frames,
        flows=flows,
        sequence_id=f"synthetic-{config.seed}",
        mode=config.mode,
    )


def make_training_tuples(frames, flows, n_input: int = 5) -> list[SequenceSample]:
    """Slide a window of N+1 frames (with aligned flows) over a clip."""
    frames = np.asarray(frames, dtype=np.float64)
    flows = np.asarray(flows, dtype=np.float64)
    total = frames.shape[0]
    if flows.shape[0] != total - 1:
        raise ShapeError(f"need {total - 1} flows for {total} frames, got {flows.shape[0]}")
    if total < n_input + 1:
        return []
    return [
        SequenceSample(
            frames=frames[t : t + n_input + 1],
            flows=flows[t : t + n_input],
            sequence_id=f"tuple-{t}",
        )
        for t in range(total - n_input)
    ]


# ---- netpbm containers -----------------------------------------------------


def _read_pnm_header(blob: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Parse a P5/P6 header, returning magic, width, height, maxval, offset."""
    fields: list[int] = []
    i = 2
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary netpbm file")
    while len(fields) < 3:
        if i >= len(blob):
            raise DataError(f"{path}: truncated netpbm header")
        ch = blob[i : i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        elif ch.isdigit():
            j = i
            while j < len(blob) and blob[j : j + 1].isdigit():
                j += 1
            fields.append(int(blob[i:j]))
            i = j
        else:
            raise DataError(f"{path}: malformed netpbm header")
    w, h, maxval = fields
    if w <= 0 or h <= 0 or maxval != 255:
        raise DataError(f"{path}: unsupported netpbm geometry {w}x{h} maxval {maxval}")
    return magic, w, h, maxval, i + 1  # single whitespace byte after maxval


def write_ppm(path, image) -> None:
    """Write an RGB frame (3, H, W) in [0, 1] as binary P6."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {image.shape}")
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = image.shape[1:]
    with open(path, "wb") as fp:
        fp.write(b"P6\n%d %d\n255\n" % (w, h))
        fp.write(quantized.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a (3, H, W) float array in [0, 1]."""
    blob = Path(path).read_bytes()
    magic, w, h, _, offset = _read_pnm_header(blob, path)
    if magic != b"P6":
        raise DataError(f"{path}: expected P6, found {magic.decode()}")
    body = blob[offset : offset + 3 * w * h]
    if len(body) != 3 * w * h:
        raise DataError(f"{path}: truncated P6 payload")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, values) -> None:
    """Write an integer map (H, W) with values <= 255 as binary P5."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"expected (H, W) map, got {values.shape}")
    if values.min() < 0 or values.max() > 255:
        raise DataError("P5 values must lie in [0, 255]")
    h, w = values.shape
    with open(path, "wb") as fp:
        fp.write(b"P5\n%d %d\n255\n" % (w, h))
        fp.write(values.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into an integer (H, W) map."""
    blob = Path(path).read_bytes()
    magic, w, h, _, offset = _read_pnm_header(blob, path)
    if magic != b"P5":
        raise DataError(f"{path}: expected P5, found {magic.decode()}")
    body = blob[offset : offset + w * h]
    if len(body) != w * h:
        raise DataError(f"{path}: truncated P5 payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.int64)


# ---- resizing and label encoding -------------------------------------------


def resize_bilinear(image, out_width: int, out_height: int) -> np.ndarray:
    """Bilinear resize of (C, H, W) or (H, W) with half-pixel centers."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) or (H, W), got {image.shape}")
    if out_width < 1 or out_height < 1:
        raise ValueError("target size must be positive")
    _, h, w = image.shape

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_coords(h, out_height)
    x0, x1, wx = axis_coords(w, out_width)
    rows = image[:, y0, :] * (1.0 - wy)[None, :, None] + image[:, y1, :] * wy[None, :, None]
    out = rows[:, :, x0] * (1.0 - wx) + rows[:, :, x1] * wx
    return out[0] if squeeze else out


def resize_nearest(values, out_width: int, out_height: int) -> np.ndarray:
    """Nearest-neighbor resize for integer label maps."""
    values = np.asarray(values)
    h, w = values.shape
    ys = np.minimum(((np.arange(out_height) + 0.5) * (h / out_height)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_width) + 0.5) * (w / out_width)).astype(np.int64), w - 1)
    return values[np.ix_(ys, xs)]


def encode_semantic(label_map, num_classes: int) -> np.ndarray:
    """One-hot encode an integer label map to (num_classes, H, W)."""
    labels = np.asarray(label_map)
    if labels.ndim != 2:
        raise ShapeError(f"expected (H, W) labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"labels must lie in [0, {num_classes - 1}], "
            f"found range [{labels.min()}, {labels.max()}]"
        )
    onehot = np.zeros((num_classes,) + labels.shape)
    for k in range(num_classes):
        onehot[k] = labels == k
    return onehot


def decode_semantic(onehot) -> np.ndarray:
    """Per-pixel argmax (lowest class index wins ties)."""
    arr = onehot.data if hasattr(onehot, "data") and isinstance(onehot.data, np.ndarray) else np.asarray(onehot)
    if arr.ndim != 3:
        raise ShapeError(f"expected (num_classes, H, W), got {arr.shape}")
    return np.argmax(arr, axis=0)


# ---- directory loading -------------------------------------------------------


def list_frame_files(path, mode: str = "rgb") -> list[Path]:
    suffix = ".pgm" if mode == "semantic" else ".ppm"
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{path}: not a directory")
    return sorted(p for p in root.iterdir() if p.suffix == suffix)


def load_sequence_dir(
    path,
    resize_to: tuple[int, int] | None = None,
    frame_stride: int = 1,
    mode: str = "rgb",
    num_classes: int = 0,
) -> np.ndarray:
    """Load a frame directory into a (T, C, H, W) array in temporal order.

    ``resize_to`` is (width, height); RGB frames resize bilinearly, label
    maps with nearest neighbor to keep the one-hot invariant.
    """
    if frame_stride < 1:
        raise ValueError("frame_stride must be >= 1")
    files = list_frame_files(path, mode)[::frame_stride]
    if not files:
        raise DataError(f"{path}: no frame files found")
    frames = []
    for file in files:
        if mode == "semantic":
            labels = read_pgm(file)
            if resize_to is not None:
                labels = resize_nearest(labels, resize_to[0], resize_to[1])
            frames.append(encode_semantic(labels, num_classes))
        else:
            image = read_ppm(file)
            if resize_to is not None:
                image = resize_bilinear(image, resize_to[0], resize_to[1])
            frames.append(image)
        if frames[-1].shape != frames[0].shape:
            raise DataError(f"{file}: frame extent {frames[-1].shape} differs from first frame")
    return np.stack(frames)


def load_sidecar_flows(path, mode: str = "rgb", frame_stride: int = 1) -> np.ndarray | None:
    """Load per-pair .flo sidecars named after the earlier frame's stem.

    Returns None unless every needed sidecar exists; sidecars are only
    meaningful at stride 1, where pairs match the files on disk.
    """
    if frame_stride != 1:
        return None
    files = list_frame_files(path, mode)
    flows = []
    for file in files[:-1]:
        sidecar = file.with_suffix(".flo")
        if not sidecar.exists():
            return None
        flows.append(read_flo(sidecar).to_array())
    return np.stack(flows) if flows else None

"""Dense optical flow: Horn-Schunck estimation, .flo storage, color wheels.

Flow convention throughout: ``(u, v)`` is the displacement that carries a
pixel of the earlier frame to its position in the later frame, so
sampling the later frame at ``(x + u, y + v)`` reconstructs the earlier
one (backward warping).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, reshape
from .errors import FormatError, NumericError, ShapeError
from .nn import bilinear_sample

FLO_MAGIC = 202021.25  # float32 whose bytes spell "PIEH"

# classical 8-neighbor average weights: 1/6 edges, 1/12 corners
_AVG_EDGE = 1.0 / 6.0
_AVG_CORNER = 1.0 / 12.0


@dataclass
class FlowField:
    """Per-pixel displacement map between two frames, float32 like .flo."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.ascontiguousarray(self.u, dtype=np.float32)
        self.v = np.ascontiguousarray(self.v, dtype=np.float32)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ShapeError(f"flow components must be equal 2D maps, got {self.u.shape} / {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise NumericError("flow field contains non-finite values")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def to_array(self) -> np.ndarray:
        """(2, H, W) float64 view used by the tensor pipeline."""
        return np.stack([self.u, self.v]).astype(np.float64)

    @classmethod
    def from_array(cls, arr) -> "FlowField":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ShapeError(f"expected (2, H, W) flow array, got {arr.shape}")
        return cls(u=arr[0], v=arr[1])


def rgb_to_grayscale(frame) -> np.ndarray:
    """Luma projection with weights 0.299 / 0.587 / 0.114."""
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) rgb frame, got {data.shape}")
    return 0.299 * data[0] + 0.587 * data[1] + 0.114 * data[2]


def _hs_derivatives(a: np.ndarray, b: np.ndarray):
    """Horn-Schunck 2x2 forward-difference stencils, averaged over both frames."""
    ap = np.pad(a, ((0, 1), (0, 1)), mode="edge")
    bp = np.pad(b, ((0, 1), (0, 1)), mode="edge")
    ix = 0.25 * (
        (ap[:-1, 1:] - ap[:-1, :-1])
        + (ap[1:, 1:] - ap[1:, :-1])
        + (bp[:-1, 1:] - bp[:-1, :-1])
        + (bp[1:, 1:] - bp[1:, :-1])
    )
    iy = 0.25 * (
        (ap[1:, :-1] - ap[:-1, :-1])
        + (ap[1:, 1:] - ap[:-1, 1:])
        + (bp[1:, :-1] - bp[:-1, :-1])
        + (bp[1:, 1:] - bp[:-1, 1:])
    )
    it = 0.25 * (
        (bp[:-1, :-1] - ap[:-1, :-1])
        + (bp[:-1, 1:] - ap[:-1, 1:])
        + (bp[1:, :-1] - ap[1:, :-1])
        + (bp[1:, 1:] - ap[1:, 1:])
    )
    return ix, iy, it


def _neighbor_average(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, 1, mode="edge")
    return _AVG_EDGE * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) + _AVG_CORNER * (
        p[:-2, :-2] + p[:-2, 2:] + p[2:, :-2] + p[2:, 2:]
    )


def _validate_frame_pair(frame_a, frame_b):
    a = frame_a.data if isinstance(frame_a, Tensor) else np.asarray(frame_a, dtype=np.float64)
    b = frame_b.data if isinstance(frame_b, Tensor) else np.asarray(frame_b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"frames must be equal 2D grayscale maps, got {a.shape} / {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericError("non-finite frame values")
    if a.min() < 0.0 or a.max() > 1.0 or b.min() < 0.0 or b.max() > 1.0:
        raise ValueError("frame intensities must lie in [0, 1]")
    return a, b


def estimate_flow_horn_schunck(
    frame_a,
    frame_b,
    smoothness: float = 0.01,
    iterations: int = 200,
    track_energy: bool = False,
):
    """Jacobi iteration of the Horn-Schunck update from zero initial flow.

    ``smoothness`` is the alpha^2 regularizer weight.  With
    ``track_energy=True`` the per-iteration objective values are returned
    alongside the flow for convergence diagnostics.
    """
    a, b = _validate_frame_pair(frame_a, frame_b)
    if smoothness <= 0.0:
        raise ValueError("smoothness must be positive")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    ix, iy, it = _hs_derivatives(a, b)
    denom = smoothness + ix * ix + iy * iy
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    energies = []
    for _ in range(iterations):
        ubar = _neighbor_average(u)
        vbar = _neighbor_average(v)
        shared = (ix * ubar + iy * vbar + it) / denom
        u = ubar - ix * shared
        v = vbar - iy * shared
        if track_energy:
            energies.append(horn_schunck_energy(a, b, u, v, smoothness))
    flow = FlowField(u=u, v=v)
    return (flow, energies) if track_energy else flow


def horn_schunck_energy(frame_a, frame_b, u, v, smoothness: float) -> float:
    """Discrete Horn-Schunck objective: data residual plus smoothness.

    The smoothness term is the neighbor-weighted pairwise roughness that
    the Jacobi update relaxes, so it decreases along the iteration.
    """
    a, b = _validate_frame_pair(frame_a, frame_b)
    ix, iy, it = _hs_derivatives(a, b)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    data = float(((ix * u + iy * v + it) ** 2).sum())

    rough = 0.0
    for f in (u, v):
        p = np.pad(f, 1, mode="edge")
        for dy, dx, w in (
            (-1, 0, _AVG_EDGE),
            (1, 0, _AVG_EDGE),
            (0, -1, _AVG_EDGE),
            (0, 1, _AVG_EDGE),
            (-1, -1, _AVG_CORNER),
            (-1, 1, _AVG_CORNER),
            (1, -1, _AVG_CORNER),
            (1, 1, _AVG_CORNER),
        ):
            shifted = p[1 + dy : 1 + dy + f.shape[0], 1 + dx : 1 + dx + f.shape[1]]
            rough += w * float(((f - shifted) ** 2).sum())
    return data + smoothness * 0.5 * rough


def write_flo(flow: FlowField, path) -> None:
    """Write a Middlebury .flo container (little-endian, float32)."""
    h, w = flow.height, flow.width
    payload = np.empty((h, w, 2), dtype="<f4")
    payload[:, :, 0] = flow.u
    payload[:, :, 1] = flow.v
    with open(path, "wb") as fp:
        fp.write(struct.pack("<f", FLO_MAGIC))
        fp.write(struct.pack("<ii", w, h))
        fp.write(payload.tobytes())


def read_flo(path) -> FlowField:
    """Read a Middlebury .flo container, validating magic and extent."""
    with open(path, "rb") as fp:
        head = fp.read(12)
        if len(head) < 12:
            raise FormatError(f"{path}: truncated .flo header")
        (magic,) = struct.unpack("<f", head[:4])
        if magic != FLO_MAGIC:
            raise FormatError(f"{path}: bad .flo magic {magic!r}")
        w, h = struct.unpack("<ii", head[4:12])
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: invalid .flo dimensions {w}x{h}")
        body = fp.read(8 * w * h)
    if len(body) != 8 * w * h:
        raise FormatError(f"{path}: truncated .flo payload")
    pairs = np.frombuffer(body, dtype="<f4").reshape(h, w, 2)
    return FlowField(u=pairs[:, :, 0], v=pairs[:, :, 1])


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> Tensor:
    """Hue-by-angle, saturation-by-magnitude rendering; zero flow is white."""
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    if max_magnitude <= 0.0:
        max_magnitude = 1.0
    sat = np.clip(mag / max_magnitude, 0.0, 1.0)
    hue = (np.arctan2(v, u) / (2.0 * np.pi)) % 1.0

    h6 = hue * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    frac = h6 - np.floor(h6)
    p = 1.0 - sat
    q = 1.0 - sat * frac
    t = 1.0 - sat * (1.0 - frac)
    one = np.ones_like(sat)
    r = np.choose(sector, [one, q, p, p, t, one])
    g = np.choose(sector, [t, one, one, q, p, p])
    b = np.choose(sector, [p, p, t, one, one, q])
    return Tensor(np.stack([r, g, b]))


def identity_grid(height: int, width: int) -> np.ndarray:
    """(2, H, W) pixel-coordinate grid: channel 0 is x, channel 1 is y."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([xs, ys])


def warp_by_flow(frame, flow: FlowField) -> Tensor:
    """Backward-warp: output(x, y) = frame(x + u, y + v), border-clamped."""
    frame = as_tensor(frame)
    if frame.ndim != 3:
        raise ShapeError(f"expected (C, H, W) frame, got {frame.shape}")
    c, h, w = frame.shape
    if (flow.height, flow.width) != (h, w):
        raise ShapeError(f"flow {flow.height}x{flow.width} does not match frame {h}x{w}")
    coords = Tensor((identity_grid(h, w) + flow.to_array())[None])
    sampled = bilinear_sample(reshape(frame, (1, c, h, w)), coords)
    return reshape(sampled, (c, h, w))

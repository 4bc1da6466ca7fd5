"""Per-element diffusion coefficient fields and edge-local coefficient sampling.

The two deterministic pattern families reconstruct the style of the benchmark
distributions (channels plus U-shaped inclusions, and combs attached to the
interfaces); the random families feed network training.  All geometry
parameters are fractions of the domain side and are snapped to grid cells, so
the same spec paints the same physical regions on refined meshes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import DecomposedMesh, Edge

__all__ = ["CoefficientField", "PatternSpec", "generate", "sample_on_grid"]

KINDS = ("constant", "channels_and_us", "combs", "random_channels", "random_boxes")


@dataclass(frozen=True)
class CoefficientField:
    """Piecewise-constant coefficient, one value per element."""

    values: np.ndarray
    alpha_low: float
    alpha_high: float

    def __post_init__(self):
        if np.any(self.values <= 0):
            raise ValueError("coefficient values must be strictly positive")


@dataclass(frozen=True)
class PatternSpec:
    kind: str
    alpha_low: float = 1.0
    alpha_high: float = 1.0e6
    seed: int | None = None
    # deterministic families (fractions of the domain side unless noted)
    num_channels: int = 2
    channel_width: float = 0.04
    num_us: int = 3
    teeth_per_edge: int = 3
    tooth_width: float = 0.04
    tooth_length: float = 0.6       # fraction of the subdomain size H
    spine_width: float = 0.04
    # random families (sizes in grid cells)
    num_boxes: int = 5
    min_feature_cells: int = 1
    max_feature_cells: int = 6
    quantum: int = 1                # cell quantisation of random positions/sizes

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if self.kind.startswith("random") and self.seed is None:
            raise ValueError(f"pattern kind {self.kind!r} requires a seed")

    def to_dict(self) -> dict:
        return asdict(self)


def _cells_to_elements(cell_high: np.ndarray, spec: PatternSpec) -> np.ndarray:
    vals = np.where(cell_high.ravel(), spec.alpha_high, spec.alpha_low)
    return np.repeat(vals, 2)


def _snap(frac: float, n: int) -> int:
    return int(round(frac * n))


def _paint_rect(mask, x0, y0, w, h):
    n = mask.shape[0]
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x0 + w, n), min(y0 + h, n)
    if x1 > x0 and y1 > y0:
        mask[y0:y1, x0:x1] = True


def _channels_and_us(spec: PatternSpec, mesh: DecomposedMesh) -> np.ndarray:
    n = mesh.n_cells
    hh = mesh.elements_per_subdomain_edge
    ns = mesh.subdomains_per_dim
    w = _snap(spec.channel_width, n)
    if w < 1:
        raise ValueError("channel width below one element")
    mask = np.zeros((n, n), dtype=bool)          # [cy, cx]
    # full-width horizontal channels, spread over the height, avoiding the
    # subdomain corner rows so the interface crossings are edge-interior
    for i in range(spec.num_channels):
        yc = (i + 1) / (spec.num_channels + 1) + 0.31 / ns * (i % 2)
        y0 = _snap(yc, n) - w // 2
        _paint_rect(mask, 0, y0, n, w)
    # U-shaped inclusions straddling vertical interfaces
    for j in range(spec.num_us):
        col = 1 + j % (ns - 1)                   # interface line x = col*hh
        row = j % ns
        x_if = col * hh
        leg_h = _snap(0.55 * hh / n, n) + hh // 2
        span = max(2 * w, hh // 2)
        y0 = row * hh + hh // 4
        _paint_rect(mask, x_if - span, y0, 2 * span, w)              # base
        _paint_rect(mask, x_if - span, y0, w, leg_h)                 # left leg
        _paint_rect(mask, x_if + span - w, y0, w, leg_h)             # right leg
    return mask


def _combs(spec: PatternSpec, mesh: DecomposedMesh) -> np.ndarray:
    n = mesh.n_cells
    hh = mesh.elements_per_subdomain_edge
    ns = mesh.subdomains_per_dim
    wt = _snap(spec.tooth_width, n)
    ws = _snap(spec.spine_width, n)
    if wt < 1 or ws < 1:
        raise ValueError("comb feature width below one element")
    reach = max(1, int(round(spec.tooth_length * hh)))
    mask = np.zeros((n, n), dtype=bool)
    # one comb per vertical interface segment: spine on the left side of the
    # line plus teeth crossing into the right neighbour, asymmetric on purpose
    for col in range(1, ns):
        x_if = col * hh
        for row in range(ns):
            y_lo = row * hh
            _paint_rect(mask, x_if - ws, y_lo + 1, ws, hh - 1)
            for t in range(spec.teeth_per_edge):
                yt = y_lo + 1 + (t * (hh - 2 - wt)) // max(spec.teeth_per_edge - 1, 1)
                _paint_rect(mask, x_if - reach, yt, reach + reach // 2, wt)
    return mask


def _random_channels(spec: PatternSpec, mesh: DecomposedMesh) -> np.ndarray:
    n = mesh.n_cells
    q = spec.quantum
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros((n, n), dtype=bool)
    n_ch = rng.integers(1, spec.num_channels + 1)
    for _ in range(n_ch):
        w = q * int(rng.integers(max(1, spec.min_feature_cells // q),
                                 max(2, spec.max_feature_cells // q + 1)))
        pos = q * int(rng.integers(0, max(1, (n - w) // q + 1)))
        if rng.random() < 0.5:
            _paint_rect(mask, 0, pos, n, w)
        else:
            _paint_rect(mask, pos, 0, w, n)
    return mask


def _random_boxes(spec: PatternSpec, mesh: DecomposedMesh) -> np.ndarray:
    n = mesh.n_cells
    q = spec.quantum
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros((n, n), dtype=bool)
    n_box = rng.integers(1, spec.num_boxes + 1)
    for _ in range(n_box):
        w = q * int(rng.integers(1, max(2, spec.max_feature_cells // q + 1)))
        h = q * int(rng.integers(1, max(2, spec.max_feature_cells // q + 1)))
        x0 = q * int(rng.integers(0, max(1, (n - w) // q + 1)))
        y0 = q * int(rng.integers(0, max(1, (n - h) // q + 1)))
        _paint_rect(mask, x0, y0, w, h)
    return mask


_GENERATORS = {
    "channels_and_us": _channels_and_us,
    "combs": _combs,
    "random_channels": _random_channels,
    "random_boxes": _random_boxes,
}


def generate(spec: PatternSpec, mesh: DecomposedMesh) -> CoefficientField:
    """Paint the pattern onto the mesh; deterministic given (spec, mesh)."""
    if spec.kind == "constant":
        values = np.full(mesh.elements.shape[0], spec.alpha_low)
    else:
        mask = _GENERATORS[spec.kind](spec, mesh)
        values = _cells_to_elements(mask, spec)
    return CoefficientField(values=values, alpha_low=spec.alpha_low,
                            alpha_high=spec.alpha_high)


def sample_on_grid(field: CoefficientField, mesh: DecomposedMesh, edge: Edge,
                   resolution: int = 12) -> np.ndarray:
    """Sample the coefficient on a resolution^2 lattice in each subdomain
    adjacent to `edge`, in the canonical frame (edge vertical, lower-index
    subdomain on the left), scaled by 1/alpha_high.

    Output length is 2*resolution^2 for every mesh size.  The lattice mapping
    is done in exact integer arithmetic with a frame-covariant tie-break, so
    physically rotated configurations sample identically.
    """
    if resolution < 2:
        raise ValueError("sampling resolution must be at least 2")
    hh = mesh.elements_per_subdomain_edge
    n = mesh.n_cells
    r = resolution
    Q = 8 * r * hh                     # fine units per grid cell
    # cell-midpoint offsets (m+1/2)*H/r in fine units, multiples of 4
    offs = (2 * np.arange(r) + 1) * (4 * hh * hh)
    # fixed canonical nudge (+1,+2) resolves on-line and on-diagonal ties
    eta = offs + 2
    nx, ny = edge.normal
    tx, ty = edge.tangent
    ax, ay = edge.anchor

    out = np.empty(2 * r * r)
    for block, sgn in ((0, -1), (1, +1)):          # lo side first (left)
        XI, ETA = np.meshgrid(sgn * offs + 1, eta, indexing="ij")
        PX = ax * Q + XI * nx + ETA * tx
        PY = ay * Q + XI * ny + ETA * ty
        cx, cy = PX // Q, PY // Q
        fx, fy = PX % Q, PY % Q
        upper = fy > fx
        el = 2 * (cy * n + cx) + upper
        out[block * r * r:(block + 1) * r * r] = field.values[el.ravel()]
    return out / field.alpha_high

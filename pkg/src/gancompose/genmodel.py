"""Frozen procedural generators with a StyleGAN-shaped interface.

A generator is fully determined by its :class:`GeneratorSpec`; the weights
are drawn from its seed on first use and never change.  Latents follow
the w+ convention: a shared base code plus one offset per synthesis layer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

ADAPTIVE_TRUNCATION = (
    0.35, 0.25, 0.25, 0.70, 0.75, 0.65, 0.65, 0.40, 0.40,
    0.35, 0.25, 0.15, 0.15, 0.05, 0.05, 0.05, 0.05, 0.05,
)

BASE_RESOLUTION = 4
MARKER_SHARPNESS = 8.0
MARKER_ASPECT = 1.15  # vertical radius / horizontal radius
STYLE_DECAY = 0.85  # per-layer falloff of the style gain


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int
    out_resolution: int = 256
    n_layers: int = 18
    latent_dim: int = 32
    channels: int = 8
    n_markers: int = 1
    color_channels: int = 3
    shift_pattern: float = 1.0   # amplitude of the spatial variation of channel shifts

    def __post_init__(self):
        res = self.out_resolution
        if res < BASE_RESOLUTION or res & (res - 1):
            raise ValueError(f"out_resolution must be a power of two >= 4, got {res}")
        for name in ("n_layers", "latent_dim", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_markers < 0:
            raise ValueError("n_markers must be >= 0")

    @property
    def out_channels(self) -> int:
        return self.color_channels + self.n_markers

    def layer_resolution(self, i: int) -> int:
        return min(BASE_RESOLUTION * 2 ** (i // 2), self.out_resolution)

    def layer_channels(self, i: int) -> int:
        """Feature width of layer i's output; thinner at high resolution."""
        res = self.layer_resolution(i)
        if res <= 64:
            return self.channels
        if res <= 128:
            return max(1, (3 * self.channels) // 4)
        return max(1, self.channels // 2)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GeneratorSpec":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GeneratorSpec":
        return cls.from_json(Path(path).read_text())

    @cached_property
    def weights(self) -> "Weights":
        return Weights.build(self)


def canvas_spec(seed: int = 1, resolution: int = 256, n_markers: int = 1, **kw) -> GeneratorSpec:
    return GeneratorSpec(seed=seed, out_resolution=resolution, n_markers=n_markers, **kw)


def inset_spec(seed: int = 2, resolution: int = 64, **kw) -> GeneratorSpec:
    return GeneratorSpec(seed=seed, out_resolution=resolution, n_markers=0, **kw)


def _smooth_field(rng, c, res, amplitude):
    coarse = rng.normal(size=(c, BASE_RESOLUTION, BASE_RESOLUTION)) * amplitude
    return dc.resize_bilinear(Tensor(coarse), res, res).data


@dataclass
class Weights:
    map1: np.ndarray
    map1_bias: np.ndarray
    map2: np.ndarray
    map2_bias: np.ndarray
    const: np.ndarray
    style: np.ndarray          # (L, 2C, D): channel scales then shifts
    style_gain: np.ndarray     # (L,)
    kernels: list = field(default_factory=list)
    mixes: list = field(default_factory=list)
    bias_fields: list = field(default_factory=list)
    shift_fields: list = field(default_factory=list)
    layer_gain: np.ndarray = None
    to_color: np.ndarray = None
    color_bias: np.ndarray = None
    marker_proj: np.ndarray = None   # (M, 3, 4D)
    marker_bias: np.ndarray = None   # (M, 3)
    marker_layout: np.ndarray = None  # (M, 5): cy, cx, center range, radius, radius range

    @classmethod
    def build(cls, spec: GeneratorSpec) -> "Weights":
        rng = np.random.default_rng([spec.seed, 0x5EED])
        d, c, n = spec.latent_dim, spec.channels, spec.n_layers
        blur = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
        w = cls(
            map1=rng.normal(size=(d, d)) * np.sqrt(2.0 / d),
            map1_bias=rng.normal(size=d) * 0.1,
            map2=rng.normal(size=(d, d)) / np.sqrt(d),
            map2_bias=rng.normal(size=d) * 0.1,
            const=rng.normal(size=(c, BASE_RESOLUTION, BASE_RESOLUTION)),
            style=rng.normal(size=(n, 2 * c, d)) / np.sqrt(d),
            # coarse layers steer more of the image than fine ones
            style_gain=0.5 * STYLE_DECAY ** np.arange(n),
        )
        c_in = c
        for i in range(n):
            c_out = spec.layer_channels(i)
            w.kernels.append(blur[None] + 0.1 * rng.normal(size=(c, 3, 3)))
            q, _ = np.linalg.qr(rng.normal(size=(c, c)))
            w.mixes.append(np.ascontiguousarray(q[:c_out, :c_in]))
            w.bias_fields.append(_smooth_field(rng, c, spec.layer_resolution(i), 0.3)[:c_out].copy())
            w.kernels[-1] = w.kernels[-1][:c_in].copy()
            c_in = c_out
        prng = np.random.default_rng([spec.seed, 0x5EED, 1])
        c_in = c
        for i in range(n):
            res = spec.layer_resolution(i)
            pattern = 1.0 + _smooth_field(prng, c, res, spec.shift_pattern)[:c_in]
            w.shift_fields.append(dc.shift_field(w.kernels[i], pattern, (c_in, res, res)))
            c_in = spec.layer_channels(i)
        w.to_color = 0.6 * rng.normal(size=(spec.color_channels, c_in)) / np.sqrt(c_in)
        w.color_bias = rng.normal(size=spec.color_channels) * 0.2
        m = spec.n_markers
        w.marker_proj = rng.normal(size=(m, 3, 4 * d)) / np.sqrt(4 * d)
        w.marker_bias = rng.normal(size=(m, 3)) * 0.1
        w.marker_layout = _marker_layout(m)
        w.layer_gain = np.ones(n)
        w.layer_gain = _calibrate(spec, w)
        return w


def _marker_layout(m: int) -> np.ndarray:
    if m == 0:
        return np.zeros((0, 5))
    if m == 1:
        return np.array([[0.5, 0.5, 0.2, 0.13, 0.03]])
    rows = np.linspace(0.28, 0.72, m)
    return np.array([[r, 0.5, 0.35 / m, 0.16 / m, 0.03 / m] for r in rows])


def _calibrate(spec: GeneratorSpec, w: Weights) -> np.ndarray:
    """Per-layer output gains that keep activations near unit RMS at the zero code."""
    gains = np.ones(spec.n_layers)
    x = w.const
    for i in range(spec.n_layers):
        c_in = x.shape[0]
        x = _layer(spec, w, i, Tensor(x), np.ones(c_in), np.zeros(c_in), 1.0).data
        gains[i] = 1.0 / np.sqrt(np.mean(x * x) + 1e-12)
        x = x * gains[i]
    return gains


def _layer(spec, w, i, x, scale, shift, gain):
    if i >= 2 and i % 2 == 0 and spec.layer_resolution(i) > x.shape[1]:
        x = dc.upsample_bilinear_2x(x)
    return dc.modconv(x, scale, shift, w.kernels[i], w.mixes[i], w.bias_fields[i], gain,
                      field=w.shift_fields[i])


# ---------------------------------------------------------------------------
# latents


@dataclass
class LayeredLatent:
    """w+ code stored as a base vector plus per-layer offsets.

    Fields hold numpy arrays, or :class:`Tensor` objects while a tape records.
    """
    base: object
    deltas: object

    @classmethod
    def flat(cls, base, n_layers: int) -> "LayeredLatent":
        base = np.array(base, dtype=np.float64)
        return cls(base, np.zeros((n_layers, base.shape[0])))

    def codes(self):
        """Effective per-layer codes, shape (n_layers, latent_dim)."""
        base, deltas = self.base, self.deltas
        if isinstance(base, Tensor) or isinstance(deltas, Tensor):
            return dc.add(dc.reshape(dc.as_tensor(base), (1, -1)), deltas)
        return base[None, :] + deltas

    def copy(self) -> "LayeredLatent":
        return LayeredLatent(np.array(_arr(self.base)), np.array(_arr(self.deltas)))

    def leaves(self) -> "LayeredLatent":
        """Fresh gradient-tracking leaves holding copies of the current values."""
        return LayeredLatent(Tensor(np.array(_arr(self.base)), requires_grad=True),
                             Tensor(np.array(_arr(self.deltas)), requires_grad=True))

    def detach(self) -> "LayeredLatent":
        return LayeredLatent(np.array(_arr(self.base)), np.array(_arr(self.deltas)))

    def vector(self) -> np.ndarray:
        return np.concatenate([_arr(self.base).ravel(), _arr(self.deltas).ravel()])

    @classmethod
    def from_vector(cls, v, n_layers: int, latent_dim: int) -> "LayeredLatent":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:latent_dim].copy(), v[latent_dim:].reshape(n_layers, latent_dim).copy())

    def __eq__(self, other):
        return (isinstance(other, LayeredLatent)
                and np.array_equal(_arr(self.base), _arr(other.base))
                and np.array_equal(_arr(self.deltas), _arr(other.deltas)))


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class AverageLatent:
    w_avg: np.ndarray
    sample_count: int
    seed: int = 0


def _check_dim(v, spec, what):
    if np.shape(v)[-1] != spec.latent_dim:
        raise dc.ShapeError(f"{what}: expected latent_dim {spec.latent_dim}, got {np.shape(v)}")


def map_latent(z, spec: GeneratorSpec) -> np.ndarray:
    """Frozen two-layer z -> w mapping; accepts a vector or a batch of rows."""
    z = np.asarray(z, dtype=np.float64)
    _check_dim(z, spec, "map_latent")
    w = spec.weights
    h = z @ w.map1.T + w.map1_bias
    h = np.where(h > 0, h, 0.2 * h)
    return h @ w.map2.T + w.map2_bias


def average_latent(spec: GeneratorSpec, n_samples: int = 10000, seed: int = 0,
                   chunk: int = 4096) -> AverageLatent:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    total = np.zeros(spec.latent_dim)
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        total += map_latent(rng.standard_normal((k, spec.latent_dim)), spec).sum(axis=0)
        done += k
    return AverageLatent(total / n_samples, n_samples, seed)


def sample_w(spec: GeneratorSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return map_latent(rng.standard_normal(spec.latent_dim), spec)


def truncate(w, t: float, w_avg) -> np.ndarray:
    """Pull ``w`` toward ``w_avg``; t=1 keeps w, t=0 returns w_avg."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"truncation t must lie in [0, 1], got {t}")
    w = np.asarray(w, dtype=np.float64)
    w_avg = np.asarray(w_avg, dtype=np.float64)
    if t == 1.0:
        return w.copy()
    if t == 0.0:
        return np.broadcast_to(w_avg, w.shape).copy()
    return w_avg + t * (w - w_avg)


def truncate_adaptive(w_plus: LayeredLatent, t_vec=ADAPTIVE_TRUNCATION, w_avg=None) -> LayeredLatent:
    """Truncate every layer code with its own factor from ``t_vec``."""
    t = np.asarray(t_vec, dtype=np.float64)
    codes = _arr(w_plus.codes())
    if t.shape != (codes.shape[0],):
        raise ValueError(f"t_vec has {t.size} entries for {codes.shape[0]} layers")
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("every truncation factor must lie in [0, 1]")
    w_avg = np.asarray(w_avg, dtype=np.float64)
    new_codes = w_avg[None, :] + t[:, None] * (codes - w_avg[None, :])
    base = truncate(_arr(w_plus.base), float(t.mean()), w_avg)
    return LayeredLatent(base, new_codes - base[None, :])


def init_latent(mode: str, spec: GeneratorSpec, w_avg, seed: int = 0, alpha: float = 0.5) -> LayeredLatent:
    """Starting point for optimization: the average code or a truncated random one."""
    w_avg = np.asarray(w_avg, dtype=np.float64)
    if mode == "average":
        return LayeredLatent.flat(w_avg, spec.n_layers)
    if mode != "truncated_random":
        raise ValueError(f"unknown init mode {mode!r}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    w_rand = sample_w(spec, seed)
    return LayeredLatent.flat(w_rand * (1.0 - alpha) + w_avg * alpha, spec.n_layers)


# ---------------------------------------------------------------------------
# synthesis


def _modulations(codes, w: Weights, c_ins):
    """(L, 2C) per-layer channel scales and shifts from (L, D) layer codes.

    Row i holds the demodulated scale in columns [0, c_in) and the shift in
    [C, C + c_in); unit RMS scales keep activations from compounding.
    """
    codes = dc.as_tensor(codes)
    style, gain = w.style, w.style_gain
    raw = np.einsum("lcd,ld->lc", style, codes.data) * gain[:, None]
    c = raw.shape[1] // 2
    out = np.zeros_like(raw)
    rms = []
    for i, n in enumerate(c_ins):
        u = raw[i, :n] + 1.0
        r = np.sqrt(np.mean(u * u))
        out[i, :n] = u / r
        out[i, c:c + n] = raw[i, c:c + n]
        rms.append(r)

    def backward(g):
        gs = np.zeros_like(raw)
        for i, n in enumerate(c_ins):
            u, r = raw[i, :n] + 1.0, rms[i]
            gi = g[i, :n]
            gs[i, :n] = gi / r - u * (np.dot(gi, u) / (n * r ** 3))
            gs[i, c:c + n] = g[i, c:c + n]
        return (np.einsum("lc,lcd->ld", gs * gain[:, None], style),)

    return dc._record("modulations", out, (codes,), backward)


def _input_channels(spec: GeneratorSpec) -> list:
    return [spec.channels] + [spec.layer_channels(i) for i in range(spec.n_layers - 1)]


def marker_geometry(w_plus: LayeredLatent, spec: GeneratorSpec):
    """Blob geometry per marker as Tensors (cy, cx, ry, rx), in pixel units."""
    w = spec.weights
    codes = dc.as_tensor(w_plus.codes())
    head = dc.reshape(codes[0:4], (1, -1))
    res = spec.out_resolution
    out = []
    for k in range(spec.n_markers):
        u = dc.tanh(dc.add(dc.reshape(dc.matmul(head, Tensor(w.marker_proj[k].T)), (3,)),
                           w.marker_bias[k]))
        cy0, cx0, crange, r0, rrange = w.marker_layout[k]
        cy = (u[0] * crange + cy0) * res - 0.5
        cx = (u[1] * crange + cx0) * res - 0.5
        rx = (u[2] * rrange + r0) * res
        out.append((cy, cx, rx * MARKER_ASPECT, rx))
    return out


def marker_centers(w_plus: LayeredLatent, spec: GeneratorSpec) -> list:
    """Analytic blob centres (row, col) as floats."""
    return [(float(g[0].data), float(g[1].data)) for g in marker_geometry(w_plus, spec)]


def _marker_channels(w_plus, spec):
    res = spec.out_resolution
    grid = np.arange(res, dtype=np.float64)
    rows = Tensor(grid.reshape(res, 1))
    cols = Tensor(grid.reshape(1, res))
    chans = []
    for cy, cx, ry, rx in marker_geometry(w_plus, spec):
        dy = dc.square(dc.div(dc.sub(rows, cy), ry))
        dx = dc.square(dc.div(dc.sub(cols, cx), rx))
        d2 = dc.add(dy, dx)
        chans.append(dc.sigmoid(dc.mul(dc.sub(1.0, d2), MARKER_SHARPNESS)))
    return chans


def generate(w_plus: LayeredLatent, spec: GeneratorSpec) -> Tensor:
    """Render a (color + marker, R, R) image in [0, 1]."""
    w = spec.weights
    codes = w_plus.codes()
    if np.shape(_arr(codes)) != (spec.n_layers, spec.latent_dim):
        raise dc.ShapeError(
            f"generate: latent codes {np.shape(_arr(codes))} do not match "
            f"({spec.n_layers}, {spec.latent_dim})")
    c = spec.channels
    c_ins = _input_channels(spec)
    mods = _modulations(codes, w, c_ins)
    x = Tensor(w.const)
    for i, n in enumerate(c_ins):
        x = _layer(spec, w, i, x, mods[i, :n], mods[i, c:c + n], w.layer_gain[i])
    y = dc.channel_mix(w.to_color, x) + w.color_bias.reshape(-1, 1, 1)
    img = dc.sigmoid(y)
    if spec.n_markers:
        markers = _marker_channels(w_plus, spec)
        img = dc.concat([img] + [dc.reshape(m, (1, spec.out_resolution, spec.out_resolution))
                                 for m in markers], axis=0)
    return img


def render(w_plus: LayeredLatent, spec: GeneratorSpec) -> np.ndarray:
    """Forward-only convenience wrapper returning a numpy array."""
    return generate(w_plus.detach(), spec).data

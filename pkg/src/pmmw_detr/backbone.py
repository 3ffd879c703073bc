"""Hierarchical coarse-to-fine windowed attention backbone.

Each stage partitions its map into ``window x window`` query windows.  Queries
in a window attend to a fixed key set gathered from ``L`` pooled levels: level
1 is the map itself (pool size 1), coarser levels pool ``n x n`` sub-windows
with a learnable linear kernel.  Each level contributes an ``N^l x N^l``
neighbourhood centred on the window, so every window sees
``N = sum_l (N^l)^2`` keys; cells falling off the map are masked.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module
from .rng import SeededRng
from .tensor import DimensionError, Parameter, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class DcftConfig:
    patch_size: int = 4
    depths: tuple = (1, 1, 2, 1)
    base_channels: int = 32
    window: int = 3
    pool_sizes: tuple = (1, 3, 5, 7)
    region_sizes: tuple = (3, 3, 3, 3)
    mlp_ratio: int = 4

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.pool_sizes = tuple(self.pool_sizes)
        self.region_sizes = tuple(self.region_sizes)
        self.validate()

    def validate(self) -> None:
        if self.patch_size != 4:
            raise ConfigError("patch size is fixed at 4")
        if len(self.depths) != 4 or min(self.depths) < 1:
            raise ConfigError("need four positive stage depths")
        if self.pool_sizes[0] != 1:
            raise ConfigError("the finest pooling level must have size 1")
        if list(self.pool_sizes) != sorted(self.pool_sizes):
            raise ConfigError("pool sizes must be ascending")
        if len(self.region_sizes) != len(self.pool_sizes):
            raise ConfigError("one region size per pooling level")
        if self.window < 1 or min(self.region_sizes) < 1:
            raise ConfigError("window and region sizes must be positive")

    @property
    def channels(self) -> tuple:
        return tuple(self.base_channels * 2 ** i for i in range(4))

    @property
    def levels(self) -> int:
        return len(self.pool_sizes)

    @property
    def num_keys(self) -> int:
        return sum(n * n for n in self.region_sizes)

    @property
    def bias_extent(self) -> int:
        """Per-axis size of the level-1 relative position bias table."""
        return self.window + self.region_sizes[0] - 1


@dataclass
class FeatureMapSet:
    maps: list
    strides: tuple = (8, 16, 32)

    def __post_init__(self):
        if len(self.maps) != len(self.strides):
            raise DimensionError("one stride per feature map")


class MacCounter:
    """Counts multiply-accumulates of pooling and attention score/value products."""

    def __init__(self):
        self.pool = 0
        self.score = 0
        self.value = 0

    @property
    def total(self) -> int:
        return self.pool + self.score + self.value


# ---------------------------------------------------------------------------
# complexity formulas

def complexity_count(pool_sizes, height: int, width: int, channels: int) -> int:
    """(L + sum_l (n^l)^2) * H * W * c."""
    L = len(pool_sizes)
    return (L + sum(n * n for n in pool_sizes)) * height * width * channels


def swin_complexity(window: int, height: int, width: int, channels: int) -> int:
    return (4 * channels + 2 * window * window) * height * width * channels


def vit_complexity(height: int, width: int, channels: int) -> int:
    return (4 * channels + 2 * height * width) * height * width * channels


# ---------------------------------------------------------------------------
# functional pieces

def pad_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    """Edge-replicate the bottom/right borders up to a multiple."""
    h, w = image.shape[:2]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return image
    widths = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, widths, mode="edge")


def patch_embed(image, weight: Tensor, bias: Tensor | None = None, patch: int = 4) -> Tensor:
    """Non-overlapping ``patch x patch`` patches projected by ``weight`` (patch^2, c).

    Extents that are not multiples of ``patch`` are edge-padded first.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.size == 0:
        raise DimensionError("empty image")
    if arr.shape[0] % patch or arr.shape[1] % patch or not isinstance(image, Tensor):
        image = T.Tensor(pad_to_multiple(arr, patch))
    h, w = image.shape
    x = image.reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3)
    x = x.reshape(h // patch, w // patch, patch * patch)
    return T.linear(x, weight, bias)


def gaussian_pool_kernel(n: int) -> np.ndarray:
    """Normalised Gaussian over an ``n x n`` sub-window with sigma = n / 3."""
    sigma = n / 3.0
    r = np.arange(n) - (n - 1) / 2.0
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma * sigma))
    return (g / g.sum()).reshape(n * n, 1)


def pool_subwindows(z: Tensor, n: int, kernel: Tensor | None = None):
    """Pool ``n x n`` sub-windows with a linear kernel (n^2, 1).

    Returns the pooled map (ceil(H/n), ceil(W/n), c) and a validity mask; the
    map is zero-padded up to a multiple of ``n`` first.
    """
    h, w, c = z.shape
    if n > min(h, w):
        raise ConfigError(f"pool size {n} exceeds map extent {h}x{w}")
    if n == 1:
        return z, np.ones((h, w), dtype=bool)
    hp, wp = -(-h // n), -(-w // n)
    valid = np.zeros((hp * n, wp * n), dtype=bool)
    valid[:h, :w] = True
    valid = valid.reshape(hp, n, wp, n).any(axis=(1, 3))
    if hp * n != h or wp * n != w:
        z = T.pad(z, ((0, hp * n - h), (0, wp * n - w), (0, 0)))
    x = z.reshape(hp, n, wp, n, c).transpose(0, 2, 4, 1, 3).reshape(hp, wp, c, n * n)
    if kernel is None:
        kernel = T.Tensor(np.full((n * n, 1), 1.0 / (n * n)))
    return T.matmul(x, kernel).reshape(hp, wp, c), valid


@dataclass
class KeyLayout:
    """Static gather plan for one map size."""

    height: int
    width: int
    windows_y: int
    windows_x: int
    level_shapes: list
    level_offsets: list
    index: np.ndarray = field(repr=False)      # (num_windows, N) rows of the key table
    mask: np.ndarray = field(repr=False)       # (num_windows, N) True where masked
    bias_index: np.ndarray = field(repr=False)  # (window^2, N^1^2) into the level-1 table

    @property
    def num_windows(self) -> int:
        return self.windows_y * self.windows_x


def _region_start(origin: int, window: int, pool: int, region: int) -> int:
    centre = (origin + window / 2.0) / pool
    return int(math.floor(centre)) - region // 2


@functools.lru_cache(maxsize=64)
def key_layout(height: int, width: int, window: int, pool_sizes: tuple, region_sizes: tuple) -> KeyLayout:
    wy, wx = -(-height // window), -(-width // window)
    shapes, offsets, total = [], [], 0
    for n in pool_sizes:
        hl, wl = -(-height // n), -(-width // n)
        shapes.append((hl, wl))
        offsets.append(total)
        total += hl * wl
    dummy = total
    N = sum(r * r for r in region_sizes)
    index = np.full((wy * wx, N), dummy, dtype=np.intp)
    mask = np.ones((wy * wx, N), dtype=bool)
    for iy in range(wy):
        for ix in range(wx):
            row = iy * wx + ix
            col = 0
            for (hl, wl), off, n, r in zip(shapes, offsets, pool_sizes, region_sizes):
                sy = _region_start(iy * window, window, n, r)
                sx = _region_start(ix * window, window, n, r)
                for ky in range(sy, sy + r):
                    for kx in range(sx, sx + r):
                        if 0 <= ky < hl and 0 <= kx < wl:
                            index[row, col] = off + ky * wl + kx
                            mask[row, col] = False
                        col += 1
    # level-1 relative offsets are identical for every window
    r1 = region_sizes[0]
    s = _region_start(0, window, 1, r1)
    lo = s - (window - 1)
    extent = window + r1 - 1
    q = np.arange(window)
    k = s + np.arange(r1)
    dy = (k[None, :] - q[:, None]) - lo                      # (window, r1)
    bias_index = (dy[:, None, :, None] * extent + dy[None, :, None, :])
    bias_index = bias_index.reshape(window * window, r1 * r1)
    return KeyLayout(height, width, wy, wx, shapes, offsets, index, mask, bias_index)


def gather_keys_values(key_levels: list, value_levels: list, layout: KeyLayout, window_index: int):
    """(K_i, V_i, mask) for one query window from per-level (H_l, W_l, c) maps."""
    def table(levels):
        c = levels[0].shape[-1]
        return T.concat([lv.reshape(-1, c) for lv in levels] + [T.zeros((1, c))], axis=0)

    rows = layout.index[window_index]
    return (T.take_rows(table(key_levels), rows), T.take_rows(table(value_levels), rows),
            layout.mask[window_index])


def dcft_attention(q: Tensor, k: Tensor, v: Tensor, bias, mask: np.ndarray | None,
                   counter: MacCounter | None = None) -> Tensor:
    """softmax(q k^T / sqrt(c) + bias) v over the last two axes.

    ``q`` (..., n, c), ``k``/``v`` (..., N, c); ``mask`` (..., N) True where excluded.
    """
    c = q.shape[-1]
    scores = T.matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(c))
    if bias is not None:
        scores = scores + bias
    m = None if mask is None else np.expand_dims(mask, -2)
    attn = T.softmax(scores, axis=-1, mask=m)
    if counter is not None:
        macs = math.prod(q.shape[:-1]) * k.shape[-2] * c
        counter.score += macs
        counter.value += macs
    return T.matmul(attn, v)


# ---------------------------------------------------------------------------
# layers

class DcftAttention(Module):
    def __init__(self, rng: SeededRng, dim: int, cfg: DcftConfig, zero_out: bool = False):
        self.window = cfg.window
        self.pool_sizes = cfg.pool_sizes
        self.region_sizes = cfg.region_sizes
        self.f_q = Linear(rng, dim, dim)
        self.f_k = Linear(rng, dim, dim)
        self.f_v = Linear(rng, dim, dim)
        self.f_p = [Parameter(gaussian_pool_kernel(n)) for n in cfg.pool_sizes[1:]]
        e = cfg.bias_extent
        self.bias_fine = Parameter(np.zeros((e, e)))
        self.bias_coarse = [Parameter(np.zeros(r * r)) for r in cfg.region_sizes[1:]]
        self.proj = Linear(rng, dim, dim, init="zeros" if zero_out else "xavier")

    def active_levels(self, h: int, w: int) -> list:
        """Coarse levels whose pool size fits the map; larger ones are skipped."""
        return [i for i, n in enumerate(self.pool_sizes) if i > 0 and n <= min(h, w)]

    def bias_row(self, layout: KeyLayout, coarse_levels: list) -> Tensor:
        """(window^2, N) additive bias shared by every window."""
        n2 = self.window * self.window
        fine = T.take_rows(self.bias_fine.reshape(-1), layout.bias_index)
        if not coarse_levels:
            return fine
        coarse = T.concat([self.bias_coarse[i - 1] for i in coarse_levels]).reshape(1, -1)
        return T.concat([fine, coarse * T.Tensor(np.ones((n2, 1)))], axis=1)

    def __call__(self, u: Tensor, counter: MacCounter | None = None) -> Tensor:
        h, w, c = u.shape
        n = self.window
        coarse = self.active_levels(h, w)
        layout = key_layout(h, w, n, (1,) + tuple(self.pool_sizes[i] for i in coarse),
                            (self.region_sizes[0],) + tuple(self.region_sizes[i] for i in coarse))
        levels = [u]
        if counter is not None:
            counter.pool += h * w * c
        for i in coarse:
            size = self.pool_sizes[i]
            pooled, _ = pool_subwindows(u, size, self.f_p[i - 1])
            levels.append(pooled)
            if counter is not None:
                hl, wl, _ = pooled.shape
                counter.pool += hl * wl * size * size * c
        table = T.concat([lv.reshape(-1, c) for lv in levels] + [T.zeros((1, c))], axis=0)
        keys = T.take_rows(self.f_k(table), layout.index)       # (nw, N, c)
        values = T.take_rows(self.f_v(table), layout.index)

        q = self.f_q(u)
        hq, wq = layout.windows_y * n, layout.windows_x * n
        if (hq, wq) != (h, w):
            q = T.pad(q, ((0, hq - h), (0, wq - w), (0, 0)))
        q = q.reshape(layout.windows_y, n, layout.windows_x, n, c).transpose(0, 2, 1, 3, 4)
        q = q.reshape(layout.num_windows, n * n, c)

        out = dcft_attention(q, keys, values, self.bias_row(layout, coarse), layout.mask, counter)
        out = out.reshape(layout.windows_y, layout.windows_x, n, n, c).transpose(0, 2, 1, 3, 4)
        out = out.reshape(hq, wq, c)
        if (hq, wq) != (h, w):
            out = out[:h, :w]
        return self.proj(out)


class DcftLayer(Module):
    """Pre-norm layer: z + Attn(LN(z)), then z + MLP(LN(z))."""

    def __init__(self, rng: SeededRng, dim: int, cfg: DcftConfig, zero_out: bool = False):
        self.norm = LayerNorm(dim)
        self.attn = DcftAttention(rng, dim, cfg, zero_out)
        self.ffn = FeedForward(rng, dim, cfg.mlp_ratio, zero_out)

    def __call__(self, z: Tensor, counter: MacCounter | None = None) -> Tensor:
        z = z + self.attn(self.norm(z), counter)
        return self.ffn(z)


class PatchMerge(Module):
    """2x2 neighbourhood concat then linear: halves extent, doubles channels."""

    def __init__(self, rng: SeededRng, dim: int):
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(rng, 4 * dim, 2 * dim)

    def __call__(self, z: Tensor) -> Tensor:
        h, w, c = z.shape
        x = z.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h // 2, w // 2, 4 * c)
        return self.reduce(self.norm(x))


class Backbone(Module):
    def __init__(self, rng: SeededRng, cfg: DcftConfig, zero_out: bool = False):
        self.cfg = cfg
        ch = cfg.channels
        self.embed = Linear(rng, cfg.patch_size ** 2, ch[0])
        self.merges = [PatchMerge(rng, ch[i]) for i in range(3)]
        self.stages = [[DcftLayer(rng, ch[i], cfg, zero_out) for _ in range(cfg.depths[i])]
                       for i in range(4)]
        self.out_norms = [LayerNorm(ch[i]) for i in range(1, 4)]

    def named_parameters(self, prefix: str = ""):
        yield from self.embed.named_parameters(f"{prefix}embed.")
        for i, m in enumerate(self.merges):
            yield from m.named_parameters(f"{prefix}stage{i + 2}.merge.")
        for i, stage in enumerate(self.stages):
            for j, layer in enumerate(stage):
                yield from layer.named_parameters(f"{prefix}stage{i + 1}.layer{j}.")
        for i, m in enumerate(self.out_norms):
            yield from m.named_parameters(f"{prefix}stage{i + 2}.out_norm.")

    def __call__(self, image: np.ndarray, counter: MacCounter | None = None) -> FeatureMapSet:
        img = pad_to_multiple(np.asarray(image), self.cfg.patch_size * 8)
        z = patch_embed(T.Tensor(img), self.embed.weight, self.embed.bias)
        outs = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                z = self.merges[i - 1](z)
            for layer in stage:
                z = layer(z, counter)
            if i > 0:
                outs.append(self.out_norms[i - 1](z))
        return FeatureMapSet(outs)


def plain_config(cfg: DcftConfig) -> DcftConfig:
    """Single-level window attention with the same stage layout (ablation baseline)."""
    return DcftConfig(cfg.patch_size, cfg.depths, cfg.base_channels, cfg.window,
                      (1,), (cfg.window,), cfg.mlp_ratio)


def instrumented_macs(cfg: DcftConfig, height: int, width: int, channels: int, rng: SeededRng) -> int:
    """Run one attention pass on a random map and count its pooling/score/value MACs."""
    counter = MacCounter()
    attn = DcftAttention(rng, channels, cfg)
    with T.no_grad():
        attn(T.Tensor(rng.normal(size=(height, width, channels))), counter)
    return counter.total

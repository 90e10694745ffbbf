"""3D shifted-window attention in numpy, forward and reverse mode.

Token grids are arrays of shape ``(h, w, l, C)``.  Every layer has a
forward function returning ``(out, cache)`` and a matching ``*_vjp`` that
maps an output cotangent to input and parameter cotangents.  No positional
embedding is added after patch embedding; relative-position bias inside
the windows is the only positional signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .volume import VolumeError, make_rng

LN_EPS = 1e-5
MASK_VALUE = -1e9
LEAKY_SLOPE = 0.01
ACTIVATION = f"leaky_relu({LEAKY_SLOPE})"
INIT_RANGE = 0.02
DROPOUT_P = 0.15


# ----------------------------------------------------------------- params


@dataclass
class SwinParams:
    """Learnable tensors of one Swin block (attention + MLP)."""

    heads: int
    window: tuple[int, int, int]
    norm1_g: np.ndarray
    norm1_b: np.ndarray
    qkv_w: np.ndarray
    qkv_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    bias_table: np.ndarray  # (heads, (2Mx-1)(2My-1)(2Mz-1))
    norm2_g: np.ndarray
    norm2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray

    @property
    def channels(self) -> int:
        return self.qkv_w.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("heads", "window")}

    @classmethod
    def init(cls, channels: int, heads: int, window, rng, scale: float = INIT_RANGE, mlp_ratio: int = 4):
        if channels % heads:
            raise VolumeError(f"channels {channels} not divisible by heads {heads}")
        window = tuple(int(m) for m in np.broadcast_to(window, (3,)))
        n_bias = int(np.prod([2 * m - 1 for m in window]))
        hidden = mlp_ratio * channels

        def uni(*shape):
            return rng.uniform(-scale, scale, size=shape)

        return cls(
            heads=heads,
            window=window,
            norm1_g=np.ones(channels),
            norm1_b=np.zeros(channels),
            qkv_w=uni(channels, 3 * channels),
            qkv_b=uni(3 * channels),
            proj_w=uni(channels, channels),
            proj_b=uni(channels),
            bias_table=uni(heads, n_bias),
            norm2_g=np.ones(channels),
            norm2_b=np.zeros(channels),
            fc1_w=uni(channels, hidden),
            fc1_b=uni(hidden),
            fc2_w=uni(hidden, channels),
            fc2_b=uni(channels),
        )

    def zeros_like(self) -> SwinParams:
        return replace(self, **{k: np.zeros_like(v) for k, v in self.arrays().items()})


@dataclass
class BlockDropout:
    """Inverted-dropout masks for one block: attention branch, after fc1, after fc2."""

    attn: np.ndarray | None = None
    fc1: np.ndarray | None = None
    fc2: np.ndarray | None = None

    @classmethod
    def sample(cls, grid, channels: int, hidden: int, p: float, rng) -> BlockDropout:
        if not 0.0 <= p < 1.0:
            raise VolumeError(f"dropout probability must be in [0, 1), got {p}")
        keep = 1.0 - p

        def mask(c):
            return (rng.random(tuple(grid) + (c,)) < keep) / keep

        return cls(mask(channels), mask(hidden), mask(channels))

    @classmethod
    def keep_all(cls, grid, channels: int, hidden: int) -> BlockDropout:
        return cls.sample(grid, channels, hidden, 0.0, make_rng(0))


# ------------------------------------------------------------ primitives


def linear(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, x


def linear_vjp(x, w, gy, has_bias=True):
    gx = gy @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
    gb = gy.reshape(-1, gy.shape[-1]).sum(axis=0) if has_bias else None
    return gx, gw, gb


def layer_norm(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_vjp(cache, gy):
    xhat, inv, g = cache
    c = xhat.shape[-1]
    gxhat = gy * g
    gx = inv / c * (c * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
    flat = lambda a: a.reshape(-1, c)
    return gx, (flat(gy) * flat(xhat)).sum(0), flat(gy).sum(0)


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_relu_vjp(x, gy):
    return np.where(x > 0, gy, LEAKY_SLOPE * gy)


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowPlan:
    grid: tuple[int, int, int]
    padded: tuple[int, int, int]
    window: tuple[int, int, int]  # effective window (clamped to the grid)
    table_window: tuple[int, int, int]  # window the bias table was built for
    shift: tuple[int, int, int]
    mask: np.ndarray | None  # (nW, N, N) additive
    region: np.ndarray  # (nW, N) region id of every token (shift regions)
    rel_index: np.ndarray  # (N, N) flat index into the bias table

    @property
    def n_windows(self) -> int:
        return int(np.prod([p // m for p, m in zip(self.padded, self.window)]))

    @property
    def tokens_per_window(self) -> int:
        return int(np.prod(self.window))


def _to_windows(x, window):
    h, w, l, c = x.shape
    mx, my, mz = window
    x = x.reshape(h // mx, mx, w // my, my, l // mz, mz, c)
    return x.transpose(0, 2, 4, 1, 3, 5, 6).reshape(-1, mx * my * mz, c)


def _from_windows(wins, window, padded):
    mx, my, mz = window
    h, w, l = padded
    c = wins.shape[-1]
    x = wins.reshape(h // mx, w // my, l // mz, mx, my, mz, c)
    return x.transpose(0, 3, 1, 4, 2, 5, 6).reshape(h, w, l, c)


def relative_position_index(window, table_window) -> np.ndarray:
    coords = np.stack(np.meshgrid(*[np.arange(m) for m in window], indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    tx, ty, tz = (2 * m - 1 for m in table_window)
    rel = rel + (np.array(table_window) - 1)[:, None, None]
    return rel[0] * ty * tz + rel[1] * tz + rel[2]


@lru_cache(maxsize=64)
def make_plan(grid, window, shifted: bool) -> WindowPlan:
    grid = tuple(int(g) for g in grid)
    table_window = tuple(int(m) for m in window)
    eff = tuple(min(m, g) for m, g in zip(table_window, grid))
    shift = tuple(m // 2 if (shifted and g > m) else 0 for m, g in zip(table_window, grid))
    padded = tuple(-(-g // m) * m for g, m in zip(grid, eff))

    region = np.zeros(padded, dtype=np.int64)
    for axis, (m, s, n) in enumerate(zip(eff, shift, padded)):
        labels = np.zeros(n, dtype=np.int64)
        if s:
            labels[n - m : n - s] = 1
            labels[n - s :] = 2
        shape = [1, 1, 1]
        shape[axis] = n
        region = region * 3 + labels.reshape(shape)
    valid = np.zeros(padded, dtype=bool)
    valid[: grid[0], : grid[1], : grid[2]] = True
    valid = np.roll(valid, tuple(-s for s in shift), axis=(0, 1, 2))

    region_w = _to_windows(region[..., None], eff)[..., 0]
    valid_w = _to_windows(valid[..., None], eff)[..., 0]
    blocked = (region_w[:, :, None] != region_w[:, None, :]) | ~valid_w[:, None, :]
    mask = np.where(blocked, MASK_VALUE, 0.0) if blocked.any() else None
    rel = relative_position_index(eff, table_window)
    return WindowPlan(grid, padded, eff, table_window, shift, mask, region_w, rel)


def window_partition(tokens, window, shift: str = "none"):
    """Split a token grid into windows; ``shift="half"`` rolls by half a window first.

    Returns ``(windows, plan)`` with ``windows`` of shape ``(nW, N, C)``.
    """
    if shift not in ("none", "half"):
        raise VolumeError(f"shift must be 'none' or 'half', got {shift!r}")
    tokens = np.asarray(tokens, dtype=np.float64)
    plan = make_plan(tuple(tokens.shape[:3]), tuple(np.broadcast_to(window, (3,)).tolist()), shift == "half")
    return _partition_with(tokens, plan), plan


def _partition_with(tokens, plan: WindowPlan):
    pad = [(0, p - g) for p, g in zip(plan.padded, plan.grid)] + [(0, 0)]
    x = np.pad(tokens, pad)
    if any(plan.shift):
        x = np.roll(x, tuple(-s for s in plan.shift), axis=(0, 1, 2))
    return _to_windows(x, plan.window)


def window_reverse(windows, plan: WindowPlan):
    """Inverse of :func:`window_partition` (also its adjoint)."""
    x = _from_windows(windows, plan.window, plan.padded)
    if any(plan.shift):
        x = np.roll(x, plan.shift, axis=(0, 1, 2))
    gx, gy, gz = plan.grid
    return x[:gx, :gy, :gz]


def partition_adjoint(gwindows, plan: WindowPlan):
    return window_reverse(gwindows, plan)


def reverse_adjoint(gtokens, plan: WindowPlan):
    return _partition_with(gtokens, plan)


# -------------------------------------------------------------- attention


def window_attention(windows, params: SwinParams, plan: WindowPlan, return_weights: bool = False):
    """Multi-head ``softmax(Q K^T / sqrt(d) + B + mask) V`` per window, then the output projection."""
    nw, n, c = windows.shape
    h = params.heads
    if c != params.channels or c % h:
        raise VolumeError(f"window channels {c} do not match params ({params.channels}, {h} heads)")
    d = c // h
    if n != plan.tokens_per_window:
        raise VolumeError(f"expected {plan.tokens_per_window} tokens per window, got {n}")
    qkv, _ = linear(windows, params.qkv_w, params.qkv_b)
    qkv = qkv.reshape(nw, n, 3, h, d).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / np.sqrt(d)
    bias = params.bias_table[:, plan.rel_index]  # (h, N, N)
    logits = (q @ k.swapaxes(-1, -2)) * scale + bias[None]
    if plan.mask is not None:
        logits = logits + plan.mask[:, None]
    attn = softmax(logits)
    heads_out = attn @ v  # (nW, h, N, d)
    merged = heads_out.transpose(0, 2, 1, 3).reshape(nw, n, c)
    out, _ = linear(merged, params.proj_w, params.proj_b)
    cache = (windows, q, k, v, attn, merged, scale)
    if return_weights:
        return out, cache, attn
    return out, cache


def window_attention_vjp(cache, gout, params: SwinParams, plan: WindowPlan):
    windows, q, k, v, attn, merged, scale = cache
    nw, n, c = windows.shape
    h = params.heads
    d = c // h
    g = params.zeros_like()
    gmerged, g.proj_w, g.proj_b = linear_vjp(merged, params.proj_w, gout)
    gheads = gmerged.reshape(nw, n, h, d).transpose(0, 2, 1, 3)
    gattn = gheads @ v.swapaxes(-1, -2)
    gv = attn.swapaxes(-1, -2) @ gheads
    glogits = attn * (gattn - (gattn * attn).sum(-1, keepdims=True))
    gq = glogits @ k * scale
    gk = glogits.swapaxes(-1, -2) @ q * scale
    gbias = glogits.sum(axis=0)  # (h, N, N)
    size = params.bias_table.shape[1]
    idx = plan.rel_index.reshape(-1)
    g.bias_table = np.stack([np.bincount(idx, weights=gb.reshape(-1), minlength=size) for gb in gbias])
    gqkv = np.stack([gq, gk, gv]).transpose(1, 3, 0, 2, 4).reshape(nw, n, 3 * c)
    gwin, g.qkv_w, g.qkv_b = linear_vjp(windows, params.qkv_w, gqkv)
    return gwin, g


# ------------------------------------------------------------------ block


def swin_block(z, params: SwinParams, shifted: bool, drop: BlockDropout | None = None):
    """One pre-norm block: attention branch then MLP branch, both residual."""
    plan = make_plan(tuple(z.shape[:3]), params.window, shifted)
    x1, ln1 = layer_norm(z, params.norm1_g, params.norm1_b)
    wins = _partition_with(x1, plan)
    att, att_cache = window_attention(wins, params, plan)
    y = window_reverse(att, plan)
    if drop is not None and drop.attn is not None:
        y = y * drop.attn
    zh = z + y
    x2, ln2 = layer_norm(zh, params.norm2_g, params.norm2_b)
    m1, _ = linear(x2, params.fc1_w, params.fc1_b)
    act = leaky_relu(m1)
    if drop is not None and drop.fc1 is not None:
        act = act * drop.fc1
    m2, _ = linear(act, params.fc2_w, params.fc2_b)
    if drop is not None and drop.fc2 is not None:
        m2 = m2 * drop.fc2
    out = zh + m2
    cache = dict(plan=plan, ln1=ln1, att=att_cache, ln2=ln2, x2=x2, m1=m1, act=act, drop=drop)
    return out, cache


def swin_block_vjp(cache, gout, params: SwinParams):
    plan, drop = cache["plan"], cache["drop"]
    g = params.zeros_like()
    gm2 = gout
    if drop is not None and drop.fc2 is not None:
        gm2 = gm2 * drop.fc2
    gact, g.fc2_w, g.fc2_b = linear_vjp(cache["act"], params.fc2_w, gm2)
    if drop is not None and drop.fc1 is not None:
        gact = gact * drop.fc1
    gm1 = leaky_relu_vjp(cache["m1"], gact)
    gx2, g.fc1_w, g.fc1_b = linear_vjp(cache["x2"], params.fc1_w, gm1)
    gzh_ln, g.norm2_g, g.norm2_b = layer_norm_vjp(cache["ln2"], gx2)
    gzh = gout + gzh_ln
    gy = gzh
    if drop is not None and drop.attn is not None:
        gy = gy * drop.attn
    gatt = reverse_adjoint(gy, plan)
    gwins, ga = window_attention_vjp(cache["att"], gatt, params, plan)
    for name in ("qkv_w", "qkv_b", "proj_w", "proj_b", "bias_table"):
        setattr(g, name, getattr(ga, name))
    gx1 = partition_adjoint(gwins, plan)
    gz_ln, g.norm1_g, g.norm1_b = layer_norm_vjp(cache["ln1"], gx1)
    return gzh + gz_ln, g


def swin_block_pair(z, pair, window=None, drops=None):
    """Regular-window block followed by a shifted-window block."""
    p0, p1 = pair
    if window is not None:
        window = tuple(np.broadcast_to(window, (3,)).tolist())
        p0, p1 = replace(p0, window=window), replace(p1, window=window)
    d0, d1 = drops if drops is not None else (None, None)
    z1, c0 = swin_block(z, p0, False, d0)
    z2, c1 = swin_block(z1, p1, True, d1)
    return z2, (c0, c1, p0, p1)


def swin_block_pair_vjp(cache, gout):
    c0, c1, p0, p1 = cache
    g1, gp1 = swin_block_vjp(c1, gout, p1)
    g0, gp0 = swin_block_vjp(c0, g1, p0)
    return g0, (gp0, gp1)


# -------------------------------------------------------- embed and merge


def _pad_to(x, mult, axes=(0, 1, 2)):
    pad = [(0, 0)] * x.ndim
    for a in axes:
        pad[a] = (0, (-x.shape[a]) % mult)
    return np.pad(x, pad)


def patch_embed(pair, patch: int, weight, bias=None):
    """Project non-overlapping ``2 x P^3`` patches of a (moving, fixed) pair to tokens.

    ``pair`` has shape ``(2, H, W, L)``; dims not divisible by ``patch`` are
    zero-padded on the far faces.  ``weight`` is ``(2 P^3, C)``.
    """
    pair = np.asarray(pair, dtype=np.float64)
    if pair.ndim != 4:
        raise VolumeError(f"patch_embed expects (channels, H, W, L), got {pair.shape}")
    if weight.shape[1] <= 0:
        raise VolumeError("embedding dimension must be positive")
    x = _pad_to(pair, patch, axes=(1, 2, 3))
    ch, hh, ww, ll = x.shape
    p = patch
    patches = x.reshape(ch, hh // p, p, ww // p, p, ll // p, p).transpose(1, 3, 5, 0, 2, 4, 6)
    patches = patches.reshape(hh // p, ww // p, ll // p, ch * p**3)
    tokens, _ = linear(patches, weight, bias)
    return tokens, (patches, pair.shape, x.shape, patch)


def patch_embed_vjp(cache, gtokens, weight):
    patches, in_shape, padded_shape, p = cache
    gpatches, gw, gb = linear_vjp(patches, weight, gtokens)
    ch, hh, ww, ll = padded_shape
    g = gpatches.reshape(hh // p, ww // p, ll // p, ch, p, p, p).transpose(3, 0, 4, 1, 5, 2, 6)
    g = g.reshape(padded_shape)[:, : in_shape[1], : in_shape[2], : in_shape[3]]
    return g, gw, gb


def patch_merge(tokens, reduction):
    """Concatenate each 2x2x2 token group (8C channels) and reduce linearly to ``reduction.shape[1]``."""
    tokens = np.asarray(tokens, dtype=np.float64)
    x = _pad_to(tokens, 2)
    h, w, l, c = x.shape
    groups = x.reshape(h // 2, 2, w // 2, 2, l // 2, 2, c).transpose(0, 2, 4, 1, 3, 5, 6)
    cat = groups.reshape(h // 2, w // 2, l // 2, 8 * c)
    out, _ = linear(cat, reduction)
    return out, (cat, tokens.shape, x.shape)


def patch_merge_vjp(cache, gout, reduction):
    cat, in_shape, padded = cache
    gcat, gw, _ = linear_vjp(cat, reduction, gout, has_bias=False)
    h, w, l, c = padded
    g = gcat.reshape(h // 2, w // 2, l // 2, 2, 2, 2, c).transpose(0, 3, 1, 4, 2, 5, 6).reshape(padded)
    return g[: in_shape[0], : in_shape[1], : in_shape[2]], gw


# ----------------------------------------------------------------- network


@dataclass
class SwinNetParams:
    """Patch embedding, a stack of block pairs and a linear displacement head."""

    patch: int
    embed_w: np.ndarray  # (2 P^3, C)
    embed_b: np.ndarray
    pairs: list  # list of (SwinParams, SwinParams)
    head_w: np.ndarray  # (C, 3 P^3)
    head_b: np.ndarray
    seed: int | None = None

    @property
    def channels(self) -> int:
        return self.embed_w.shape[1]

    @classmethod
    def init(cls, channels=8, heads=2, window=(2, 2, 2), patch=2, n_pairs=1, seed=0,
             scale=INIT_RANGE, in_channels=2):
        rng = make_rng(seed)
        p3 = patch**3
        embed_w = rng.uniform(-scale, scale, (in_channels * p3, channels))
        embed_b = rng.uniform(-scale, scale, channels)
        pairs = [
            (SwinParams.init(channels, heads, window, rng, scale), SwinParams.init(channels, heads, window, rng, scale))
            for _ in range(n_pairs)
        ]
        head_w = rng.uniform(-scale, scale, (channels, 3 * p3))
        head_b = rng.uniform(-scale, scale, 3 * p3)
        return cls(patch, embed_w, embed_b, pairs, head_w, head_b, seed)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        items = [("embed_w", self.embed_w), ("embed_b", self.embed_b)]
        for i, pair in enumerate(self.pairs):
            for j, blk in enumerate(pair):
                items += [(f"pairs.{i}.{j}.{k}", v) for k, v in blk.arrays().items()]
        items += [("head_w", self.head_w), ("head_b", self.head_b)]
        return items

    def scaled(self, factor: float) -> SwinNetParams:
        """Copy with every array multiplied by ``factor`` (``0`` gives the zero network)."""
        out = _map_arrays(self, lambda a: a * factor)
        return out


def _map_arrays(net: SwinNetParams, fn):
    pairs = [tuple(replace(b, **{k: fn(v) for k, v in b.arrays().items()}) for b in pair) for pair in net.pairs]
    return SwinNetParams(net.patch, fn(net.embed_w), fn(net.embed_b), pairs, fn(net.head_w), fn(net.head_b), net.seed)


@dataclass
class SwinTape:
    net: SwinNetParams
    in_shape: tuple
    embed: tuple
    pairs: list = field(default_factory=list)
    head_in: np.ndarray | None = None


def sample_dropout(net: SwinNetParams, token_grid, p: float, rng):
    hidden = net.pairs[0][0].fc1_w.shape[1] if net.pairs else 4 * net.channels
    return [
        tuple(BlockDropout.sample(token_grid, net.channels, hidden, p, rng) for _ in range(2)) for _ in net.pairs
    ]


def token_grid_shape(dims, patch: int):
    return tuple(-(-int(d) // patch) for d in dims)


def swin_forward(net: SwinNetParams, pair, drops=None):
    """Displacement field ``(3, H, W, L)`` predicted from a ``(2, H, W, L)`` input pair."""
    pair = np.asarray(pair, dtype=np.float64)
    z, emb = patch_embed(pair, net.patch, net.embed_w, net.embed_b)
    tape = SwinTape(net, pair.shape, emb)
    for i, blk in enumerate(net.pairs):
        z, cache = swin_block_pair(z, blk, drops=None if drops is None else drops[i])
        tape.pairs.append(cache)
    tape.head_in = z
    out, _ = linear(z, net.head_w, net.head_b)
    p = net.patch
    th, tw, tl = z.shape[:3]
    u = out.reshape(th, tw, tl, 3, p, p, p).transpose(3, 0, 4, 1, 5, 2, 6).reshape(3, th * p, tw * p, tl * p)
    _, hh, ww, ll = pair.shape
    return u[:, :hh, :ww, :ll], tape


def swin_vjp(tape: SwinTape, grad_u):
    """Reverse pass of :func:`swin_forward`: ``(grad_pair, grad_params)``."""
    net = tape.net
    grad_u = np.asarray(grad_u, dtype=np.float64)
    _, hh, ww, ll = tape.in_shape
    if grad_u.shape != (3, hh, ww, ll):
        raise VolumeError(f"grad_u shape {grad_u.shape} does not match recorded output {(3, hh, ww, ll)}")
    p = net.patch
    th, tw, tl = tape.head_in.shape[:3]
    full = np.zeros((3, th * p, tw * p, tl * p))
    full[:, :hh, :ww, :ll] = grad_u
    gout = full.reshape(3, th, p, tw, p, tl, p).transpose(1, 3, 5, 0, 2, 4, 6).reshape(th, tw, tl, 3 * p**3)
    gz, g_head_w, g_head_b = linear_vjp(tape.head_in, net.head_w, gout)
    g_pairs = []
    for cache in reversed(tape.pairs):
        gz, gp = swin_block_pair_vjp(cache, gz)
        g_pairs.append(gp)
    g_pairs.reverse()
    g_pair_in, g_embed_w, g_embed_b = patch_embed_vjp(tape.embed, gz, net.embed_w)
    grads = SwinNetParams(net.patch, g_embed_w, g_embed_b, g_pairs, g_head_w, g_head_b, net.seed)
    return g_pair_in, grads


# ------------------------------------------------------------- persistence


def save_params(net: SwinNetParams, path) -> None:
    """Write ``<path>.bin`` (float64 little-endian, concatenated) and ``<path>.json`` manifest."""
    base = Path(path).with_suffix("")
    entries, offset, chunks = [], 0, []
    for name, arr in net.named_arrays():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
        chunks.append(a.tobytes())
    blk = net.pairs[0][0] if net.pairs else None
    manifest = {
        "format": "f64le",
        "seed": net.seed,
        "patch": net.patch,
        "channels": net.channels,
        "n_pairs": len(net.pairs),
        "heads": blk.heads if blk else None,
        "window": list(blk.window) if blk else None,
        "activation": ACTIVATION,
        "layer_norm_eps": LN_EPS,
        "positional_embedding": None,
        "entries": entries,
    }
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    base.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_params(path) -> SwinNetParams:
    base = Path(path).with_suffix("")
    manifest = json.loads(base.with_suffix(".json").read_text())
    blob = base.with_suffix(".bin").read_bytes()
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 8 * count
        if end > len(blob):
            raise VolumeError(f"parameter blob truncated at {e['name']}")
        arrays[e["name"]] = np.frombuffer(blob[e["offset"] : end], dtype="<f8").reshape(e["shape"]).copy()
    pairs = []
    for i in range(manifest["n_pairs"]):
        blocks = []
        for j in range(2):
            prefix = f"pairs.{i}.{j}."
            kw = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            blocks.append(SwinParams(heads=manifest["heads"], window=tuple(manifest["window"]), **kw))
        pairs.append(tuple(blocks))
    return SwinNetParams(
        manifest["patch"], arrays["embed_w"], arrays["embed_b"], pairs, arrays["head_w"], arrays["head_b"],
        manifest["seed"],
    )

"""1-D neighborhood attention.

Two forward/backward implementations of the same math:

* ``*_naive``: one query at a time (a vector-matrix product per position),
  written directly from the windowed-attention definition.  It is the oracle.
* ``*_blocked``: queries are grouped into tiles of ``M`` rows; for each tile
  the contiguous run of ``ceil((M+W-1)/N)*N`` key columns covering the
  union of its windows is loaded and multiplied as ``M x N x K`` blocks.
  Lanes that fall outside a query's window are computed and thrown away,
  which is exactly what :func:`effective_ratio` accounts for.

Arrays are laid out ``[..., T, d]``: any leading axes (batch, heads) are
independent.  Logits are ``scale * q . k`` with ``scale = 1/sqrt(d)``.

In ``padded`` mode both ends of K and V get ``W // 2`` zero frames, so every
window stays centred and border queries see zero keys (logit 0) in the
softmax.  In ``clamped`` mode the window is shifted to lie inside the
sequence, which needs ``T >= W``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ContractError

PADDED = "padded"
CLAMPED = "clamped"


@dataclass(frozen=True)
class TileShape:
    M: int = 16
    N: int = 8
    K: int = 16

    def __post_init__(self):
        if min(self.M, self.N, self.K) <= 0:
            raise ConfigError(f"tile extents must be positive, got {self}")

    @classmethod
    def parse(cls, text: str) -> "TileShape":
        """Parse ``"16x8x16"``."""
        try:
            m, n, k = (int(p) for p in text.lower().split("x"))
        except ValueError:
            raise ConfigError(f"tile must look like MxNxK, got {text!r}") from None
        return cls(m, n, k)

    def __str__(self):
        return f"{self.M}x{self.N}x{self.K}"


@dataclass(frozen=True)
class NaConfig:
    window: int = 27
    heads: int = 16
    channels: int = 256
    padding_mode: str = PADDED
    scale: float | None = None

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be a positive odd integer, got {self.window}")
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.padding_mode not in (PADDED, CLAMPED):
            raise ConfigError(f"padding_mode must be 'padded' or 'clamped', got {self.padding_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def logit_scale(self) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(self.head_dim)


def effective_ratio(M: int, N: int, W: int) -> Fraction:
    """Share of useful multiply-adds when a W-wide window is computed with
    M x N tiles: ``W / (ceil((M + W - 1) / N) * N)``."""
    if min(M, N, W) <= 0:
        raise ContractError(f"effective_ratio needs positive M, N, W; got {M}, {N}, {W}")
    return Fraction(W, span_columns(M, N, W))


def span_columns(M: int, N: int, W: int) -> int:
    """Key columns loaded per query tile (a whole number of N-blocks)."""
    return -(-(M + W - 1) // N) * N


def tile_plan(T: int, W: int, head_dim: int, tile: TileShape) -> dict:
    """Multiply-add accounting of the blocked logit product for one head."""
    n_tiles = -(-T // tile.M)
    span = span_columns(tile.M, tile.N, W)
    k_pad = -(-head_dim // tile.K) * tile.K
    return {
        "tiles": n_tiles,
        "span": span,
        "n_blocks": span // tile.N,
        "k_chunks": k_pad // tile.K,
        "useful_macs": T * W * head_dim,
        "computed_macs": n_tiles * tile.M * span * k_pad,
        "ratio": effective_ratio(tile.M, tile.N, W),
    }


def _validate(q, k, v, cfg: NaConfig):
    if q.ndim < 3:
        raise ContractError(f"expected [..., heads, T, d] arrays, got shape {q.shape}")
    if q.shape != k.shape or q.shape != v.shape:
        raise ContractError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    heads, T, d = q.shape[-3:]
    if heads != cfg.heads or d * heads != cfg.channels:
        raise ConfigError(
            f"head layout {heads}x{d} does not match config heads={cfg.heads}, channels={cfg.channels}")
    if T < 1:
        raise ContractError("sequence must have at least one frame")
    if cfg.padding_mode == CLAMPED and T < cfg.window:
        raise ContractError(f"clamped mode needs T >= W, got T={T}, W={cfg.window}")
    return T


def window_starts(T: int, W: int, mode: str) -> np.ndarray:
    """First key index of each query's window.

    Padded mode indexes the padded sequence (so the start is just ``t``);
    clamped mode indexes the raw sequence.
    """
    t = np.arange(T)
    if mode == PADDED:
        return t
    return np.clip(t - W // 2, 0, T - W)


def _pad_time(x, r):
    if r == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[-2] = (r, r)
    return np.pad(x, widths)


def _sources(k, v, cfg):
    r = cfg.window // 2 if cfg.padding_mode == PADDED else 0
    return _pad_time(k, r), _pad_time(v, r), r


def _softmax_last(x):
    # a running elementwise max beats ndarray.max over a short last axis
    m = x[..., 0].copy()
    for i in range(1, x.shape[-1]):
        np.maximum(m, x[..., i], out=m)
    z = x - m[..., None]
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _softmax_backward(attn, dattn):
    return attn * (dattn - (attn * dattn).sum(axis=-1, keepdims=True))


# ------------------------------------------------------------------ naive

def na_forward_naive(q, k, v, cfg: NaConfig):
    """Reference implementation; returns ``(out, attn)`` with attn ``[..., T, W]``."""
    T = _validate(q, k, v, cfg)
    W = cfg.window
    scale = q.dtype.type(cfg.logit_scale)
    ks, vs, _ = _sources(k, v, cfg)
    starts = window_starts(T, W, cfg.padding_mode)

    logits = np.empty(q.shape[:-1] + (W,), dtype=q.dtype)
    for t in range(T):
        s = starts[t]
        logits[..., t, :] = np.einsum("...d,...wd->...w", q[..., t, :], ks[..., s:s + W, :]) * scale
    attn = _softmax_last(logits)

    out = np.empty_like(q)
    for t in range(T):
        s = starts[t]
        out[..., t, :] = np.einsum("...w,...wd->...d", attn[..., t, :], vs[..., s:s + W, :])
    return out, attn


def na_backward_naive(grad_out, q, k, v, attn, cfg: NaConfig):
    T = _validate(q, k, v, cfg)
    if grad_out.shape != q.shape or attn.shape != q.shape[:-1] + (cfg.window,):
        raise ContractError(
            f"backward shapes do not match forward: grad {grad_out.shape}, attn {attn.shape}")
    W = cfg.window
    scale = q.dtype.type(cfg.logit_scale)
    ks, vs, r = _sources(k, v, cfg)
    starts = window_starts(T, W, cfg.padding_mode)

    dattn = np.empty_like(attn)
    dvs = np.zeros_like(vs)
    for t in range(T):
        s = starts[t]
        dattn[..., t, :] = np.einsum("...d,...wd->...w", grad_out[..., t, :], vs[..., s:s + W, :])
        dvs[..., s:s + W, :] += attn[..., t, :, None] * grad_out[..., t, None, :]
    dlogits = _softmax_backward(attn, dattn) * scale

    dq = np.empty_like(q)
    dks = np.zeros_like(ks)
    for t in range(T):
        s = starts[t]
        dq[..., t, :] = np.einsum("...w,...wd->...d", dlogits[..., t, :], ks[..., s:s + W, :])
        dks[..., s:s + W, :] += dlogits[..., t, :, None] * q[..., t, None, :]
    # gradient that landed on the zero padding is discarded
    return dq, dks[..., r:r + T, :], dvs[..., r:r + T, :]


# ------------------------------------------------------------------ blocked

class _Tiling:
    """Index bookkeeping shared by the blocked forward and backward."""

    def __init__(self, T, W, d, tile: TileShape):
        self.T, self.W, self.d, self.tile = T, W, d, tile
        self.r = W // 2
        self.Tp = T + 2 * self.r
        self.n_tiles = -(-T // tile.M)
        self.span = span_columns(tile.M, tile.N, W)
        self.rows = self.n_tiles * tile.M
        # keys needed by the last tile may run past the padded sequence
        self.key_len = (self.n_tiles - 1) * tile.M + self.span
        self.d_pad = -(-d // tile.K) * tile.K

    def pad_queries(self, x):
        out = np.zeros(x.shape[:-2] + (self.rows, self.d_pad), dtype=x.dtype)
        out[..., :self.T, :self.d] = x
        return out.reshape(x.shape[:-2] + (self.n_tiles, self.tile.M, self.d_pad))

    def key_tiles(self, x):
        """``[..., T, d]`` -> ``[..., n_tiles, d_pad, span]`` overlapping key
        runs, as a read-only strided view (no copy)."""
        ext = np.zeros(x.shape[:-2] + (self.key_len, self.d_pad), dtype=x.dtype)
        ext[..., self.r:self.r + self.T, :self.d] = x
        view = np.lib.stride_tricks.sliding_window_view(ext, self.span, axis=-2)
        return view[..., ::self.tile.M, :, :]

    def fold_keys(self, tiles):
        """Overlap-add ``[..., n_tiles, span, d_pad]`` back onto ``[..., T, d]``."""
        ext = np.zeros(tiles.shape[:-3] + (self.key_len, self.d_pad), dtype=tiles.dtype)
        M = self.tile.M
        for i in range(self.n_tiles):
            ext[..., i * M:i * M + self.span, :] += tiles[..., i, :, :]
        return np.ascontiguousarray(ext[..., self.r:self.r + self.T, :self.d])

    def unpad_queries(self, x):
        x = x.reshape(x.shape[:-3] + (self.rows, self.d_pad))
        return np.ascontiguousarray(x[..., :self.T, :self.d])

    def _band_view(self, full):
        # element (i, i + w) of each M x span tile, as a strided view
        *lead, m, span = full.shape
        st = full.strides
        return np.lib.stride_tricks.as_strided(
            full, shape=(*lead, m, self.W), strides=(*st[:-2], st[-2] + st[-1], st[-1]))

    def gather_band(self, full):
        return np.array(self._band_view(np.ascontiguousarray(full)))

    def scatter_band(self, band_vals):
        """Inverse of :meth:`gather_band`; every lane outside the window, and
        every filler query row past ``T``, is left at zero."""
        full = np.zeros(band_vals.shape[:-1] + (self.span,), dtype=band_vals.dtype)
        self._band_view(full)[...] = band_vals
        tail = self.rows - self.T
        if tail:
            full[..., -1, self.tile.M - tail:, :] = 0
        return full

    def band_rows(self, x):
        """``[..., n_tiles, M, W]`` -> ``[..., T, W]``."""
        x = x.reshape(x.shape[:-3] + (self.rows, self.W))
        return np.ascontiguousarray(x[..., :self.T, :])

    def tile_rows(self, x):
        """``[..., T, W]`` -> ``[..., n_tiles, M, W]`` with zero filler rows."""
        out = np.zeros(x.shape[:-2] + (self.rows, self.W), dtype=x.dtype)
        out[..., :self.T, :] = x
        return out.reshape(x.shape[:-2] + (self.n_tiles, self.tile.M, self.W))


def _block_product(a, b, tile: TileShape):
    """``a @ b`` for ``[..., M, Kp] @ [..., Kp, S]``, accumulated K-chunk by
    K-chunk.  The S axis is ``S // N`` adjacent N-wide blocks; BLAS handles
    them in one call since they share the A operand."""
    out = None
    for k0 in range(0, a.shape[-1], tile.K):
        part = a[..., k0:k0 + tile.K] @ b[..., k0:k0 + tile.K, :]
        out = part if out is None else out + part
    return out


def na_forward_blocked(q, k, v, cfg: NaConfig, tile: TileShape = TileShape()):
    """Tiled GEMM forward; padded mode only.  Returns ``(out, attn)``."""
    if cfg.padding_mode != PADDED:
        raise ContractError("blocked kernel supports padded mode only")
    T = _validate(q, k, v, cfg)
    tl = _Tiling(T, cfg.window, q.shape[-1], tile)
    scale = q.dtype.type(cfg.logit_scale)

    qt = tl.pad_queries(q)                       # [..., tiles, M, Kp]
    kt = tl.key_tiles(k)                         # [..., tiles, Kp, span]
    vt = tl.key_tiles(v)
    scores = _block_product(qt, kt, tile) * scale    # [..., tiles, M, span]
    logits = tl.gather_band(scores)              # redundant lanes dropped here
    attn_t = _softmax_last(logits)
    probs = tl.scatter_band(attn_t)              # [..., tiles, M, span]
    out_t = probs @ np.swapaxes(vt, -1, -2)      # [..., tiles, M, Kp]
    return tl.unpad_queries(out_t), tl.band_rows(attn_t)


def na_backward_blocked(grad_out, q, k, v, attn, cfg: NaConfig, tile: TileShape = TileShape()):
    if cfg.padding_mode != PADDED:
        raise ContractError("blocked kernel supports padded mode only")
    T = _validate(q, k, v, cfg)
    if grad_out.shape != q.shape or attn.shape != q.shape[:-1] + (cfg.window,):
        raise ContractError(
            f"backward shapes do not match forward: grad {grad_out.shape}, attn {attn.shape}")
    tl = _Tiling(T, cfg.window, q.shape[-1], tile)
    scale = q.dtype.type(cfg.logit_scale)

    qt = tl.pad_queries(q)
    kt = tl.key_tiles(k)
    vt = tl.key_tiles(v)
    gt = tl.pad_queries(grad_out)
    attn_t = tl.tile_rows(attn)
    probs = tl.scatter_band(attn_t)

    dprobs = gt @ vt                             # [..., tiles, M, span]
    dattn = tl.gather_band(dprobs)
    dlogits = _softmax_backward(attn_t, dattn) * scale
    dscores = tl.scatter_band(dlogits)
    dq = _block_product(dscores, np.swapaxes(kt, -1, -2), tile)  # [..., tiles, M, Kp]
    dk = np.swapaxes(dscores, -1, -2) @ qt                       # [..., tiles, span, Kp]
    dv = np.swapaxes(probs, -1, -2) @ gt
    return tl.unpad_queries(dq), tl.fold_keys(dk), tl.fold_keys(dv)


def na_forward(q, k, v, cfg: NaConfig, tile: TileShape | None = None):
    """Dispatch: blocked kernel for padded mode, naive otherwise."""
    if cfg.padding_mode == PADDED:
        return na_forward_blocked(q, k, v, cfg, tile or TileShape())
    return na_forward_naive(q, k, v, cfg)


def na_backward(grad_out, q, k, v, attn, cfg: NaConfig, tile: TileShape | None = None):
    if cfg.padding_mode == PADDED:
        return na_backward_blocked(grad_out, q, k, v, attn, cfg, tile or TileShape())
    return na_backward_naive(grad_out, q, k, v, attn, cfg)

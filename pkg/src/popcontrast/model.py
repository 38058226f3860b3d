"""Permutation-equivariant spatiotemporal transformer encoder.

Each neuron's patched activity is projected to tokens, refined by
temporal self-attention (per neuron, with rotary time embeddings) and
spatial self-attention (per patch index, across neurons, no positional
information), then mean-pooled over time into one vector per neuron.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import ndtri

from . import numerics as nx
from .data import PatchedView
from .errors import EmptyView, IndexOutOfRange, OddHeadDim, ShapeMismatch
from .numerics import ParamSet, Tensor
from .rng import RngStream


@dataclass
class EncoderConfig:
    d: int = 256
    heads: int = 4
    l_t: int = 2
    l_st: int = 2
    f: int = 50  # features per patch (bins or samples)
    p: int = 10  # patches per window
    linear_dropout: float = 0.2
    attention_dropout: float = 0.0
    rotary_t_min_s: float = 1.0
    rotary_t_max_s: float = 80.0
    layer_norm_eps: float = 1e-5
    variant: str = "full"  # "full" or "no_spatial"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ShapeMismatch(f"d={self.d} not divisible by heads={self.heads}")
        if (self.d // self.heads) % 2 != 0 or self.d // self.heads < 2:
            raise OddHeadDim(f"head dim {self.d // self.heads} must be even and >= 2")
        if self.variant not in ("full", "no_spatial"):
            raise ValueError(f"unknown variant {self.variant}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def layer_kinds(self) -> list[str]:
        """Sub-layer schedule; no_spatial swaps every spatial slot for temporal."""
        if self.variant == "no_spatial":
            return ["temporal"] * (self.l_t + 2 * self.l_st)
        return ["temporal"] * self.l_t + ["spatial", "temporal"] * self.l_st

    @property
    def n_sublayers(self) -> int:
        return self.l_t + 2 * self.l_st

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _trunc_normal(rng: RngStream, shape, std: float) -> np.ndarray:
    """Normal(0, std^2) truncated at +-2 std, via inverse-CDF sampling."""
    from scipy.special import ndtr

    lo, hi = ndtr(-2.0), ndtr(2.0)
    u = rng.uniform(lo, hi, size=shape)
    return ndtri(u) * std


def init_params(
    config: EncoderConfig, rng: RngStream, dtype=np.float32
) -> ParamSet:
    """Initialize all encoder and projection-head parameters."""
    d, f = config.d, config.f
    hidden = 4 * d
    std = 0.02
    # residual-branch output projections start smaller for stable deep stacks
    out_std = std / math.sqrt(2.0 * max(1, config.n_sublayers))
    params = ParamSet()

    def add(name, shape, s=std):
        params.add(name, _trunc_normal(rng.derive("init", name), shape, s).astype(dtype))

    def add_zeros(name, shape):
        params.add(name, np.zeros(shape, dtype=dtype))

    def add_ones(name, shape):
        params.add(name, np.ones(shape, dtype=dtype))

    add("embed.w", (f, d))
    add_zeros("embed.b", (d,))
    for i in range(config.n_sublayers):
        pre = f"layer.{i:02d}."
        add_ones(pre + "ln1.g", (d,))
        add_zeros(pre + "ln1.b", (d,))
        for nm in ("attn.wq", "attn.wk", "attn.wv"):
            add(pre + nm, (d, d))
        add(pre + "attn.wo", (d, d), out_std)
        for nm in ("attn.bq", "attn.bk", "attn.bv", "attn.bo"):
            add_zeros(pre + nm, (d,))
        add_ones(pre + "ln2.g", (d,))
        add_zeros(pre + "ln2.b", (d,))
        add(pre + "ffn.wa", (d, hidden))
        add(pre + "ffn.wb", (d, hidden))
        add(pre + "ffn.wo", (hidden, d), out_std)
        add_zeros(pre + "ffn.ba", (hidden,))
        add_zeros(pre + "ffn.bb", (hidden,))
        add_zeros(pre + "ffn.bo", (d,))
    add_ones("final_ln.g", (d,))
    add_zeros("final_ln.b", (d,))
    # the projection head is not a residual branch: fan-in scaling keeps its
    # outputs at O(1) norm, so the cosine similarities in the loss are driven
    # by the weights rather than by tiny drifts of the output bias (near-zero
    # projection norms make the bias dominate and collapse the loss)
    head_std = 1.0 / math.sqrt(d)
    add("head.w1", (d, d), head_std)
    add_zeros("head.b1", (d,))
    add("head.w2", (d, d), head_std)
    add_zeros("head.b2", (d,))
    return params


# -- rotary time embedding -------------------------------------------------


def rotary_angles(
    timestamps_s: np.ndarray, head_dim: int, t_min: float, t_max: float
) -> np.ndarray:
    """Angle table (L, head_dim/2): omega_i * t with geometrically spaced periods."""
    if head_dim % 2 != 0 or head_dim < 2:
        raise OddHeadDim(f"head dim {head_dim} must be even and >= 2")
    n_pairs = head_dim // 2
    if n_pairs == 1:
        periods = np.array([t_min])
    else:
        ratio = (t_max / t_min) ** (1.0 / (n_pairs - 1))
        periods = t_min * ratio ** np.arange(n_pairs)
    omega = 2.0 * math.pi / periods
    return np.asarray(timestamps_s)[:, None] * omega[None, :]


def _rotate_pairs(xd: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x1 = xd[..., 0::2]
    x2 = xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def rotary_rotate(x: Tensor, angles: np.ndarray, sign: float = 1.0) -> Tensor:
    """Rotate consecutive dimension pairs of (..., L, head_dim) by per-token angles."""
    a = (sign * angles).astype(x.dtype)
    cos, sin = np.cos(a), np.sin(a)
    out = _rotate_pairs(x.data, cos, sin)
    # rotations are orthogonal: the vjp rotates the gradient back by -angle
    return Tensor(out, _parents=(x,), _vjp=lambda g: (_rotate_pairs(g, cos, -sin),))


# -- forward pass ----------------------------------------------------------


def _dropout(x: Tensor, p: float, mode: str, rng: RngStream | None) -> Tensor:
    if mode != "train" or p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask


def _attention_sublayer(
    x: Tensor,
    params: ParamSet,
    prefix: str,
    config: EncoderConfig,
    angles: np.ndarray | None,
    mode: str,
    rng: RngStream | None,
) -> Tensor:
    """Pre-norm multi-head self-attention with residual.

    `x` is (B, L, D); attention runs over L. When `angles` is given,
    queries/keys/values are rotated by token time and the output is
    counter-rotated by query time (value rotation).
    """
    b, length, d = x.shape
    h, dh = config.heads, config.head_dim
    xn = nx.layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"],
                       config.layer_norm_eps)

    def heads_of(t):
        return t.reshape(b, length, h, dh).transpose(0, 2, 1, 3)

    q = heads_of(nx.matmul(xn, params[prefix + "attn.wq"]) + params[prefix + "attn.bq"])
    k = heads_of(nx.matmul(xn, params[prefix + "attn.wk"]) + params[prefix + "attn.bk"])
    v = heads_of(nx.matmul(xn, params[prefix + "attn.wv"]) + params[prefix + "attn.bv"])
    if angles is not None:
        q = rotary_rotate(q, angles)
        k = rotary_rotate(k, angles)
        v = rotary_rotate(v, angles)
    out = nx.attention(q, k, v)
    if angles is not None:
        out = rotary_rotate(out, angles, sign=-1.0)
    out = out.transpose(0, 2, 1, 3).reshape(b, length, d)
    out = nx.matmul(out, params[prefix + "attn.wo"]) + params[prefix + "attn.bo"]
    out = _dropout(out, config.linear_dropout, mode, rng)
    return x + out


def _ffn_sublayer(
    x: Tensor, params: ParamSet, prefix: str, config: EncoderConfig,
    mode: str, rng: RngStream | None,
) -> Tensor:
    xn = nx.layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"],
                       config.layer_norm_eps)
    gate = nx.gelu(nx.matmul(xn, params[prefix + "ffn.wa"]) + params[prefix + "ffn.ba"])
    value = nx.matmul(xn, params[prefix + "ffn.wb"]) + params[prefix + "ffn.bb"]
    hidden = _dropout(gate * value, config.linear_dropout, mode, rng)
    return x + nx.matmul(hidden, params[prefix + "ffn.wo"]) + params[prefix + "ffn.bo"]


def embed_patches(view: PatchedView, params: ParamSet, dtype=None) -> Tensor:
    """Linear projection of each patch into the token dimension."""
    w = params["embed.w"]
    if view.patches.shape[-1] != w.shape[0]:
        raise ShapeMismatch(
            f"patch feature size {view.patches.shape[-1]} != embed input {w.shape[0]}"
        )
    x = nx.tensor(view.patches.astype(dtype or w.dtype))
    return nx.matmul(x, w) + params["embed.b"]


def _run_layers(
    view: PatchedView,
    params: ParamSet,
    config: EncoderConfig,
    mode: str,
    rng: RngStream | None,
    stop_after: int | None = None,
) -> Tensor:
    if view.patches.shape[0] == 0 or view.patches.shape[1] == 0:
        raise EmptyView("cannot encode a view with no neurons or no patches")
    if mode == "train" and rng is None:
        raise ValueError("train mode requires an rng stream")
    rel_t = view.patch_timestamps_s - view.window_start_s
    angles = rotary_angles(
        rel_t, config.head_dim, config.rotary_t_min_s, config.rotary_t_max_s
    )
    grid = embed_patches(view, params)  # (N, P, D)
    if stop_after == 0:
        return grid
    for i, kind in enumerate(config.layer_kinds):
        prefix = f"layer.{i:02d}."
        if kind == "temporal":
            grid = _attention_sublayer(grid, params, prefix, config, angles, mode, rng)
            grid = _ffn_sublayer(grid, params, prefix, config, mode, rng)
        else:
            grid = grid.transpose(1, 0, 2)  # (P, N, D): attend across neurons
            grid = _attention_sublayer(grid, params, prefix, config, None, mode, rng)
            grid = _ffn_sublayer(grid, params, prefix, config, mode, rng)
            grid = grid.transpose(1, 0, 2)
        if stop_after == i + 1:
            return grid
    return grid


def _spatial_sublayer_grouped(
    x: Tensor,
    sizes: list[int],
    params: ParamSet,
    prefix: str,
    config: EncoderConfig,
    mode: str,
    rng: RngStream | None,
) -> Tensor:
    """Spatial attention over a concatenated (sum N, P, D) grid of views.

    Views with equal neuron counts are processed in one attention call;
    rows are gathered per group and scattered back afterwards.
    """
    p = x.shape[1]
    d = x.shape[2]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    groups: dict[int, list[int]] = {}
    for vi, n in enumerate(sizes):
        groups.setdefault(n, []).append(vi)
    perm_parts = []
    outs = []
    for n in sorted(groups):
        vis = groups[n]
        idx = np.concatenate(
            [np.arange(offsets[vi], offsets[vi] + n) for vi in vis]
        )
        perm_parts.append(idx)
        v = len(vis)
        sub = x[idx]  # (v*n, P, D)
        sub = sub.reshape(v, n, p, d).transpose(0, 2, 1, 3).reshape(v * p, n, d)
        sub = _attention_sublayer(sub, params, prefix, config, None, mode, rng)
        sub = sub.reshape(v, p, n, d).transpose(0, 2, 1, 3).reshape(v * n, p, d)
        outs.append(sub)
    merged = nx.concat(outs, axis=0)
    inv = np.argsort(np.concatenate(perm_parts))
    return merged[inv]


def encode_batch(
    views: list[PatchedView],
    params: ParamSet,
    config: EncoderConfig,
    mode: str = "eval",
    rng: RngStream | None = None,
) -> Tensor:
    """Encode several views jointly; returns their representations stacked.

    Mathematically identical to per-view `encode`: temporal and FFN
    sub-layers act on each neuron/token independently, so independent
    views share one concatenated pass; spatial attention stays scoped to
    each view's own neurons. All views must share the patch layout.
    """
    if not views:
        raise EmptyView("no views to encode")
    for view in views:
        if view.patches.shape[0] == 0 or view.patches.shape[1] == 0:
            raise EmptyView("cannot encode a view with no neurons or no patches")
        if view.patches.shape[1] != views[0].patches.shape[1]:
            raise ShapeMismatch("views in a batch must share the patch count")
    if mode == "train" and rng is None:
        raise ValueError("train mode requires an rng stream")
    rel_t = views[0].patch_timestamps_s - views[0].window_start_s
    angles = rotary_angles(
        rel_t, config.head_dim, config.rotary_t_min_s, config.rotary_t_max_s
    )
    sizes = [view.patches.shape[0] for view in views]
    w = params["embed.w"]
    flat = np.concatenate([view.patches for view in views], axis=0)
    x = nx.matmul(nx.tensor(flat.astype(w.dtype)), w) + params["embed.b"]
    for i, kind in enumerate(config.layer_kinds):
        prefix = f"layer.{i:02d}."
        if kind == "temporal":
            x = _attention_sublayer(x, params, prefix, config, angles, mode, rng)
        else:
            x = _spatial_sublayer_grouped(x, sizes, params, prefix, config, mode, rng)
        x = _ffn_sublayer(x, params, prefix, config, mode, rng)
    x = nx.layer_norm(
        x, params["final_ln.g"], params["final_ln.b"], config.layer_norm_eps
    )
    return x.mean(axis=1)


def encode(
    view: PatchedView,
    params: ParamSet,
    config: EncoderConfig,
    mode: str = "eval",
    rng: RngStream | None = None,
) -> Tensor:
    """Map a patched view to one representation per neuron (N x D)."""
    grid = _run_layers(view, params, config, mode, rng)
    grid = nx.layer_norm(
        grid, params["final_ln.g"], params["final_ln.b"], config.layer_norm_eps
    )
    return grid.mean(axis=1)


def encode_with_tap(
    view: PatchedView,
    params: ParamSet,
    config: EncoderConfig,
    layer_index: int,
) -> Tensor:
    """Mean-pooled tokens at an intermediate layer (0 = after patch embedding)."""
    n_layers = len(config.layer_kinds)
    if layer_index < 0 or layer_index > n_layers:
        raise IndexOutOfRange(f"layer_index {layer_index} outside [0, {n_layers}]")
    if layer_index == n_layers:
        return encode(view, params, config, mode="eval")
    grid = _run_layers(view, params, config, "eval", None, stop_after=layer_index)
    return grid.mean(axis=1)


def project_head(y: Tensor, params: ParamSet) -> Tensor:
    """Projection MLP used only by the training loss."""
    hidden = nx.gelu(nx.matmul(y, params["head.w1"]) + params["head.b1"])
    return nx.matmul(hidden, params["head.w2"]) + params["head.b2"]

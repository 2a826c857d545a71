"""Miniature audio-visual encoders, pooling functions and projection heads.

The visual trunk is a stack of factorized space+time convolution blocks
(a 2-D convolution shared across frames, a nonlinearity, then a 1-D
convolution over time). Temporal aggregation is either plain averaging
or a shallow masked transformer; both consume the spatially pooled
``(N, D, T)`` sequence and emit one D-vector per instance.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .tensor import (
    ShapeError,
    Tensor,
    _apply,
    concat,
    masked_softmax,
    matmul,
    relu,
)

__all__ = [
    "EncoderConfig",
    "AudioConfig",
    "TransformerConfig",
    "Conv2Plus1d",
    "VisualEncoder",
    "AudioEncoder",
    "TransformerPool",
    "ProjectionHead",
    "AVModel",
    "conv2d",
    "conv1d",
    "linear",
    "layer_norm",
    "spatial_pool",
    "temporal_avg_pool",
    "multihead_attention",
    "check_time_mask",
    "sinusoidal_positions",
    "desk_visual_config",
    "paper_shape_visual_config",
]


# ---------------------------------------------------------------------------
# tape ops for the convolution kernels
# ---------------------------------------------------------------------------

def conv2d(x, w, stride=1, pad=None):
    """Spatial convolution. x (B,C,H,W), w (O,C,KH,KW) -> (B,O,Ho,Wo)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: ranks {x.ndim}/{w.ndim}, need 4/4")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channels {x.shape} vs {w.shape}")
    if pad is None:
        pad = w.shape[2] // 2
    h, wid = x.shape[2], x.shape[3]
    kh, kw = w.shape[2], w.shape[3]
    out = K.conv2d_fwd(x.data, w.data, stride, pad)
    need_x, need_w = x.needs_grad(), w.needs_grad()

    def bwd(g):
        gx = K.conv2d_bwd_x(g, w.data, stride, pad, h, wid) if need_x else None
        gw = K.conv2d_bwd_w(g, x.data, stride, pad, kh, kw) if need_w else None
        return (gx, gw)

    return _apply(out, (x, w), bwd)


def conv1d(x, w, stride=1, pad=None):
    """Temporal convolution. x (B,C,T,M), w (O,C,KT) -> (B,O,To,M)."""
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(f"conv1d: ranks {x.ndim}/{w.ndim}, need 4/3")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: channels {x.shape} vs {w.shape}")
    if pad is None:
        pad = w.shape[2] // 2
    t, kt = x.shape[2], w.shape[2]
    out = K.conv1d_fwd(x.data, w.data, stride, pad)
    need_x, need_w = x.needs_grad(), w.needs_grad()

    def bwd(g):
        gx = K.conv1d_bwd_x(g, w.data, stride, pad, t) if need_x else None
        gw = K.conv1d_bwd_w(g, x.data, stride, pad, kt) if need_w else None
        return (gx, gw)

    return _apply(out, (x, w), bwd)


def linear(x, w, b=None):
    """x (..., in) @ w (in, out) + b."""
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis; no cross-batch state."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / ((var + eps) ** 0.5) * gain + bias


def standardize(x, axis, eps=1e-8):
    """Zero-mean unit-variance over `axis`, per sample; no learned state.

    Encoder outputs carry a large component shared by every input; left
    in place it swamps the fixed positional encodings and pins all
    cosine similarities at 1, which kills the contrastive gradient.
    """
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    return xc / ((var + eps) ** 0.5)


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

def _conv_grid(extent, kernels, strides):
    for k, s in zip(kernels, strides):
        extent = K.conv_out_len(extent, k, s, k // 2)
    return extent


@dataclass
class EncoderConfig:
    """Stage layout of the visual trunk plus its shape contract.

    The stride/kernel arithmetic must map `ref_input` (T0, H0, W0)
    exactly onto `grid` (T1, H1, W1); this is checked at construction.
    """

    in_channels: int = 3
    widths: tuple = (16, 32, 64)
    spatial_strides: tuple = (2, 2, 2)
    temporal_strides: tuple = (1, 1, 2)
    temporal_kernels: tuple = (1, 1, 1)
    spatial_kernel: int = 3
    ref_input: tuple = (8, 56, 56)
    grid: tuple = None

    def __post_init__(self):
        n = len(self.widths)
        if not (len(self.spatial_strides) == len(self.temporal_strides)
                == len(self.temporal_kernels) == n):
            raise ValueError("stage lists must have equal length")
        t0, h0, w0 = self.ref_input
        sk = [self.spatial_kernel] * n
        computed = (
            _conv_grid(t0, self.temporal_kernels, self.temporal_strides),
            _conv_grid(h0, sk, self.spatial_strides),
            _conv_grid(w0, sk, self.spatial_strides),
        )
        if self.grid is None:
            self.grid = computed
        elif tuple(self.grid) != computed:
            raise ValueError(
                f"encoder grid {tuple(self.grid)} does not match the stride "
                f"arithmetic of ref_input {self.ref_input}, which gives {computed}"
            )

    @property
    def feature_dim(self):
        return self.widths[-1]


def desk_visual_config():
    return EncoderConfig()


def paper_shape_visual_config():
    """Full-size shape contract: 30-frame 112x112 input -> 512 x 4 x 7 x 7."""
    return EncoderConfig(
        in_channels=3,
        widths=(64, 128, 256, 512),
        spatial_strides=(2, 2, 2, 2),
        temporal_strides=(1, 2, 2, 2),
        temporal_kernels=(3, 3, 3, 3),
        ref_input=(30, 112, 112),
        grid=(4, 7, 7),
    )


@dataclass
class AudioConfig:
    in_channels: int = 1
    widths: tuple = (16, 32, 64)
    strides: tuple = (2, 2, 2)
    kernel: int = 3
    ref_input: tuple = (32, 32)  # (F, T_a)

    def __post_init__(self):
        if len(self.widths) != len(self.strides):
            raise ValueError("stage lists must have equal length")
        f, ta = self.ref_input
        ks = [self.kernel] * len(self.widths)
        self.grid = (_conv_grid(f, ks, self.strides), _conv_grid(ta, ks, self.strides))

    @property
    def feature_dim(self):
        return self.widths[-1]


@dataclass
class TransformerConfig:
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ff_dim: int = 0  # 0 -> 2 * model_dim
    aggregation: str = "mean"  # mean over unmasked | "summary" token

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.ff_dim == 0:
            self.ff_dim = 2 * self.model_dim
        if self.aggregation not in ("mean", "summary"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


# ---------------------------------------------------------------------------
# parameter helpers
# ---------------------------------------------------------------------------

def _init(rng, shape, fan_in):
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Minimal parameter container with stable names."""

    def named_parameters(self):
        out = OrderedDict()
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
        return out

    def parameters(self):
        return list(self.named_parameters().values())


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class Conv2Plus1d(Module):
    """Factorized block: spatial 2-D conv, relu, temporal 1-D conv."""

    def __init__(self, cin, cout, spatial_stride, temporal_stride,
                 spatial_kernel, temporal_kernel, rng):
        self.spatial_stride = spatial_stride
        self.temporal_stride = temporal_stride
        self.ws = _init(rng, (cout, cin, spatial_kernel, spatial_kernel),
                        cin * spatial_kernel * spatial_kernel)
        self.bs = _zeros((cout,))
        self.wt = _init(rng, (cout, cout, temporal_kernel), cout * temporal_kernel)
        self.bt = _zeros((cout,))

    def __call__(self, x):
        # x (N, C, T, H, W)
        if x.ndim != 5:
            raise ShapeError(f"conv2plus1d: input rank {x.ndim}, need 5")
        n, c, t, h, w = x.shape
        flat = x.transpose(0, 2, 1, 3, 4).reshape(n * t, c, h, w)
        y = conv2d(flat, self.ws, stride=self.spatial_stride)
        y = y + self.bs.reshape(1, -1, 1, 1)
        y = relu(y)
        _, cm, h1, w1 = y.shape
        y = y.reshape(n, t, cm, h1, w1).transpose(0, 2, 1, 3, 4)
        y = y.reshape(n, cm, t, h1 * w1)
        y = conv1d(y, self.wt, stride=self.temporal_stride)
        y = y + self.bt.reshape(1, -1, 1, 1)
        t1 = y.shape[2]
        return y.reshape(n, y.shape[1], t1, h1, w1)


def _ensure_batched(x, rank):
    if isinstance(x, np.ndarray):
        x = Tensor(x)
    if x.ndim == rank:
        return x.reshape((1,) + x.shape), True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"input rank {x.ndim}, need {rank} or {rank + 1}")


class VisualEncoder(Module):
    """Maps (N, 3, T0, H0, W0) clips to (N, D, T1, H1, W1) feature maps."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        widths = (cfg.in_channels,) + tuple(cfg.widths)
        self.stages = [
            Conv2Plus1d(widths[i], widths[i + 1], cfg.spatial_strides[i],
                        cfg.temporal_strides[i], cfg.spatial_kernel,
                        cfg.temporal_kernels[i], rng)
            for i in range(len(cfg.widths))
        ]

    def __call__(self, x):
        x, squeeze = _ensure_batched(x, 4)
        expected = (self.cfg.in_channels,) + tuple(self.cfg.ref_input)
        if x.shape[1:] != expected:
            raise ShapeError(f"visual input {x.shape[1:]} != configured {expected}")
        for stage in self.stages:
            x = relu(stage(x))
        if squeeze:
            return x.reshape(x.shape[1:])
        return x


class AudioEncoder(Module):
    """Maps (N, 1, F, T_a) spectrograms to (N, D); pooling is global average."""

    def __init__(self, cfg: AudioConfig, rng):
        self.cfg = cfg
        widths = (cfg.in_channels,) + tuple(cfg.widths)
        self.weights = []
        self.biases = []
        for i in range(len(cfg.widths)):
            self.weights.append(_init(rng, (widths[i + 1], widths[i], cfg.kernel, cfg.kernel),
                                      widths[i] * cfg.kernel * cfg.kernel))
            self.biases.append(_zeros((widths[i + 1],)))

    def named_parameters(self):
        out = OrderedDict()
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def __call__(self, a):
        a, squeeze = _ensure_batched(a, 3)
        expected = (self.cfg.in_channels,) + tuple(self.cfg.ref_input)
        if a.shape[1:] != expected:
            raise ShapeError(f"audio input {a.shape[1:]} != configured {expected}")
        x = a
        for w, b, s in zip(self.weights, self.biases, self.cfg.strides):
            x = relu(conv2d(x, w, stride=s) + b.reshape(1, -1, 1, 1))
        pooled = x.mean(axis=(2, 3))
        if squeeze:
            return pooled.reshape(pooled.shape[1:])
        return pooled


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def spatial_pool(feat):
    """(N, D, T, H, W) -> (N, D, T) by averaging each spatial grid."""
    feat, squeeze = _ensure_batched(feat, 4)
    out = feat.mean(axis=(3, 4))
    if squeeze:
        return out.reshape(out.shape[1:])
    return out


def temporal_avg_pool(h):
    """(N, D, T) -> (N, D); order-blind by construction."""
    h, squeeze = _ensure_batched(h, 2)
    out = h.mean(axis=2)
    if squeeze:
        return out.reshape(out.shape[1:])
    return out


def check_time_mask(mask, length):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (length,):
        raise ShapeError(f"time mask shape {mask.shape}, need ({length},)")
    if not mask.any():
        raise ValueError("time mask must keep at least one position")
    return mask


def sinusoidal_positions(positions, dim):
    """Fixed encoding rows for integer `positions` (any shape) -> (*shape, dim)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * (np.arange(half) / max(half, 1)))
    ang = positions[..., None] * freqs
    pe = np.zeros(positions.shape + (dim,))
    pe[..., 0 : 2 * half : 2] = np.sin(ang)
    pe[..., 1 : 2 * half : 2] = np.cos(ang)
    return pe


def multihead_attention(q, k, v, mask, num_heads, return_weights=False):
    """Scaled dot-product attention; masked keys get exactly zero weight.

    q, k, v: (T, d) or (N, T, d) tensors with matching d; mask is a
    boolean key mask of length T_k.
    """
    q, sq = _ensure_batched(q, 2)
    k, _ = _ensure_batched(k, 2)
    v, _ = _ensure_batched(v, 2)
    n, tq, d = q.shape
    tk = k.shape[1]
    if d % num_heads:
        raise ShapeError(f"dim {d} not divisible by {num_heads} heads")
    mask = check_time_mask(mask, tk)
    dh = d // num_heads

    def split(x, t):
        return x.reshape(n, t, num_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q, tq), split(k, tk), split(v, tk)
    logits = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    weights = masked_softmax(logits, mask.reshape(1, 1, 1, tk), axis=-1)
    out = matmul(weights, vh).transpose(0, 2, 1, 3).reshape(n, tq, d)
    if sq:
        out = out.reshape(tq, d)
    if return_weights:
        return out, weights.data
    return out


class _EncoderLayer(Module):
    """Pre-norm transformer encoder layer."""

    def __init__(self, dim, ff_dim, num_heads, rng):
        self.num_heads = num_heads
        self.ln1_g, self.ln1_b = _ones((dim,)), _zeros((dim,))
        self.wq, self.bq = _init(rng, (dim, dim), dim), _zeros((dim,))
        self.wk, self.bk = _init(rng, (dim, dim), dim), _zeros((dim,))
        self.wv, self.bv = _init(rng, (dim, dim), dim), _zeros((dim,))
        self.wo, self.bo = _init(rng, (dim, dim), dim), _zeros((dim,))
        self.ln2_g, self.ln2_b = _ones((dim,)), _zeros((dim,))
        self.w1, self.b1 = _init(rng, (dim, ff_dim), dim), _zeros((ff_dim,))
        self.w2, self.b2 = _init(rng, (ff_dim, dim), ff_dim), _zeros((dim,))

    def __call__(self, x, mask):
        h = layer_norm(x, self.ln1_g, self.ln1_b)
        q = linear(h, self.wq, self.bq)
        k = linear(h, self.wk, self.bk)
        v = linear(h, self.wv, self.bv)
        att = multihead_attention(q, k, v, mask, self.num_heads)
        x = x + linear(att, self.wo, self.bo)
        h = layer_norm(x, self.ln2_g, self.ln2_b)
        x = x + linear(relu(linear(h, self.w1, self.b1)), self.w2, self.b2)
        return x


class TransformerPool(Module):
    """Masked transformer replacing plain temporal averaging.

    Adds fixed sinusoidal encodings at the absolute time positions of the
    (possibly cropped) sequence, runs pre-norm encoder layers, then
    aggregates unmasked positions into one D-vector.
    """

    def __init__(self, cfg: TransformerConfig, rng):
        self.cfg = cfg
        self.layers = [
            _EncoderLayer(cfg.model_dim, cfg.ff_dim, cfg.num_heads, rng)
            for _ in range(cfg.num_layers)
        ]
        self.lnf_g, self.lnf_b = _ones((cfg.model_dim,)), _zeros((cfg.model_dim,))
        if cfg.aggregation == "summary":
            self.token = _init(rng, (cfg.model_dim,), cfg.model_dim)

    def __call__(self, h, mask, time_offsets=None):
        # h (N, D, T) or (D, T); positions are offset + local index
        h, squeeze = _ensure_batched(h, 2)
        n, d, t = h.shape
        if d != self.cfg.model_dim:
            raise ShapeError(f"feature dim {d} != transformer dim {self.cfg.model_dim}")
        mask = check_time_mask(mask, t)
        offsets = np.zeros(n, dtype=int) if time_offsets is None else np.asarray(time_offsets)
        if offsets.shape != (n,):
            raise ShapeError(f"time offsets shape {offsets.shape}, need ({n},)")
        x = h.transpose(0, 2, 1)
        pos = offsets[:, None] + np.arange(t)[None, :]
        x = x + Tensor(sinusoidal_positions(pos, d))
        use_summary = self.cfg.aggregation == "summary"
        if use_summary:
            tok = self.token.reshape(1, 1, d).broadcast_to((n, 1, d))
            x = concat([tok, x], axis=1)
            mask = np.concatenate([[True], mask])
        for layer in self.layers:
            x = layer(x, mask)
        x = layer_norm(x, self.lnf_g, self.lnf_b)
        if use_summary:
            out = x[:, 0]
        else:
            keep = Tensor(mask.astype(float).reshape(1, t, 1))
            out = (x * keep).sum(axis=1) * (1.0 / float(mask.sum()))
        if squeeze:
            return out.reshape(out.shape[1:])
        return out


class ProjectionHead(Module):
    """Two fully-connected layers mapping pooled features to embeddings."""

    def __init__(self, in_dim, hidden, out_dim, rng):
        self.w1, self.b1 = _init(rng, (in_dim, hidden), in_dim), _zeros((hidden,))
        self.w2, self.b2 = _init(rng, (hidden, out_dim), hidden), _zeros((out_dim,))

    def __call__(self, x):
        if x.shape[-1] != self.w1.shape[0]:
            raise ShapeError(f"projection input dim {x.shape[-1]} != {self.w1.shape[0]}")
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        out = linear(relu(linear(x, self.w1, self.b1)), self.w2, self.b2)
        if squeeze:
            return out.reshape(out.shape[-1])
        return out


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------

class AVModel(Module):
    """Visual trunk + audio encoder + temporal pooling + projection heads."""

    def __init__(self, visual_cfg=None, audio_cfg=None, transformer_cfg=None,
                 pool="transformer", proj_hidden=None, proj_out=None, seed=0):
        rng = np.random.default_rng(seed)
        self.visual_cfg = visual_cfg or desk_visual_config()
        self.audio_cfg = audio_cfg or AudioConfig()
        d = self.visual_cfg.feature_dim
        if self.audio_cfg.feature_dim != d:
            raise ValueError(
                f"audio feature dim {self.audio_cfg.feature_dim} != visual dim {d}"
            )
        if pool not in ("gap", "transformer"):
            raise ValueError(f"unknown pool {pool!r}")
        self.pool_kind = pool
        self.proj_out = proj_out or d // 2
        hidden = proj_hidden or d
        self.visual = VisualEncoder(self.visual_cfg, rng)
        self.audio = AudioEncoder(self.audio_cfg, rng)
        if pool == "transformer":
            tcfg = transformer_cfg or TransformerConfig(model_dim=d)
            if tcfg.model_dim != d:
                raise ValueError(f"transformer dim {tcfg.model_dim} != feature dim {d}")
            self.pooler = TransformerPool(tcfg, rng)
        else:
            self.pooler = None
        self.vis_head = ProjectionHead(d, hidden, self.proj_out, rng)
        self.audio_head = ProjectionHead(d, hidden, self.proj_out, rng)

    @property
    def feature_dim(self):
        return self.visual_cfg.feature_dim

    def pool_sequence(self, h, mask=None, time_offsets=None):
        """(N, D, T) sequence -> (N, D) via the configured temporal pool.

        Per-frame signatures are standardized across channels first, so
        both pool choices see unit-scale inputs.
        """
        t = h.shape[-1]
        mask = np.ones(t, dtype=bool) if mask is None else check_time_mask(mask, t)
        h = standardize(h, axis=-2)
        if self.pooler is None:
            return temporal_avg_pool(h)
        return self.pooler(h, mask, time_offsets)

    def pooled_feature(self, feat, mask=None, time_offsets=None):
        """Feature map (N, D, T, H, W) -> pooled (N, D)."""
        return self.pool_sequence(spatial_pool(feat), mask, time_offsets)

    def embed_view(self, feat, mask=None, time_offsets=None):
        """Feature map -> projected embedding (N, proj_out)."""
        return self.vis_head(self.pooled_feature(feat, mask, time_offsets))

    def embed_audio(self, a):
        return self.audio_head(standardize(self.audio(a), axis=-1))

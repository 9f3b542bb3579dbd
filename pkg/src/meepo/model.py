"""CNN-Mamba blocks and the encoder/decoder segmentation network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError
from .numerics import (
    ParamStore,
    Tensor,
    concat_cols,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    segment_mean,
    slice_cols,
    softmax_rows,
    transpose,
)
from .pointcloud import DEFAULT_GRID_SIZE, PointCloud, PoolingMap, SerializedVoxels, grid_pool, grid_unpool, voxelize
from .sparseconv import ConvKernel3D, SparseTensor, submanifold_conv
from .ssm import MambaModuleParams, ScanDirections, SSMConfig, init_mamba_params, mamba_module

BLOCK_TYPES = ("cnn_mamba", "cnn_transformer", "cnn_only", "mamba_only", "transformer_only")


@dataclass
class ModelConfig:
    """Network layout. Channel and head lists hold full-width values; the
    effective widths are scaled by ``channel_multiplier``."""

    in_channels: int = 3
    append_coords: bool = False
    num_classes: int = 5
    grid_size: float = DEFAULT_GRID_SIZE
    embedding_depth: int = 2
    embedding_channels: int = 32
    encoder_depths: tuple[int, ...] = (2, 2, 6, 2)
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512)
    encoder_heads: tuple[int, ...] = (4, 8, 16, 32)
    decoder_depths: tuple[int, ...] = (1, 1, 1, 1)
    decoder_channels: tuple[int, ...] = (64, 64, 128, 256)
    decoder_heads: tuple[int, ...] = (4, 4, 8, 16)
    down_strides: tuple[int, ...] = (2, 2, 2, 2)
    drop_path_rate: float = 0.3
    block_types: tuple[str, ...] = ("cnn_mamba",)
    mlp_ratio: int = 4
    sparse_kernel: int = 3
    channel_multiplier: float = 0.25
    zero_init_residual: bool = False
    ssm: SSMConfig = field(default_factory=SSMConfig)

    def __post_init__(self):
        for name in ("encoder_depths", "encoder_channels", "encoder_heads", "decoder_depths",
                     "decoder_channels", "decoder_heads", "down_strides"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if isinstance(self.block_types, str):
            self.block_types = (self.block_types,)
        self.block_types = tuple(self.block_types)
        if len(self.block_types) == 1:
            self.block_types *= len(self.encoder_depths)
        self.validate()

    def validate(self) -> None:
        lists = {
            "encoder_depths": self.encoder_depths, "encoder_channels": self.encoder_channels,
            "encoder_heads": self.encoder_heads, "decoder_depths": self.decoder_depths,
            "decoder_channels": self.decoder_channels, "decoder_heads": self.decoder_heads,
            "down_strides": self.down_strides, "block_types": self.block_types,
        }
        n = len(self.encoder_depths)
        for name, vals in lists.items():
            if len(vals) != n:
                raise ConfigError(f"{name} has {len(vals)} entries, expected {n}")
        if n < 1:
            raise ConfigError("need at least one encoder stage")
        for name in ("encoder_channels", "decoder_channels", "encoder_heads", "decoder_heads"):
            if min(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if min(self.encoder_depths) < 0 or min(self.decoder_depths) < 0 or self.embedding_depth < 1:
            raise ConfigError("depths must be >= 0 (embedding_depth >= 1)")
        if min(self.down_strides) < 2:
            raise ConfigError("down_strides must be >= 2")
        if not 0 <= self.drop_path_rate < 1:
            raise ConfigError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        for bt in self.block_types:
            if bt not in BLOCK_TYPES:
                raise ConfigError(f"unknown block type {bt!r}; choose from {BLOCK_TYPES}")
        if self.channel_multiplier <= 0:
            raise ConfigError("channel_multiplier must be positive")
        if self.sparse_kernel < 1 or self.sparse_kernel % 2 == 0:
            raise ConfigError("sparse_kernel must be odd and >= 1")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be >= 1")
        for i in range(n):
            for heads, chans, side in ((self.enc_heads()[i], self.enc_channels()[i], "encoder"),
                                       (self.dec_heads()[i], self.dec_channels()[i], "decoder")):
                if chans % heads:
                    raise ConfigError(f"{side} stage {i}: width {chans} not divisible by {heads} heads")

    def _scale(self, c: int) -> int:
        return max(1, int(round(c * self.channel_multiplier)))

    def emb_channels(self) -> int:
        return self._scale(self.embedding_channels)

    def enc_channels(self) -> list[int]:
        return [self._scale(c) for c in self.encoder_channels]

    def dec_channels(self) -> list[int]:
        return [self._scale(c) for c in self.decoder_channels]

    def enc_heads(self) -> list[int]:
        return [max(1, int(round(h * self.channel_multiplier))) for h in self.encoder_heads]

    def dec_heads(self) -> list[int]:
        return [max(1, int(round(h * self.channel_multiplier))) for h in self.decoder_heads]

    @property
    def input_width(self) -> int:
        return self.in_channels + (3 if self.append_coords else 0)

    @property
    def num_stages(self) -> int:
        return len(self.encoder_depths)

    def total_blocks(self) -> int:
        return self.embedding_depth + sum(self.encoder_depths) + sum(self.decoder_depths)

    def with_updates(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class _Fetch:
    """Stand-in for a ParamStore that returns already-registered tensors by name."""

    def __init__(self, store: ParamStore):
        self.store = store

    def add(self, name: str, value) -> Tensor:
        t = self.store[name]
        if t.shape != np.shape(value):
            raise DimensionError(f"{name}: stored shape {t.shape} != configured {np.shape(value)}")
        return t


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    lim = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-lim, lim, shape)


@dataclass
class Norm:
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def _norm(store, prefix: str, C: int) -> Norm:
    return Norm(store.add(f"{prefix}.gain", np.ones(C)), store.add(f"{prefix}.bias", np.zeros(C)))


@dataclass
class AttentionParams:
    qkv: Tensor
    qkv_bias: Tensor
    out: Tensor
    out_bias: Tensor
    heads: int


def init_attention(store, prefix: str, C: int, heads: int, rng, zero_out=False) -> AttentionParams:
    out = np.zeros((C, C)) if zero_out else _uniform(rng, C, (C, C))
    return AttentionParams(
        store.add(f"{prefix}.qkv", _uniform(rng, C, (C, 3 * C))),
        store.add(f"{prefix}.qkv_bias", np.zeros(3 * C)),
        store.add(f"{prefix}.out", out),
        store.add(f"{prefix}.out_bias", np.zeros(C)),
        heads,
    )


def attention_module(x: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head softmax attention over all rows of ``x`` (no windowing, no positions)."""
    L, C = x.shape
    dh = C // p.heads
    qkv = linear(x, p.qkv, p.qkv_bias)
    scale = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(p.heads):
        q = slice_cols(qkv, h * dh, (h + 1) * dh)
        k = slice_cols(qkv, C + h * dh, C + (h + 1) * dh)
        v = slice_cols(qkv, 2 * C + h * dh, 2 * C + (h + 1) * dh)
        attn = softmax_rows(mul(matmul(q, transpose(k)), scale))
        heads.append(matmul(attn, v))
    y = heads[0] if p.heads == 1 else concat_cols(heads)
    return linear(y, p.out, p.out_bias)


def full_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, block: int = 1024) -> np.ndarray:
    """Single-head softmax attention on raw arrays, computed in row blocks to bound memory."""
    L = q.shape[0]
    scale = 1.0 / math.sqrt(q.shape[1])
    out = np.empty((L, v.shape[1]), dtype=q.dtype)
    kt = np.ascontiguousarray(k.T)
    for s in range(0, L, block):
        sc = (q[s : s + block] @ kt) * scale
        sc -= sc.max(axis=1, keepdims=True)
        np.exp(sc, out=sc)
        sc /= sc.sum(axis=1, keepdims=True)
        out[s : s + block] = sc @ v
    return out


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return linear(gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)


def init_mlp(store, prefix: str, C: int, ratio: int, rng, zero_out=False) -> MLPParams:
    H = ratio * C
    w2 = np.zeros((H, C)) if zero_out else _uniform(rng, H, (H, C))
    return MLPParams(
        store.add(f"{prefix}.w1", _uniform(rng, C, (C, H))),
        store.add(f"{prefix}.b1", np.zeros(H)),
        store.add(f"{prefix}.w2", w2),
        store.add(f"{prefix}.b2", np.zeros(C)),
    )


def init_conv(store, prefix: str, cin: int, cout: int, k: int, rng, zero=False, bias=True) -> ConvKernel3D:
    w = np.zeros((k**3, cin, cout)) if zero else _uniform(rng, cin * k**3, (k**3, cin, cout))
    b = store.add(f"{prefix}.bias", np.zeros(cout)) if bias else None
    return ConvKernel3D(store.add(f"{prefix}.weight", w), b, k)


@dataclass
class BlockParams:
    block_type: str
    channels: int
    drop_rate: float = 0.0
    conv_norm: Norm | None = None
    conv: ConvKernel3D | None = None
    mixer_norm: Norm | None = None
    mamba: MambaModuleParams | None = None
    attention: AttentionParams | None = None
    mlp_norm: Norm | None = None
    mlp: MLPParams | None = None
    conv_mode: str = "symmetric"
    dirs: ScanDirections = field(default_factory=ScanDirections)


def init_block(store, prefix: str, C: int, block_type: str, heads: int, cfg: ModelConfig, rng,
               drop_rate: float = 0.0) -> BlockParams:
    if block_type not in BLOCK_TYPES:
        raise ConfigError(f"unknown block type {block_type!r}")
    zero = cfg.zero_init_residual
    p = BlockParams(block_type, C, drop_rate, conv_mode=cfg.ssm.conv_mode, dirs=cfg.ssm.scan_directions())
    if block_type.startswith("cnn"):
        p.conv_norm = _norm(store, f"{prefix}.conv_norm", C)
        p.conv = init_conv(store, f"{prefix}.conv", C, C, cfg.sparse_kernel, rng, zero=zero)
    if "mamba" in block_type:
        p.mixer_norm = _norm(store, f"{prefix}.mixer_norm", C)
        p.mamba = init_mamba_params(store, f"{prefix}.mamba", C, cfg.ssm, rng, zero_out=zero)
    if "transformer" in block_type:
        p.mixer_norm = _norm(store, f"{prefix}.mixer_norm", C)
        p.attention = init_attention(store, f"{prefix}.attn", C, heads, rng, zero_out=zero)
    p.mlp_norm = _norm(store, f"{prefix}.mlp_norm", C)
    p.mlp = init_mlp(store, f"{prefix}.mlp", C, cfg.mlp_ratio, rng, zero_out=zero)
    return p


def drop_path(x: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Stochastic depth on one residual branch: zero with probability ``rate``, else scale by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ParameterError(f"drop path rate must lie in [0, 1), got {rate}")
    if not train_mode or rate == 0:
        return x
    if rng is None:
        raise ParameterError("drop_path in train mode needs an explicit random generator")
    if rng.random() < rate:
        return mul(x, 0.0)
    return mul(x, 1.0 / (1.0 - rate))


def block_forward(v: SparseTensor, p: BlockParams, train_mode: bool = False, rng=None) -> SparseTensor:
    """Pre-norm residual sub-layers: [sparse conv], [Mamba | attention], MLP."""
    x = v.features
    if p.conv is not None:
        branch = submanifold_conv(v.with_features(p.conv_norm(x)), p.conv).features
        x = x + drop_path(branch, p.drop_rate, train_mode, rng)
    if p.mamba is not None:
        branch = mamba_module(p.mixer_norm(x), p.mamba, p.conv_mode, p.dirs)
        x = x + drop_path(branch, p.drop_rate, train_mode, rng)
    if p.attention is not None:
        branch = attention_module(p.mixer_norm(x), p.attention)
        x = x + drop_path(branch, p.drop_rate, train_mode, rng)
    x = x + drop_path(p.mlp(p.mlp_norm(x)), p.drop_rate, train_mode, rng)
    return v.with_features(x)


def cnn_mamba_block(v: SparseTensor, p: BlockParams, train_mode: bool = False, rng=None) -> SparseTensor:
    if p.block_type != "cnn_mamba":
        raise ConfigError(f"expected cnn_mamba parameters, got {p.block_type}")
    return block_forward(v, p, train_mode, rng)


def cnn_transformer_block(v: SparseTensor, p: BlockParams, train_mode: bool = False, rng=None) -> SparseTensor:
    if p.block_type != "cnn_transformer":
        raise ConfigError(f"expected cnn_transformer parameters, got {p.block_type}")
    return block_forward(v, p, train_mode, rng)


# --- whole network ----------------------------------------------------------------


@dataclass
class EmbedLayer:
    conv: ConvKernel3D
    norm: Norm


@dataclass
class DownLayer:
    proj: Tensor
    proj_bias: Tensor
    norm: Norm


@dataclass
class UpLayer:
    norm: Norm
    proj: Tensor
    proj_bias: Tensor
    skip_proj: Tensor | None


@dataclass
class MeepoParams:
    embed: list[EmbedLayer]
    down: list[DownLayer]
    encoder: list[list[BlockParams]]
    up: list[UpLayer]
    decoder: list[list[BlockParams]]
    head_norm: Norm
    head: Tensor
    head_bias: Tensor


def _drop_schedule(depths, rate) -> list[list[float]]:
    total = sum(depths)
    rates = np.linspace(0.0, rate, total) if total else np.zeros(0)
    out, i = [], 0
    for d in depths:
        out.append([float(r) for r in rates[i : i + d]])
        i += d
    return out


def _register(cfg: ModelConfig, store, rng) -> MeepoParams:
    k = cfg.sparse_kernel
    Ce = cfg.emb_channels()
    enc_c, dec_c = cfg.enc_channels(), cfg.dec_channels()
    enc_h, dec_h = cfg.enc_heads(), cfg.dec_heads()
    embed = []
    cin = cfg.input_width
    for i in range(cfg.embedding_depth):
        embed.append(EmbedLayer(init_conv(store, f"embed.{i}.conv", cin, Ce, k, rng), _norm(store, f"embed.{i}.norm", Ce)))
        cin = Ce
    enc_drop = _drop_schedule(cfg.encoder_depths, cfg.drop_path_rate)
    dec_drop = [list(reversed(r)) for r in _drop_schedule(cfg.decoder_depths, cfg.drop_path_rate)]
    down, encoder = [], []
    prev = Ce
    for s in range(cfg.num_stages):
        C = enc_c[s]
        down.append(DownLayer(
            store.add(f"enc.{s}.down.proj", _uniform(rng, prev, (prev, C))),
            store.add(f"enc.{s}.down.proj_bias", np.zeros(C)),
            _norm(store, f"enc.{s}.down.norm", C),
        ))
        encoder.append([
            init_block(store, f"enc.{s}.block.{b}", C, cfg.block_types[s], enc_h[s], cfg, rng, enc_drop[s][b])
            for b in range(cfg.encoder_depths[s])
        ])
        prev = C
    skip_widths = [Ce] + enc_c[:-1]
    up: list[UpLayer | None] = [None] * cfg.num_stages
    decoder: list[list[BlockParams] | None] = [None] * cfg.num_stages
    cur = enc_c[-1]
    for s in reversed(range(cfg.num_stages)):
        C = dec_c[s]
        proj = np.zeros((cur, C)) if cfg.zero_init_residual else _uniform(rng, cur, (cur, C))
        skip_proj = None
        if skip_widths[s] != C:
            skip_proj = store.add(f"dec.{s}.up.skip_proj", _uniform(rng, skip_widths[s], (skip_widths[s], C)))
        up[s] = UpLayer(
            _norm(store, f"dec.{s}.up.norm", cur),
            store.add(f"dec.{s}.up.proj", proj),
            store.add(f"dec.{s}.up.proj_bias", np.zeros(C)),
            skip_proj,
        )
        decoder[s] = [
            init_block(store, f"dec.{s}.block.{b}", C, cfg.block_types[s], dec_h[s], cfg, rng, dec_drop[s][b])
            for b in range(cfg.decoder_depths[s])
        ]
        cur = C
    head_norm = _norm(store, "head.norm", dec_c[0])
    head = store.add("head.weight", _uniform(rng, dec_c[0], (dec_c[0], cfg.num_classes)))
    head_bias = store.add("head.bias", np.zeros(cfg.num_classes))
    return MeepoParams(embed, down, encoder, up, decoder, head_norm, head, head_bias)


def build_model(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Fresh parameters for ``cfg``; widths and block kinds are checked here, not at run time."""
    cfg.validate()
    store = ParamStore()
    views = _register(cfg, store, np.random.default_rng(seed))
    store.cache["views"] = (cfg, views)
    return store


def model_views(cfg: ModelConfig, store: ParamStore) -> MeepoParams:
    cached = store.cache.get("views")
    if cached is not None and cached[0] == cfg:
        return cached[1]
    views = _register(cfg, _Fetch(store), np.random.default_rng(0))
    store.cache["views"] = (cfg, views)
    return views


def input_features(v: SerializedVoxels, cfg: ModelConfig) -> np.ndarray:
    feats = np.asarray(v.features, dtype=np.float64)
    if feats.shape[1] != cfg.in_channels:
        raise DimensionError(f"voxels carry {feats.shape[1]} channels, config expects {cfg.in_channels}")
    if cfg.append_coords:
        centers = v.centers()
        feats = np.concatenate([feats, centers - centers.mean(axis=0)], axis=1)
    return feats


@dataclass
class ForwardResult:
    logits: Tensor
    voxels: SerializedVoxels
    stage_counts: list[int]
    decoder_counts: list[int]

    @property
    def inverse_map(self) -> np.ndarray:
        return self.voxels.inverse_map

    def point_logits(self) -> np.ndarray:
        return self.logits.data[self.voxels.inverse_map]


def meepo_forward(inputs, cfg: ModelConfig, params: ParamStore, train_mode: bool = False,
                  rng: np.random.Generator | None = None) -> ForwardResult:
    """Per-voxel class logits for a point cloud (or pre-voxelized scene)."""
    v = inputs if isinstance(inputs, SerializedVoxels) else voxelize(inputs, cfg.grid_size)
    views = model_views(cfg, params)
    dtype = next(iter(params.params.values())).value.dtype
    x = SparseTensor.from_voxels(v, Tensor(input_features(v, cfg), dtype=dtype))
    for layer in views.embed:
        x = x.with_features(gelu(layer.norm(submanifold_conv(x, layer.conv).features)))
    skips: list[SparseTensor] = []
    maps: list[PoolingMap] = []
    level = v
    counts = [len(v)]
    for s in range(cfg.num_stages):
        skips.append(x)
        level, pmap = grid_pool(level, cfg.down_strides[s])
        maps.append(pmap)
        d = views.down[s]
        pooled = segment_mean(linear(x.features, d.proj, d.proj_bias), pmap.parent, pmap.num_coarse)
        x = SparseTensor(level.coords, level.keys, gelu(d.norm(pooled)))
        for bp in views.encoder[s]:
            x = block_forward(x, bp, train_mode, rng)
        counts.append(len(level))
    dec_counts = []
    for s in reversed(range(cfg.num_stages)):
        u = views.up[s]
        skip = skips[s]
        base = skip.features if u.skip_proj is None else linear(skip.features, u.skip_proj)
        x = skip.with_features(grid_unpool(u.norm(x.features), maps[s], base, u.proj, u.proj_bias))
        for bp in views.decoder[s]:
            x = block_forward(x, bp, train_mode, rng)
        dec_counts.append(len(x))
    logits = linear(views.head_norm(x.features), views.head, views.head_bias)
    return ForwardResult(logits, v, counts, dec_counts)

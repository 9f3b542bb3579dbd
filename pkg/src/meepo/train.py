"""Optimization, evaluation and the experiment procedures built on them."""

from __future__ import annotations

import dataclasses
import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, NumericError, ParameterError
from .model import ModelConfig, block_forward, build_model, init_block, meepo_forward
from .numerics import ParamStore, Tape, Tensor, cross_entropy, layer_norm, linear, precision
from .pointcloud import SceneSpec, SerializedVoxels, crop_to_voxels, generate_scene, voxelize
from .sparseconv import SparseTensor
from .ssm import ScanDirections, SSMConfig

log = logging.getLogger(__name__)

IGNORE_LABEL = -1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    steps: int = 2000
    warmup_fraction: float = 0.05
    cosine: bool = True
    seed: int = 0
    block_lr_scaler: float = 0.1
    eval_every: int = 100
    precision: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")
        if not 0 <= self.warmup_fraction <= 1:
            raise ParameterError("warmup_fraction must lie in [0, 1]")
        if self.steps < 1 or self.batch_size < 1:
            raise ParameterError("steps and batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ParameterError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.steps))

    @classmethod
    def paper_scale(cls, **kw) -> "TrainConfig":
        """Optimizer settings of the indoor recipe (learning rate 6e-3, block scaler 0.1)."""
        base = dict(learning_rate=6e-3, weight_decay=5e-2, batch_size=12, block_lr_scaler=0.1,
                    warmup_fraction=40 / 800)
        base.update(kw)
        return cls(**base)


def is_block_param(name: str) -> bool:
    return ".block." in name


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0, then half-cosine decay to 0 at ``cfg.steps``."""
    total, warm = cfg.steps, cfg.warmup_steps
    if step < warm:
        return cfg.learning_rate * step / warm
    if not cfg.cosine:
        return cfg.learning_rate
    if total <= warm:
        return cfg.learning_rate
    progress = min(1.0, (step - warm) / (total - warm))
    return max(0.0, cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress)))


def adamw_step(store: ParamStore, cfg: TrainConfig, lr_t: float) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update; clears gradients."""
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in store.params.items():
        g = p.value.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        lr = lr_t * (cfg.block_lr_scaler if is_block_param(name) else 1.0)
        theta = p.value.data
        if cfg.weight_decay:
            theta -= lr * cfg.weight_decay * theta
        p.step += 1
        p.m *= b1
        p.m += (1 - b1) * g
        p.v *= b2
        p.v += (1 - b2) * g * g
        m_hat = p.m / (1 - b1**p.step)
        v_hat = p.v / (1 - b2**p.step)
        theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    store.zero_grad()


# --- metrics ------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_class_iou: np.ndarray
    miou: float
    confusion: np.ndarray
    loss: float = float("nan")
    step: int = 0
    wall_clock: float = 0.0
    note: str = ""

    @property
    def evaluable(self) -> bool:
        return not self.note

    def summary(self) -> str:
        if not self.evaluable:
            return f"step {self.step}: {self.note}"
        ious = " ".join("-" if math.isnan(v) else f"{v:.3f}" for v in self.per_class_iou)
        return f"step {self.step}: loss {self.loss:.4f} mIoU {self.miou:.4f} [{ious}]"


def confusion_matrix(pred, true, num_classes: int, ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    keep = true != ignore_label
    pred, true = pred[keep], true[keep]
    if true.size and (true.min() < 0 or true.max() >= num_classes):
        raise DataError("ground-truth label outside [0, num_classes)")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise DataError("predicted label outside [0, num_classes)")
    return np.bincount(true * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def report_from_confusion(conf: np.ndarray, **kw) -> EvalReport:
    """Rows of ``conf`` are ground truth, columns predictions."""
    K = conf.shape[0]
    if conf.sum() == 0:
        return EvalReport(np.full(K, np.nan), float("nan"), conf, note="no evaluable voxels", **kw)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(K, np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    return EvalReport(iou, float(np.nanmean(iou)), conf, **kw)


def miou(pred_labels, true_labels, num_classes: int, ignore_label: int = IGNORE_LABEL) -> EvalReport:
    """Per-class IoU and their mean; classes absent from both prediction and truth are skipped."""
    return report_from_confusion(confusion_matrix(pred_labels, true_labels, num_classes, ignore_label))


# --- data ---------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(num_points=3000))
    grid_size: float = 0.1
    num_train: int = 32
    num_val: int = 8
    seed: int = 0
    max_voxels: int | None = None

    def scene_seeds(self) -> tuple[list[int], list[int]]:
        base = 1000 * self.seed
        train = [base + i for i in range(self.num_train)]
        val = [base + 500 + i for i in range(self.num_val)]
        return train, val

    def load(self) -> tuple[list[SerializedVoxels], list[SerializedVoxels]]:
        train, val = self.scene_seeds()
        return [self._voxels(s) for s in train], [self._voxels(s) for s in val]

    def _voxels(self, seed: int) -> SerializedVoxels:
        pc = generate_scene(seed, self.scene)
        if self.max_voxels:
            pc = crop_to_voxels(pc, self.grid_size, self.max_voxels)
        return voxelize(pc, self.grid_size)


def evaluate(store: ParamStore, cfg: ModelConfig, scenes: list[SerializedVoxels], step: int = 0) -> EvalReport:
    t0 = time.perf_counter()
    conf = np.zeros((cfg.num_classes, cfg.num_classes), dtype=np.int64)
    losses, weights = [], []
    for v in scenes:
        out = meepo_forward(v, cfg, store, train_mode=False)
        labels = v.labels
        conf += confusion_matrix(out.logits.data.argmax(axis=1), labels, cfg.num_classes)
        n = int((labels != IGNORE_LABEL).sum())
        if n:
            losses.append(float(cross_entropy(out.logits, labels, IGNORE_LABEL).data) * n)
            weights.append(n)
    loss = sum(losses) / sum(weights) if weights else float("nan")
    return report_from_confusion(conf, loss=loss, step=step, wall_clock=time.perf_counter() - t0)


# --- checkpoints --------------------------------------------------------------------

CKPT_MAGIC = b"MPK1"
CKPT_VERSION = 1


def encode_checkpoint(arrays: dict[str, np.ndarray], config_text: str) -> bytes:
    """MPK1: magic, u32 version, u32 config length, config, u32 count, then
    per record u16 name length, name, u8 ndim, u32 dims, f32 data (little-endian)."""
    buf = io.BytesIO()
    cfg = config_text.encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {bytes(data[:4])!r}, expected {CKPT_MAGIC!r}", offset=0)
    off = 4

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated {what}", offset=off)
        chunk = data[off : off + n]
        off += n
        return chunk

    version, clen = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    config_text = take(clen, "config").decode("utf-8")
    (count,) = struct.unpack("<I", take(4, "record count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4").reshape(shape).copy()
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", offset=off)
    return config_text, arrays


def save_checkpoint(path, store: ParamStore, config_text: str) -> None:
    Path(path).write_bytes(encode_checkpoint(store.state_arrays(), config_text))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())


def restore_model(path) -> tuple[ModelConfig, "TrainConfig", ParamStore]:
    from .config import parse_config

    text, arrays = load_checkpoint(path)
    mcfg, tcfg = parse_config(text)
    with precision(np.float32 if tcfg.precision == "float32" else np.float64):
        store = build_model(mcfg, tcfg.seed)
    store.load_arrays(arrays)
    return mcfg, tcfg, store


# --- training -----------------------------------------------------------------------


class TrainingAborted(NumericError):
    def __init__(self, message: str, checkpoint: bytes | None, step: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


@dataclass
class TrainResult:
    store: ParamStore
    losses: list[float]
    reports: list[EvalReport]
    train_reports: list[EvalReport]
    checkpoint: bytes
    config_text: str

    @property
    def final(self) -> EvalReport | None:
        return self.reports[-1] if self.reports else None


def _dtype(cfg: TrainConfig):
    return np.float32 if cfg.precision == "float32" else np.float64


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, data: DatasetSpec | None = None, *,
               train_scenes: list[SerializedVoxels] | None = None,
               val_scenes: list[SerializedVoxels] | None = None,
               checkpoint_path=None, eval_train: bool = False) -> TrainResult:
    """Train from scratch; deterministic in ``train_cfg.seed`` and the data spec.

    Validation reports are emitted every ``eval_every`` steps and at the end.
    A non-finite loss raises :class:`TrainingAborted` carrying the last good checkpoint.
    """
    from .config import format_config

    if train_scenes is None:
        train_scenes, loaded_val = (data or DatasetSpec()).load()
        val_scenes = loaded_val if val_scenes is None else val_scenes
    val_scenes = val_scenes or []
    config_text = format_config(model_cfg, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    with precision(_dtype(train_cfg)):
        store = build_model(model_cfg, train_cfg.seed)
        last_good = encode_checkpoint(store.state_arrays(), config_text)
        losses: list[float] = []
        reports: list[EvalReport] = []
        train_reports: list[EvalReport] = []
        for step in range(train_cfg.steps):
            lr_t = cosine_lr(step, train_cfg)
            batch = rng.choice(len(train_scenes), size=min(train_cfg.batch_size, len(train_scenes)), replace=False)
            step_loss = 0.0
            for i in batch:
                v = train_scenes[int(i)]
                with Tape() as tape:
                    out = meepo_forward(v, model_cfg, store, train_mode=True, rng=rng)
                    loss = cross_entropy(out.logits, v.labels, IGNORE_LABEL)
                value = float(loss.data)
                if not math.isfinite(value):
                    if checkpoint_path:
                        Path(checkpoint_path).write_bytes(last_good)
                    raise TrainingAborted(f"non-finite loss at step {step}", last_good, step)
                tape.backward(loss, np.asarray(1.0 / len(batch), dtype=loss.dtype))
                step_loss += value / len(batch)
            adamw_step(store, train_cfg, lr_t)
            losses.append(step_loss)
            done = step + 1 == train_cfg.steps
            if done or (train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0):
                last_good = encode_checkpoint(store.state_arrays(), config_text)
                if checkpoint_path:
                    Path(checkpoint_path).write_bytes(last_good)
                if val_scenes:
                    rep = evaluate(store, model_cfg, val_scenes, step + 1)
                    reports.append(rep)
                    log.info("val %s", rep.summary())
                if eval_train:
                    train_reports.append(evaluate(store, model_cfg, train_scenes, step + 1))
    return TrainResult(store, losses, reports, train_reports, last_good, config_text)


# --- right-context probe --------------------------------------------------------------


def successor_task(v: SerializedVoxels, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random binary code per voxel; each voxel's label is its Morton successor's code.

    The last voxel has no successor and is ignored.
    """
    rng = np.random.default_rng(seed)
    code = rng.integers(0, 2, size=len(v))
    feats = np.stack([2.0 * code - 1.0, rng.normal(scale=0.1, size=len(v))], axis=1)
    labels = np.full(len(v), IGNORE_LABEL, dtype=np.int64)
    labels[:-1] = code[1:]
    return feats, labels


@dataclass
class ProbeConfig:
    channels: int = 16
    depth: int = 2
    ssm: SSMConfig = field(default_factory=SSMConfig)
    steps: int = 300
    learning_rate: float = 3e-3
    num_train: int = 4
    num_val: int = 2
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(num_points=1500, object_count=(2, 3)))
    grid_size: float = 0.1


def _probe_params(store, pc: ProbeConfig, rng):
    mcfg = ModelConfig(ssm=pc.ssm, zero_init_residual=False)
    C = pc.channels
    lim = 1.0 / math.sqrt(2)
    embed = store.add("probe.embed", rng.uniform(-lim, lim, (2, C)))
    embed_b = store.add("probe.embed_bias", np.zeros(C))
    blocks = [init_block(store, f"probe.block.{i}", C, "mamba_only", 1, mcfg, rng) for i in range(pc.depth)]
    g = store.add("probe.norm.gain", np.ones(C))
    b = store.add("probe.norm.bias", np.zeros(C))
    head = store.add("probe.head", rng.uniform(-1 / math.sqrt(C), 1 / math.sqrt(C), (C, 2)))
    head_b = store.add("probe.head_bias", np.zeros(2))
    return embed, embed_b, blocks, (g, b), head, head_b


def _probe_forward(params, v: SerializedVoxels, feats: np.ndarray) -> Tensor:
    embed, embed_b, blocks, (g, b), head, head_b = params
    x = SparseTensor(v.coords, v.keys, linear(Tensor(feats, dtype=embed.dtype), embed, embed_b))
    for bp in blocks:
        x = block_forward(x, bp)
    return linear(layer_norm(x.features, g, b), head, head_b)


def right_context_probe(pc: ProbeConfig, seed: int) -> EvalReport:
    """Train a pure-Mamba sequence model on :func:`successor_task`; return validation mIoU."""
    rng = np.random.default_rng(seed)
    data = DatasetSpec(scene=pc.scene, grid_size=pc.grid_size, num_train=pc.num_train, num_val=pc.num_val, seed=seed)
    train_v, val_v = data.load()
    train_t = [successor_task(v, 7919 * seed + i) for i, v in enumerate(train_v)]
    val_t = [successor_task(v, 7919 * seed + 100 + i) for i, v in enumerate(val_v)]
    tcfg = TrainConfig(learning_rate=pc.learning_rate, weight_decay=0.0, steps=pc.steps, block_lr_scaler=1.0)
    with precision(np.float32):
        store = ParamStore()
        params = _probe_params(store, pc, rng)
        for step in range(pc.steps):
            i = int(rng.integers(len(train_v)))
            feats, labels = train_t[i]
            with Tape() as tape:
                loss = cross_entropy(_probe_forward(params, train_v[i], feats), labels, IGNORE_LABEL)
            tape.backward(loss)
            adamw_step(store, tcfg, cosine_lr(step, tcfg))
        conf = np.zeros((2, 2), dtype=np.int64)
        for v, (feats, labels) in zip(val_v, val_t):
            logits = _probe_forward(params, v, feats)
            conf += confusion_matrix(logits.data.argmax(axis=1), labels, 2)
    return report_from_confusion(conf, step=pc.steps)


# --- ablations ----------------------------------------------------------------------

ABLATION_AXES = ("block_type", "conv_mode", "directions", "stride")
CAUSALITY_AXES = ("conv_mode", "directions")


def apply_axis(cfg: ModelConfig, axis: str, value) -> ModelConfig:
    if axis == "block_type":
        return dataclasses.replace(cfg, block_types=(str(value),) * cfg.num_stages)
    if axis == "conv_mode":
        return dataclasses.replace(cfg, ssm=dataclasses.replace(cfg.ssm, conv_mode=str(value)))
    if axis == "directions":
        preset = ScanDirections.preset(str(value), cfg.ssm.stride)
        return dataclasses.replace(cfg, ssm=dataclasses.replace(cfg.ssm, directions=preset.directions))
    if axis == "stride":
        return dataclasses.replace(cfg, ssm=dataclasses.replace(cfg.ssm, stride=int(value)))
    raise ParameterError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


@dataclass
class AblationRow:
    value: str
    scores: list[float]
    probe_scores: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def spread(self) -> float:
        return float(np.std(self.scores))

    @property
    def probe_mean(self) -> float:
        return float(np.mean(self.probe_scores)) if self.probe_scores else float("nan")


@dataclass
class AblationTable:
    axis: str
    rows: list[AblationRow]
    seeds: list[int]

    def row(self, value) -> AblationRow:
        for r in self.rows:
            if r.value == str(value):
                return r
        raise KeyError(value)

    def format(self) -> str:
        probe = any(r.probe_scores for r in self.rows)
        head = f"{self.axis:<24} {'val mIoU':>16}" + (f" {'probe mIoU':>12}" if probe else "")
        lines = [head, "-" * len(head)]
        for r in self.rows:
            line = f"{r.value:<24} {r.mean:>8.4f} ± {r.spread:.4f}"
            if probe:
                line += f" {r.probe_mean:>12.4f}"
            lines.append(line)
        lines.append(f"seeds: {', '.join(map(str, self.seeds))}")
        return "\n".join(lines)

    def format_additive(self, order: list[str] | None = None, labels: dict[str, str] | None = None) -> str:
        """Cumulative layout: a baseline row, then each row with its gain over the baseline."""
        order = order or [r.value for r in self.rows]
        labels = labels or {}
        base = self.row(order[0]).mean
        lines = [f"{'case':<36} mIoU", f"baseline ({labels.get(order[0], order[0])}){'':<4} {base:.4f}"]
        for depth, value in enumerate(order[1:], 1):
            m = self.row(value).mean
            name = "  " * depth + "+ " + labels.get(value, value)
            lines.append(f"{name:<36} {m:.4f} ({m - base:+.4f})")
        return "\n".join(lines)


def ablation_suite(axis: str, grid, seeds, model_cfg: ModelConfig | None = None,
                   train_cfg: TrainConfig | None = None, data: DatasetSpec | None = None,
                   probe: ProbeConfig | None = None) -> AblationTable:
    """Train every grid value with identical seeds and budgets; report mean ± spread of val mIoU.

    For causality axes a right-context probe with the row's SSM settings is run per seed.
    """
    if axis not in ABLATION_AXES:
        raise ParameterError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    model_cfg = model_cfg or ModelConfig(grid_size=0.1)
    train_cfg = train_cfg or TrainConfig()
    data = data or DatasetSpec()
    rows = []
    for value in grid:
        cfg = apply_axis(model_cfg, axis, value)
        row = AblationRow(str(value), [])
        for seed in seeds:
            run_data = dataclasses.replace(data, seed=seed)
            res = train_loop(cfg, dataclasses.replace(train_cfg, seed=seed), run_data)
            row.scores.append(res.final.miou)
            log.info("%s=%s seed %d: %s", axis, value, seed, res.final.summary())
            if axis in CAUSALITY_AXES and probe is not None:
                pcfg = dataclasses.replace(probe, ssm=cfg.ssm)
                row.probe_scores.append(right_context_probe(pcfg, seed).miou)
        rows.append(row)
    return AblationTable(axis, rows, list(seeds))

"""Analytic operation counts and empirical scaling measurements."""

from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ParameterError

log = logging.getLogger(__name__)

ARCHES = ("mamba", "attention", "sparse_conv")
ANALYTIC_EXPONENT = {"mamba": 1.0, "attention": 2.0, "sparse_conv": 1.0}


@dataclass(frozen=True)
class FlopParams:
    L: int
    C: int = 64
    C_in: int | None = None
    C_out: int | None = None
    N: int = 16
    E: int = 2
    K: int = 4
    k: int = 3

    def __post_init__(self):
        for name in ("L", "C", "C_in", "C_out", "N", "E", "K", "k"):
            v = getattr(self, name)
            if v is None:
                continue
            if int(v) != v or v < 1:
                raise ParameterError(f"{name} must be a positive integer, got {v}")

    @property
    def cin(self) -> int:
        return self.C if self.C_in is None else self.C_in

    @property
    def cout(self) -> int:
        return self.C if self.C_out is None else self.C_out

    def with_length(self, L: int) -> "FlopParams":
        return FlopParams(L, self.C, self.C_in, self.C_out, self.N, self.E, self.K, self.k)


# Python ints are arbitrary precision, so every count below is exact.


def flops_transformer(p: FlopParams) -> int:
    """Projections plus attention: 4·L·C² + 2·L²·C."""
    L, C = int(p.L), int(p.C)
    return 4 * L * C * C + 2 * L * L * C


def flops_mamba(p: FlopParams) -> int:
    """Scan, depthwise conv and projections of one Mamba direction: 9LCN + LCK + 3LC²E."""
    L, C, N, K, E = int(p.L), int(p.C), int(p.N), int(p.K), int(p.E)
    return 9 * L * C * N + L * C * K + 3 * L * C * C * E


def flops_mamba_directions(p: FlopParams, num_directions: int) -> int:
    """:func:`flops_mamba` scaled for a module scanning ``num_directions`` orders."""
    if num_directions < 1:
        raise ParameterError("num_directions must be >= 1")
    return num_directions * flops_mamba(p)


def flops_cnn(p: FlopParams) -> int:
    """Sparse conv on L active sites with a full k³ neighbourhood: 2·Cin·Cout·k³·L + L·Cin·Cout."""
    L, ci, co, k = int(p.L), int(p.cin), int(p.cout), int(p.k)
    return 2 * ci * co * k**3 * L + L * ci * co


FLOP_FUNCTIONS = {"attention": flops_transformer, "mamba": flops_mamba, "sparse_conv": flops_cnn}


def analytic_ops(arch: str, p: FlopParams) -> int:
    if arch not in FLOP_FUNCTIONS:
        raise ParameterError(f"unknown architecture {arch!r}; choose from {ARCHES}")
    return FLOP_FUNCTIONS[arch](p)


# --- measurement --------------------------------------------------------------------


@dataclass
class ScalingReport:
    arch: str
    lengths: list[int]
    analytic: list[int]
    median_seconds: list[float]
    spreads: list[float]
    slope: float
    params: FlopParams
    reps: list[int] = field(default_factory=list)

    @property
    def analytic_exponent(self) -> float:
        return ANALYTIC_EXPONENT[self.arch]

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        for line in header.splitlines():
            buf.write(f"# {line}\n")
        buf.write("L,analytic_ops,median_seconds,slope\n")
        for L, ops, t in zip(self.lengths, self.analytic, self.median_seconds):
            buf.write(f"{L},{ops},{t:.6e},{self.slope:.4f}\n")
        return buf.getvalue()

    def to_plot_data(self, header: str = "") -> str:
        """Whitespace-separated columns with ``#`` comments, readable by gnuplot and np.loadtxt."""
        lines = [f"# {line}" for line in header.splitlines()]
        lines.append(f"# arch {self.arch} measured_slope {self.slope:.4f} analytic_exponent {self.analytic_exponent:g}")
        lines.append("# log2_L log10_seconds log10_analytic_ops")
        for L, ops, t in zip(self.lengths, self.analytic, self.median_seconds):
            lines.append(f"{np.log2(L):.4f} {np.log10(t):.6f} {np.log10(ops):.6f}")
        return "\n".join(lines) + "\n"


def fit_slope(lengths, seconds) -> float:
    """Least-squares slope of log(seconds) against log(L)."""
    slope, _ = np.polyfit(np.log(np.asarray(lengths, float)), np.log(np.asarray(seconds, float)), 1)
    return float(slope)


def _workload(arch: str, L: int, p: FlopParams, rng: np.random.Generator):
    if arch == "mamba":
        from .ssm import scan_kernel

        D, N = p.C, p.N
        u = rng.standard_normal((L, D))
        delta = rng.uniform(1e-3, 1e-1, (L, D))
        A = -rng.uniform(0.5, 2.0, (D, N))
        B = rng.standard_normal((L, N))
        C = rng.standard_normal((L, N))
        return lambda: scan_kernel(u, delta, A, B, C)
    if arch == "attention":
        from .model import full_attention

        q, k, v = (rng.standard_normal((L, p.C)) for _ in range(3))
        return lambda: full_attention(q, k, v)
    if arch == "sparse_conv":
        from .numerics import Tensor, no_tape
        from .pointcloud import morton_encode
        from .sparseconv import ConvKernel3D, SparseTensor, submanifold_conv

        side = int(np.ceil(L ** (1 / 3))) + 1
        flat = rng.choice(side**3, size=L, replace=False)
        coords = np.stack(np.unravel_index(flat, (side,) * 3), axis=1)
        keys = morton_encode(coords)
        order = np.argsort(keys)
        st = SparseTensor(coords[order], keys[order], rng.standard_normal((L, p.cin)))
        kern = ConvKernel3D(Tensor(rng.standard_normal((p.k**3, p.cin, p.cout))), None, p.k)
        st.kernel_map(p.k)

        def run():
            with no_tape():
                submanifold_conv(st, kern)

        return run
    raise ParameterError(f"unknown architecture {arch!r}; choose from {ARCHES}")


def time_callable(fn, reps: int, max_reps: int = 40, tolerance: float = 0.5) -> tuple[float, float, int]:
    """Median wall-clock over ``reps`` runs; doubles the count while spread exceeds ``tolerance``·median."""
    fn()  # warm-up (JIT compilation, caches)
    samples: list[float] = []
    target = reps
    while True:
        while len(samples) < target:
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        med = float(np.median(samples))
        q1, q3 = np.percentile(samples, [25, 75])
        spread = float(q3 - q1)
        if spread <= tolerance * med or target >= max_reps:
            if spread > tolerance * med:
                log.warning("timing spread %.3g s exceeds %.0f%% of median %.3g s after %d reps",
                            spread, 100 * tolerance, med, len(samples))
            return med, spread, len(samples)
        log.warning("timing spread %.3g s exceeds %.0f%% of median %.3g s; raising reps to %d",
                    spread, 100 * tolerance, med, 2 * target)
        target *= 2


def scaling_bench(arch: str, lengths, reps: int = 5, params: FlopParams | None = None,
                  seed: int = 0) -> ScalingReport:
    """Time ``arch`` at each length on one thread and fit the log-log slope."""
    if arch not in ARCHES:
        raise ParameterError(f"unknown architecture {arch!r}; choose from {ARCHES}")
    lengths = [int(L) for L in lengths]
    if len(lengths) < 3:
        raise ParameterError("need at least 3 lengths to fit a slope")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ParameterError("lengths must be strictly increasing")
    if reps < 1:
        raise ParameterError("reps must be >= 1")
    params = params or default_bench_params(arch)
    rng = np.random.default_rng(seed)
    medians, spreads, used = [], [], []
    with threadpool_limits(limits=1):
        for L in lengths:
            med, spread, n = time_callable(_workload(arch, L, params, rng), reps)
            medians.append(med)
            spreads.append(spread)
            used.append(n)
    analytic = [analytic_ops(arch, params.with_length(L)) for L in lengths]
    slope = fit_slope(lengths, medians)
    if not np.isfinite(slope):
        raise ParameterError("non-finite slope; timings too small to resolve")
    return ScalingReport(arch, lengths, analytic, medians, spreads, slope, params, used)


def default_bench_params(arch: str) -> FlopParams:
    """Widths for benchmarks; attention is kept narrow so the L²·C term dominates."""
    if arch == "attention":
        return FlopParams(L=1, C=16)
    if arch == "sparse_conv":
        return FlopParams(L=1, C=16)
    return FlopParams(L=1, C=32, N=16)


# --- model accounting -----------------------------------------------------------------


@dataclass
class BlockAccount:
    name: str
    block_type: str
    channels: int
    voxels: int
    params: int
    flops: dict[str, int]

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())


def block_flops(block_type: str, L: int, C: int, heads: int, cfg) -> dict[str, int]:
    """Per-block analytic counts: mixer terms from the closed forms, conv with a full k³ neighbourhood."""
    out: dict[str, int] = {}
    if block_type.startswith("cnn"):
        out["conv"] = flops_cnn(FlopParams(L=L, C=C, k=cfg.sparse_kernel))
    if "mamba" in block_type:
        p = FlopParams(L=L, C=C, N=cfg.ssm.state_dim, E=cfg.ssm.expand, K=cfg.ssm.conv_kernel)
        out["mamba"] = flops_mamba_directions(p, len(cfg.ssm.directions))
    if "transformer" in block_type:
        out["attention"] = flops_transformer(FlopParams(L=L, C=C))
    out["mlp"] = 2 * L * C * C * cfg.mlp_ratio
    return out

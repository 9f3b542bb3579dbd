"""Selective scan internals next to the analytic cost model."""

import math

import numpy as np

from meepo.analysis import FlopParams, flops_mamba, flops_transformer, scaling_bench
from meepo.numerics import ParamStore, Tensor, precision
from meepo.ssm import forget_gates, init_ssm_params, selective_scan, zoh_discretize

# One ZOH step with a = -1 and delta = ln 2 halves the state.
print("ZOH:", zoh_discretize(-1.0, 1.0, math.log(2)))

rng = np.random.default_rng(0)
store = ParamStore()
with precision(np.float64):
    p = init_ssm_params(store, "demo", 4, 8, 1, rng)
u = rng.standard_normal((32, 4))
gates = forget_gates(u, p)
print(f"forget gates lie in ({gates.min():.4f}, {gates.max():.4f})")

# B and C are read off the input, so a zero row contributes nothing. A step
# input shows the output drifting away from the D-skip value 1 as state accumulates.
y = selective_scan(Tensor(np.ones((32, 4))), p).data
print("step response, channel 0:", np.round(y[[0, 1, 2, 4, 8, 16, 31], 0], 4))

for e in (10, 14, 18, 20):
    fp = FlopParams(L=2**e)
    r = flops_mamba(fp) / flops_transformer(fp)
    print(f"L=2^{e}: mamba {flops_mamba(fp):.3e}  attention {flops_transformer(fp):.3e}  ratio {r:.2e}")

# Short timing run; the acceptance suite uses longer sequences.
rep = scaling_bench("mamba", [2**10, 2**11, 2**12], reps=3)
print(rep.to_csv(header="selective scan, one thread"))

#!/usr/bin/env python3
"""Independent arithmetic for the FLOP-accounting regression constants.

Recomputes, with plain integer arithmetic, the closed-form cost model used by
the accounting module:

  prefill layer with n tokens: attn = 8*n*d^2 + 4*n^2*d, mlp = 6*n*d*d_ff
  decode forward s (s = 1..steps-1), layer l: 8*d^2 + 4*(n_l + s)*d + 6*d*d_ff

Run this script to regenerate the constants frozen into test_runtime.cpp and
the acceptance suite.
"""
from fractions import Fraction

def prefill_flops(retained, d, d_ff):
    return sum(8 * n * d * d + 4 * n * n * d + 6 * n * d * d_ff for n in retained)

def staged_counts(m, stages, total_layers):
    # stage (layer, k): layers 1..l1 see m, layers l1+1..l2 see k1, ...
    counts = []
    cur = m
    idx = 0
    for layer in range(1, total_layers + 1):
        counts.append(cur)
        while idx < len(stages) and stages[idx][0] == layer:
            cur = stages[idx][1]
            idx += 1
    return counts

def equivalent_token_count(m, stages, total_layers):
    return Fraction(sum(staged_counts(m, stages, total_layers)), 1) / total_layers

D, DFF = 64, 172

sched = staged_counts(576, [(3, 288), (17, 86), (22, 0)], 32)
full = [576] * 32
f_sched = prefill_flops(sched, D, DFF)
f_full = prefill_flops(full, D, DFF)
print("retained per layer:", sched)
print("prefill flops, staged 576->288->86->0:", f_sched)
print("prefill flops, all-576:", f_full)
print("ratio staged/full:", f_sched / f_full)

for label, ratios in ((192, (0.50, 0.70, 1.00)), (128, (0.72, 0.75, 1.00)), (64, (0.95, 0.95, 1.00))):
    cur = Fraction(576)
    stages = []
    for layer, r in zip((3, 17, 22), ratios):
        cur = cur * (1 - Fraction(str(r)))
        stages.append((layer, cur))
    eq = equivalent_token_count(576, stages, 32)
    print(f"label {label}: exact stage counts {[float(k) for _, k in stages]} equivalent {float(eq)}")

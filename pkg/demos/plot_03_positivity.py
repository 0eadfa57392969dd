"""
Adaptive positivity selection and its contrastive loss
======================================================

Every object whose similarity to the probe beats phi becomes a positive.
Nothing is hand-picked, so the number of positives varies per segment.
"""

import math

import numpy as np
from apl_avqa import tensorcore as tc
from apl_avqa.positivity import LossConfig, positivity_loss, segment_loss, segment_records, select_positivity, similarity_row

f64 = lambda x: tc.tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)

# probe = o1 and o2 = -probe gives softmax([1, -1])
u = np.array([[0.3, -0.4, 1.2]])
s = similarity_row(f64(u), f64(np.vstack([u, -u])))
print("s =", np.round(s.data, 4))

# one positive at 0.6 and one negative at 0.4 with tau = 0.4
l = segment_loss(f64([0.6, 0.4]), np.array([True, False]), 0.4)
print("l =", round(l.item(), 4), "closed form", round(math.log(1 + math.exp(-0.5)), 4))

# with phi = 1/N + 0.005 the positives are the clearly-above-uniform objects
rng = np.random.default_rng(0)
row = rng.dirichlet(np.ones(8))
print("row", np.round(row, 3), "-> P", np.flatnonzero(select_positivity(row, 0.13)))

# a full batch: per-segment records show which objects were selected
F_q, F_O, F_A = rng.standard_normal((1, 1, 16)), rng.standard_normal((1, 32, 16)), rng.standard_normal((1, 4, 16))
config = LossConfig()
rep = positivity_loss(f64(F_q), f64(F_O), f64(F_A), config, N=8)
print("L_qo", rep.L_qo.item(), "L_ao", rep.L_ao.item())
for rec in segment_records(rep, config.resolve_phi(8))[:3]:
    print(rec["pairing"], "t", rec["t"], "P", rec["P"])

# selecting everything (phi = 0) makes both terms vanish
zero = positivity_loss(f64(F_q), f64(F_O), f64(F_A), LossConfig(phi=0.0), N=8)
print("phi=0 ->", zero.L_pc.item())

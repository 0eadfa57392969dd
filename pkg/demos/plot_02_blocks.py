"""
LSTM, attention and the transformer block
=========================================
"""

import numpy as np
from apl_avqa import tensorcore as tc
from apl_avqa.blocks import LSTM, TFM, MultiHeadAttention

rng = np.random.default_rng(1)

# encode a question of 5 word vectors; F_Q holds every step, F_q the last
lstm = LSTM(8, 16, rng)
F_Q, F_q = lstm(tc.tensor(rng.standard_normal((1, 5, 8))))
print("F_Q", F_Q.shape, "F_q", F_q.shape)

# attention weights are a distribution over keys
mha = MultiHeadAttention(16, 4, rng)
objects = tc.tensor(rng.standard_normal((1, 12, 16)))
out, att = mha(objects, F_Q, F_Q, return_attention=True)
print("attention", att.shape, "row sums", np.round(np.asarray(att).sum(-1)[0, 0, :3], 6))

# TFM(query, key, value): objects attend to the question words
block = TFM(16, 4, rng)
enhanced = block(objects, F_Q, F_Q)
print("enhanced objects", enhanced.shape)

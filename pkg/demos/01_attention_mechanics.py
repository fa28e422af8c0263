"""Walk through the three attention building blocks on tiny inputs:
scaled dot-product attention, sinusoidal position encodings, and
single-scale deformable sampling attention."""

import numpy as np

from setpose import (
    DeformableConfig,
    RngState,
    Tensor,
    deformable_attention,
    scaled_dot_attention,
    sinusoidal_pos_encoding,
)
from setpose.attention import init_deformable_params

np.set_printoptions(precision=3, suppress=True)

print("== scaled dot-product attention ==")
q = Tensor([[1.0, 0.0], [0.0, 1.0]])
k = Tensor([[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]])
v = Tensor([[10.0, 0.0], [0.0, 10.0], [5.0, 5.0]])
out = scaled_dot_attention(q, k, v)
print("two queries attending over three keys:")
print(out.data)
print("each output row is a convex mix of the value rows;")
print("the first query leans toward the first key, the second toward the second.\n")

print("== zero queries give the uniform average ==")
uniform = scaled_dot_attention(Tensor(np.zeros((1, 2))), k, v)
print(uniform.data, "== column means of v:", v.data.mean(axis=0), "\n")

print("== sinusoidal position encodings ==")
enc = sinusoidal_pos_encoding(4, 6)
print("four positions, six channels (sin/cos interleaved):")
print(enc.data)
print("position 0 is all (sin=0, cos=1); every value stays inside [-1, 1].\n")

print("== deformable sampling attention ==")
rng = RngState(0)
fmap = Tensor(rng.uniform((5, 5, 4), 0.0, 1.0))
cfg = DeformableConfig(sample_points=3)
params = init_deformable_params(4, cfg, RngState(1))
queries = Tensor(rng.uniform((2, 4), -1.0, 1.0))
refs = [(2.0, 2.0), (3.0, 1.0)]
out = deformable_attention(queries, refs, fmap, cfg, params)
print("each query predicts 3 sample offsets around its reference point,")
print("bilinearly samples the feature map there, and mixes the samples:")
print(out.data)

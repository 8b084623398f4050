"""Anatomy of one mixed attention stage.

The stage splits into a main branch M(x) (residual units) and a U-shaped
attention branch whose sigmoid gate yields a mask A(x) in (0, 1).  The
combination M(x) * (1 + A(x)) keeps an identity path: as the mask goes to
zero the stage degrades to its plain main branch.
"""

import numpy as np

from spatiodec import attention_branch, attention_module, init_attention_module, res_unit
from spatiodec.tensor import value_of

rng = np.random.default_rng(7)
params = init_attention_module(rng, stage_index=1, c_in=4, c_out=8, stride=2, depth=1)
x = rng.standard_normal((2, 4, 12, 12, 12)).astype(np.float32)

a, pre_gate = attention_branch(x, params, "infer")
print(f"input {x.shape}")
print(f"mask A: {a.shape}, range ({a.min():.3f}, {a.max():.3f}) -- strictly inside (0, 1)")

out = attention_module(x, params, "infer")
m = x
for ru in params.main:
    m = res_unit(m, ru, "infer")
m = value_of(m)
ratio = value_of(out)[m != 0] / m[m != 0]
print(f"stage output: {value_of(out).shape}")
print(f"output / M(x) lies in ({ratio.min():.3f}, {ratio.max():.3f}) -- inside (1, 2)")

# Forcing the mask to zero reproduces the main branch exactly.
hooked = attention_module(x, params, "infer", attention_hook=lambda shape: np.zeros(shape))
print("zero-mask hook equals main branch bitwise:", np.array_equal(value_of(hooked), m))

# Mask capture is a pure observer: recording changes nothing.
sink = []
recorded = attention_module(x, params, "infer", record_sink=sink)
print(
    f"captured {len(sink)} record (stage {sink[0].stage_index}, A {sink[0].A.shape}); "
    f"output unchanged: {np.array_equal(value_of(recorded), value_of(out))}"
)

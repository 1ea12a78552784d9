"""
FPD-M-net and U-net side by side
================================

Layer tables and parameter counts for the reduced and the full-size
networks, plus a forward pass on a native-size image.
"""
import time

import numpy as np

from fpdmnet.data import generate_ridge_pattern, pad_edge, unpad
from fpdmnet.model import ModelConfig, build, param_count

small = build(ModelConfig(depth=2, base=4), seed=0)
print(small.summary())

for arch, order in [("fpd-mnet", "before"), ("fpd-mnet", "after"), ("unet", "before")]:
    net = build(ModelConfig(arch=arch, bn_order=order), seed=0)
    print(f"{arch:<9} bn {order:<6} depth 4 base 64: {param_count(net):>10,d} parameters")

# A native 275x400 image is edge-padded to 368x496 and cropped back after.
img = generate_ridge_pattern(0)
x = pad_edge(img)
print("padded", img.shape, "->", x.shape)

net = build(ModelConfig(depth=2, base=8), seed=0)
start = time.perf_counter()
y = net.forward(x[None, None], mode="infer").data
print("untrained output", unpad(y[0, 0]).shape, "range %.3f..%.3f" % (y.min(), y.max()),
      "in %.2fs" % (time.perf_counter() - start))

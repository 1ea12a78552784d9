"""
Autodiff tour
=============

Build a small graph by hand, pull gradients out of it, and then let the
finite-difference checker confirm them.
"""
import numpy as np

from fpdmnet import autodiff as ad
from fpdmnet.autodiff import Tensor
from fpdmnet.gradcheck import grad_check, run_suite

rng = np.random.default_rng(0)

# A 3x3 convolution followed by a sigmoid and a mean is already enough to
# exercise the im2col path, broadcasting of the bias and the reduction.
x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.2, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)

loss = ad.mean(ad.sigmoid(ad.conv2d(x, w, b)))
ad.backward(loss)
print("loss", float(loss.data))
print("|dL/dw|", np.abs(w.grad).sum(), " dL/db", np.round(b.grad, 5))

# Calling backward again overwrites the gradients rather than adding to them.
ad.backward(loss)
print("second backward, same dL/db:", np.round(b.grad, 5))

# The checker probes every coordinate at two step sizes.
report = grad_check(lambda x, w, b: ad.mean(ad.sigmoid(ad.conv2d(x, w, b))), [x, w, b], op_name="conv+sigmoid")
print(report.row())

# A ReLU has a kink at zero. Coordinates that straddle it get skipped, not failed.
z = Tensor(np.array([-1.0, 0.0, 2.0, 3.0]), requires_grad=True)
print(grad_check(lambda t: ad.tsum(ad.relu(t)), [z], op_name="relu at 0").row())

# And the full registry, the same one `fpdm gradcheck` runs.
for r in run_suite(["conv2d", "maxpool2x2", "batchnorm_train", "ms_ssim"]):
    print(r.row())

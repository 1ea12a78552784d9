"""
How the quality metrics react
=============================

SSIM, 3-scale MS-SSIM and PSNR on a synthetic print as it gets noisier,
blurrier and darker.
"""
import numpy as np
from scipy import ndimage

from fpdmnet.data import generate_ridge_pattern
from fpdmnet.metrics import LossConfig, combined_loss, ms_ssim, psnr, ssim

clean = generate_ridge_pattern(3)
rng = np.random.default_rng(1)

print(f"{'variant':<22}{'psnr':>8}{'ssim':>8}{'ms-ssim':>9}{'loss':>8}")


def show(name, img):
    img = np.clip(img, 0, 1)
    print(f"{name:<22}{psnr(img, clean):8.2f}{ssim(img, clean):8.4f}{ms_ssim(img, clean):9.4f}"
          f"{combined_loss(img, clean):8.4f}")


show("identical", clean)
for sigma in (0.01, 0.05, 0.1, 0.2):
    show(f"noise {sigma}", clean + sigma * rng.standard_normal(clean.shape))
for blur in (1.0, 2.0):
    show(f"blur {blur}", ndimage.gaussian_filter(clean, blur))
show("darker by 0.1", clean - 0.1)

# Shifting by a single pixel is enough to drop PSNR a lot, since the ridges
# are nearly binary. MS-SSIM is more forgiving at the coarse scales.
show("shift 1px", np.roll(clean, 1, axis=1))

# The loss mixes the two terms. delta = 1 would be pure MS-SSIM.
noisy = np.clip(clean + 0.1 * rng.standard_normal(clean.shape), 0, 1)
for delta in (0.0, 0.5, 0.85, 1.0):
    print(f"delta {delta:<4} loss {combined_loss(noisy, clean, LossConfig(delta=delta)):.4f}")

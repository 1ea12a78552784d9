"""
Making training pairs
=====================

Grow a ridge pattern, then push it through the distortion stages one at a
time. Writes a strip of PNGs into ./demo_out so the stages can be compared.
"""
from dataclasses import replace
from pathlib import Path

import numpy as np

from fpdmnet.data import DistortionConfig, DistortionRanges, degrade, generate_ridge_pattern, make_dataset, warp
from fpdmnet.imageio import save_image

out = Path("demo_out")
out.mkdir(exist_ok=True)

clean = generate_ridge_pattern(seed=12, ridge_period=9)
print("clean print", clean.shape, "ink fraction %.2f" % (clean < 0.5).mean())

full = DistortionConfig(blur_sigma=0.8, brightness_delta=-0.05, contrast_gain=0.8, elastic_alpha=3.0,
                        occlusion_fraction=0.08, scratch_count=3, rotation_deg=5.0, background_blend=0.4,
                        resolution_factor=1.3, seed=4)
stages = ["rotation_deg", "elastic_alpha", "blur_sigma", "resolution_factor", "contrast_gain",
          "background_blend", "scratch_count", "occlusion_fraction"]

# Switch the stages on cumulatively. Each stage has its own random stream, so
# turning one on never changes what the others draw.
cfg = DistortionConfig(seed=full.seed)
strip = [clean]
for name in stages:
    cfg = replace(cfg, **{name: getattr(full, name)})
    img = degrade(clean, cfg)
    strip.append(img)
    print(f"+ {name:<20} mean {img.mean():.3f}")
save_image(np.concatenate(strip, axis=1), out / "stages.png")

# The target of a pair is the clean print with only the geometric stages
# applied, so its ridges line up with the distorted input.
target = np.clip(warp(clean, full), 0, 1)
save_image(np.concatenate([degrade(clean, full), target], axis=1), out / "pair.png")

manifest = make_dataset(6, seed=21, out_dir=out / "dataset", ranges=DistortionRanges())
print(len(manifest.entries), "pairs written to", manifest.root)

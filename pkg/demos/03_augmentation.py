r"""
Training-time distortions
=========================

Every training sample is a random ten-frame window. The window may be
mirrored, gets one brightness shift, and is cut with a random box that is at
least 202 pixels tall, covers at least 55% of the frame and stretches by no
more than 4%. The box is then resized to the network input. This script
samples boxes, checks them, and writes a contact sheet of distorted clips to
``demo_output/augment.png``.

Run with ``python3 demos/03_augmentation.py``.
"""
from pathlib import Path

import numpy as np
from PIL import Image

from drowsy3d.augment import AugmentConfig, augment_sample, min_crop_height, sample_crop_box
from drowsy3d.data import render_clip

rng = np.random.default_rng(0)
cfg = AugmentConfig()

# %%
# Crop boxes. ``x`` is the box height, ``y`` its width.
print("smallest feasible box height:", min_crop_height())
boxes = [sample_crop_box(rng, cfg) for _ in range(10_000)]
area = np.array([b.x * b.y for b in boxes]) / (240 * 320)
aspect = np.array([b.y / b.x for b in boxes])
print(f"area fraction {area.min():.3f}..{area.max():.3f}, aspect {aspect.min():.3f}.."
      f"{aspect.max():.3f}, heights {min(b.x for b in boxes)}..{max(b.x for b in boxes)}")

# %%
# A 100-frame synthetic training record, distorted four times. Each row of
# the sheet is one sample; columns are its ten frames.
clip = np.concatenate([render_clip(k, rng)[0] for k in
                       ("alert", "nod", "closure", "alert", "nod", "alert", "closure", "nod",
                        "alert", "nod")])
rows = []
for _ in range(4):
    sample = augment_sample(clip, AugmentConfig(output_size=96), rng)  # (96, 96, 10, 1)
    rows.append(np.concatenate([sample[:, :, t, 0] for t in range(10)], axis=1))
sheet = np.concatenate(rows, axis=0)
out = Path("demo_output")
out.mkdir(exist_ok=True)
Image.fromarray((sheet * 255).round().astype(np.uint8)).save(out / "augment.png")
print("wrote", out / "augment.png", sheet.shape)

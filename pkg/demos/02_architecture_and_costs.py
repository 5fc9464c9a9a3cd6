r"""
Architecture and cost
=====================

Builds the early-fusion model at the published size (multiplier 1.4, ten
224x224 grayscale frames) and prints its row-by-row shape trace. It then
compares parameters and multiply-accumulates across the four variants and
three depth multipliers.

Run with ``python3 demos/02_architecture_and_costs.py``.
"""
import numpy as np

from drowsy3d.network import NetworkConfig, build_model, count_flops, count_params


def fmt(shape):
    return "x".join(str(s) for s in shape)


# %%
# The stem convolves space and time together (stride 2 in both); the 3D
# bottleneck then folds the five remaining frames into one, and the rest of
# the network is an ordinary 2D MobileNetV2 tail.
model = build_model(NetworkConfig("ours_early", depth_multiplier=1.4, frames=10, spatial=224))
print(f"{'operator':<14}{'input':>16}{'output':>16}")
for op, shape_in, shape_out in model.stage_trace():
    print(f"{op:<14}{fmt(shape_in):>16}{fmt(shape_out):>16}")

logits = model.forward(np.zeros((1, 224, 224, 10, 1), np.float32))
print("logits", logits.shape)

# %%
# Cost table. Early fusion spends its temporal work in two layers; late fusion
# runs the whole 2D column on every frame; slow fusion keeps the time axis
# through every block.
print(f"\n{'variant':<12}{'mult':>6}{'params':>12}{'MMACs':>10}")
for variant in ("ours_early", "late_fusion", "slow_fusion", "mobilenet2d"):
    for mult in (0.35, 0.75, 1.4):
        m = build_model(NetworkConfig(variant, mult, 10, 224))
        print(f"{variant:<12}{mult:>6}{count_params(m):>12,}{count_flops(m) / 1e6:>10.0f}")

# %%
# Sample length barely matters for early fusion: only the stem and the 3D
# bottleneck see the time axis.
for frames in (5, 10):
    m = build_model(NetworkConfig("ours_early", 1.4, frames, 224))
    print(f"ours_early with {frames:>2} frames: {count_flops(m) / 1e6:.0f} MMACs")

r"""
Temporal model vs. single-frame model
=====================================

Trains the early-fusion 3D network and the single-frame 2D network on the
same synthetic split at desk scale (spatial 96, multiplier 0.35). The 3D
model sees ten frames and learns to tell blinks from sustained closures and
nods. The 2D model sees only the newest frame, which carries no label
information by construction. Its training loss falls because it memorizes
the training clips, but its held-out accuracy stays near chance.

The defaults reproduce the acceptance run and take several minutes on one
CPU core. Pass a smaller step count for a quicker look, e.g.
``python3 demos/05_temporal_vs_single_frame.py 250``.
"""
import sys
import time

from drowsy3d.data import generate_synthetic
from drowsy3d.network import NetworkConfig, build_model
from drowsy3d.train import TrainConfig, evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400

train_set = generate_synthetic(400, seed=1)
eval_set = generate_synthetic(100, seed=2)
config = TrainConfig(lr_initial=0.02, batch_size=16, eval_every=50, max_steps=steps)

# %%
# Held-out accuracy is measured with batch-norm running statistics, which
# need a couple of hundred steps to catch up with the weights; expect 0.50
# for the first few evaluations.
for variant in ("ours_early", "mobilenet2d"):
    print(f"\n{variant}\nstep\tlr\tloss\teval_accuracy")
    model = build_model(NetworkConfig(variant, 0.35, 10, 96), seed=0)
    t0 = time.perf_counter()
    train(model, train_set, config, seed=0, eval_dataset=eval_set,
          on_eval=lambda row: print(row.line(), flush=True))
    print(f"train accuracy {evaluate(model, train_set):.2f}, "
          f"eval accuracy {evaluate(model, eval_set):.2f}, {time.perf_counter() - t0:.0f} s")

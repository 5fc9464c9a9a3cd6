r"""
Real-time monitor
=================

Three threads share the work. A producer pushes frames into a ten-frame
ring at the camera rate. A worker snapshots the newest ten frames and runs
the model. A consumer turns each result into a WARN event (drowsy
probability above the threshold) or, in demo mode, an OK event. The worker
never waits for the consumer: an unread result is replaced by a newer one.

This script trains a small model for a few steps, then replays a synthetic
30 fps stream through it for ten seconds. It prints the event log and the
run summary, including the checks the runtime promises.

Run with ``python3 demos/06_streaming_monitor.py``.
"""
from drowsy3d.data import generate_synthetic
from drowsy3d.network import NetworkConfig, build_model, strip_for_inference
from drowsy3d.stream import WarningPolicy, run_monitor, synthetic_source
from drowsy3d.train import TrainConfig, train

# %%
# A quickly trained toy model; stripping freezes batch norm in inference
# mode and drops gradient bookkeeping.
model = build_model(NetworkConfig("ours_early", 0.35, 10, 64), seed=0)
train(model, generate_synthetic(64, seed=1, height=120, width=160),
      TrainConfig(lr_initial=0.02, max_steps=40, eval_every=40, batch_size=8), seed=0)
model = strip_for_inference(model)

# %%
# Ten seconds of synthetic video; events print as they happen:
# ``timestamp  window  probability  kind``.
source = synthetic_source(seed=5, size=64, fps=30, height=240, width=320)
summary = run_monitor(source, model, WarningPolicy(threshold=0.5, emit_low=True), print,
                      duration=10.0, processing_delay=0.01)

# %%
print()
print(summary.report(), end="")
for name, ok in summary.checks(fps=30).items():
    print(f"{name:<18}{ok}")
print(f"{'overlap_seen':<18}{summary.overlap_seen}")

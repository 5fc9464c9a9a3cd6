r"""
The synthetic drowsiness task and record files
==============================================

The real driver videos are not redistributable, so the package includes a
synthetic stand-in. Every clip shows a schematic face. Alert clips blink
(three closed-eye frames) and hold still. Drowsy clips either keep the eyes
closed for most of the clip or nod downward. Every frame index is equally
likely to show closed eyes in both classes, so no single frame reveals the
label. Only the temporal pattern does.

The script also writes the clips to a record file and reads them back.

Run with ``python3 demos/04_synthetic_data_and_records.py``.
"""
import tempfile
from pathlib import Path

import numpy as np

from drowsy3d.data import (CLOSURE_SHARE, DatasetManifest, _closed_run, generate_synthetic,
                           read_records, render_clip, write_dataset)

rng = np.random.default_rng(0)

# %%
# What each clip kind looks like over time.
for kind in ("alert", "closure", "nod"):
    _, closed, rows = render_clip(kind, rng, 10, 240, 320)
    eyes = "".join("#" if c else "." for c in closed)
    print(f"{kind:<8} eyes {eyes}   face row {rows[0]:6.1f} -> {rows[-1]:6.1f}")

# %%
# Frame-level statistics are matched: the chance that frame t shows closed
# eyes is the same for both labels at every t.
n = 20_000
alert = np.array([_closed_run(rng, 10, "alert") for _ in range(n)])
drowsy = np.array([_closed_run(rng, 10, "closure" if rng.random() < CLOSURE_SHARE else "nod")
                   for _ in range(n)])
print("P(closed) per frame, alert :", alert.mean(0).round(2))
print("P(closed) per frame, drowsy:", drowsy.mean(0).round(2))
majority = np.r_[alert.mean(1) > 0.5, drowsy.mean(1) > 0.5]
labels = np.r_[np.zeros(n), np.ones(n)]
print(f"majority-of-frames rule accuracy: {(majority == labels).mean():.3f}")

# %%
# Records: 8-bit frames behind a small binary header, plus a tab-separated
# manifest.
records = generate_synthetic(20, seed=3, frames=10, height=240, width=320)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "synthetic.ddr"
    manifest = write_dataset(records, path)
    manifest.write(Path(tmp) / "manifest.tsv")
    print("file size:", path.stat().st_size, "bytes for", len(records), "records")
    print("manifest:", (Path(tmp) / "manifest.tsv").read_text().strip())
    back = DatasetManifest.read(Path(tmp) / "manifest.tsv").load()
    same = all(a.label == b.label and np.array_equal(a.frames, b.frames)
               for a, b in zip(records, back))
    print("round trip identical:", same and len(back) == len(read_records(path)) == 20)

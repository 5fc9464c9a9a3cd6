"""Lightweight 3D convolutional networks for drowsiness detection in video.

Modules:

- :mod:`drowsy3d.tensor` - numpy convolution, batch-norm and loss kernels with
  hand-written backward passes.
- :mod:`drowsy3d.network` - architecture tables, the early/late/slow fusion
  and single-frame variants, cost counting, inference stripping, weight files.
- :mod:`drowsy3d.train` - momentum SGD, learning-rate schedule, freezing.
- :mod:`drowsy3d.augment` - training-time clip distortions.
- :mod:`drowsy3d.data` - dataset preparation, record files, synthetic task.
- :mod:`drowsy3d.stream` - three-thread real-time monitor.
- :mod:`drowsy3d.cli` - the ``drowsy3d`` command.
"""

__version__ = "0.1.0"

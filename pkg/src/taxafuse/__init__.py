"""taxafuse: hierarchical multimodal species classification at desk scale.

Submodules:
  taxonomy   six-level hierarchy, exact marginalisation
  encoding   context vector encoding, image preprocessing
  rasters    binary raster format, patch extraction
  dataset    observation parsing, splits, sampling weights, k-fold
  synthetic  synthetic worlds with known ground truth
  ndiff      reverse-mode autodiff core, SGD, schedulers, checkpoints
  model      branch networks, fusion strategies, losses
  training   training loops for all fusion modes
  evaluation metrics, per-level and unseen-species reports
  cli        command-line experiments
"""

__version__ = "0.1.0"

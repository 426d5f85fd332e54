"""Two-level self-supervised learning for multimodal clinical-style time series.

The package pre-trains a trajectory encoder with a sequence-level (global)
and a per-timestep signal-level (component) SSL objective, then fine-tunes
and evaluates on downstream window-labeling tasks. Everything runs on a
small reverse-mode autodiff engine over numpy float64 arrays, so results
are deterministic and desk-scale.
"""

__version__ = "0.1.0"

"""Prediction of individual task-activation maps from resting-state connectomes.

Subpackages are imported directly: `opic.mesh`, `opic.nncore`,
`opic.connectome`, `opic.synthdata`, `opic.models`, `opic.baselines`,
`opic.metrics`, `opic.dataset`, `opic.cli`.
"""

__version__ = "0.1.0"

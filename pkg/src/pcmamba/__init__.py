"""Predictive-corrective selective state-space segmentation on a numpy autodiff core.

Modules: ``tensor`` (autodiff), ``ssm`` (selective scan), ``pcblock``
(symmetry prior, density correction, fusion), ``network`` (U-shaped model and
ablation variants), ``data`` (synthetic phantoms), ``metrics``, ``train``,
``verify`` (oracles and probes) and ``cli``.
"""

__version__ = "0.1.0"

"""Barrier-function policy adaptation.

Modules: :mod:`cbf_core` (closed-form CBF-QP and its KKT oracle),
:mod:`scalar_flow` (safe gradient flow on explicit objectives), :mod:`nn`
(numpy MLPs with reverse-mode gradients), :mod:`envs` (cartpole and unicycle),
:mod:`rl` (DDPG pretraining and adaptation), :mod:`experiments` and :mod:`cli`.
"""
from ._accel import ENABLE_NUMBA

__version__ = "0.1.0"
__all__ = ["ENABLE_NUMBA", "__version__"]

"""Elastic multi-gradient descent for parallel continual learning.

Subpackages:
  solver      Pareto descent direction solvers with elastic factors.
  net         Minimal dense network engine (backbone + per-task heads).
  streams     Parallel-split task streams, timelines and loaders.
  rehearsal   Class-balanced memory buffer with gradient-guided editing.
  experiment  Training loop, toy problem and continual-learning metrics.
  cli         Command-line front end.
"""

__version__ = "0.1.0"

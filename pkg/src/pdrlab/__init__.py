"""Pedestrian positioning from radio fixes and inertial data.

Submodules: ``simkit`` (synthetic recordings), ``streams`` and ``pipeline``
(synchronisation and windowing), ``classic`` (dead reckoning and orientation),
``kalman`` (constant-velocity filter), ``neuralnet`` (recurrent fusion network),
``evalkit`` (metrics and comparison designs) and ``cli``.
"""

__version__ = "0.1.0"

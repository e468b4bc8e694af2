"""Conditional diffusion Schrodinger bridges in numpy.

Modules: ``chain`` (noising chains and schedules), ``approx`` (ridge and MLP
drift regressors), ``refmeasure`` (reference distributions), ``bridge``
(iterative proportional fitting, sampling, evidence), ``problems`` (test
problems and state-space models), ``filtering`` (EnKF, particle filter and
bridge-based assimilation), ``oracle`` (independent ground truth),
``evaluate`` (acceptance checks) and ``cli``.
"""

__version__ = "0.1.0"

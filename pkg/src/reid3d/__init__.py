"""3D-normalised coat-pattern re-identification of striped quadrupeds.

Stages: synthetic population, detection filtering and species gating,
model fitting, texture back-projection, metric learning and kNN
identification.
"""

__version__ = "0.1.0"

"""Downscaling of coarse-support (census-unit) variables onto a fine quadkey grid.

Pipeline: aggregate multi-scale covariates onto the source and hybrid
supports, select features with a cross-validated GLM-LASSO, admit
better-modelled census variables as extra covariates (forward learning),
train a random forest per variable, predict on the hybrid support in
dependency order, anchor the predictions to the source data, and aggregate
to the target grid.
"""

__version__ = "0.1.0"

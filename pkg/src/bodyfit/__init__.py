"""Body model fitting from point clouds: models, landmark prediction,
scale estimation and an optimization-based fitter."""

__version__ = "0.1.0"

"""Mean-field training of continuous-depth residual networks as a Wasserstein gradient flow.

Parameters of a depth-continuous network are a curve of particle measures
over the layer variable; training is the gradient flow of a regularized loss
over that curve. The package provides exact optimal transport on particle
measures, RK4 forward and adjoint sweeps, the flow itself and fits of its
convergence rate.
"""

from importlib.metadata import PackageNotFoundError, version

from mflab.errors import MflabError
from mflab.measures import DataMeasure, DiscreteMeasure, ParameterPath, w2
from mflab.model import GatedTanh, LinearTanh, SquaredError, make_model

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.1.0"

__all__ = [
    "MflabError",
    "DataMeasure",
    "DiscreteMeasure",
    "ParameterPath",
    "w2",
    "GatedTanh",
    "LinearTanh",
    "SquaredError",
    "make_model",
    "__version__",
]

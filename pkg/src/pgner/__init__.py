"""Named-entity extraction framed as sequence generation over noisy legal complaints."""

from ._accel import backend_name

__version__ = "0.1.0"
__all__ = ["backend_name", "__version__"]

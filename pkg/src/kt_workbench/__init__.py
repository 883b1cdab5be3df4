"""Knowledge tracing workbench: BKT, DKT and AKT on a small numpy autodiff engine."""

from .errors import KTError

__version__ = "0.1.0"

__all__ = ["KTError", "__version__"]

"""Language-conditioned video critics as dense rewards for a toy manipulation world."""

from .config import __version__

__all__ = ["__version__"]

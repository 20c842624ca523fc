"""protosim: a deterministic hosted simulator of a small instructional OS."""

from .kernel import Kernel

__all__ = ["Kernel"]
__version__ = "0.1.0"

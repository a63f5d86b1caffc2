"""mixtrain: a miniature training engine for interleaved self-supervised and
supervised learning with exact compute accounting."""

__version__ = "0.1.0"

from .tensor import Tensor, GradientTape, backward  # noqa: F401

"""Joint image-text representation learning: encoders, matching losses,
training loops and retrieval/classification evaluation."""

__version__ = "0.1.0"

from .kernels import LossConfig  # noqa: F401
from .losses import AblationSetting  # noqa: F401

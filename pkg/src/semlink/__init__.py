"""semlink: desk-scale simulator of a robust semantic speech-to-text link."""

__version__ = "0.1.0"

from semlink.autodiff import Tensor, Tape, grad_check  # noqa: F401

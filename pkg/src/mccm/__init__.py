"""Cost model for multiple-compute-engine CNN accelerators on FPGAs."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("mccm")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .composer import EvalReport, compose, evaluate  # noqa: E402
from .builder import Accelerator, build  # noqa: E402
from .descriptors import CnnModel, ConvLayer, FpgaPlatform, load_cnn, load_platform  # noqa: E402
from .notation import AcceleratorSketch, format_accelerator, parse_accelerator  # noqa: E402

__all__ = [
    "Accelerator", "AcceleratorSketch", "CnnModel", "ConvLayer", "EvalReport", "FpgaPlatform",
    "build", "compose", "evaluate", "format_accelerator", "load_cnn", "load_platform", "parse_accelerator",
]

"""Monte Carlo ray-tracing simulator of a focus-variation microscope."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("fvsim")
except PackageNotFoundError:  # running from a source tree without installation
    __version__ = "0.1.0"

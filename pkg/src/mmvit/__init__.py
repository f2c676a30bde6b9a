"""Multiscale multiview vision transformer kit built on a small numpy autodiff engine."""

__version__ = "0.1.0"

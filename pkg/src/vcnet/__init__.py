"""vcnet: dual-stream visual-cortex network on a small numpy autodiff engine."""

__version__ = "0.1.0"

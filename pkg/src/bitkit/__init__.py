"""bitkit: desk-scale transfer learning with ResNet-v2 on a numpy autodiff engine."""

__version__ = "0.1.0"

"""Cross-modal 2D-to-3D feature distillation at desk scale."""

__version__ = "0.1.0"

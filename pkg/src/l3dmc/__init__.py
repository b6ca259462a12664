"""Mixed-curvature kernel subspace distillation for class-incremental learning."""

__version__ = "0.1.0"

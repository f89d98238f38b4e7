"""Few-shot distillation by grafting student blocks into a frozen teacher."""

__version__ = "0.1.0"

"""Dataset synthesis, training orchestration, RD evaluation and reporting."""

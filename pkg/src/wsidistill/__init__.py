"""Multi-view self-distillation pretraining for pyramid-structured images,
with few-shot adaptation and downstream evaluation tools."""

__version__ = "0.1.0"

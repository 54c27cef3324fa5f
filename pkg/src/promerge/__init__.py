"""Few-shot model merging toolkit.

Merges fine-tuned experts into one model by training per-task merging
coefficients against the experts' internal activations, either end-to-end or
progressively layer by layer, alongside fixed-coefficient task arithmetic.
Also ships executable adversarial constructions demonstrating that mergers
which never see task data can be forced to fail arbitrarily badly, and a
synthetic multi-task harness for comparing everything.
"""

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"

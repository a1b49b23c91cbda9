"""Two-phase training toolkit for data-deficient image classification.

Phase 1 pre-trains an encoder with a margin-augmented contrastive loss,
a momentum key encoder and a FIFO negative queue.  Phase 2 fine-tunes a
student classifier while a frozen copy of the phase-1 encoder regularizes
it through a feature-map distillation loss.
"""

__version__ = "0.1.0"

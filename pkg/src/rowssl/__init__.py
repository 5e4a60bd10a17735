"""Long-tailed open-world semi-supervised learning on embedding vectors.

The package trains a small encoder/projector pair with a momentum key network,
a FIFO feature queue, density-aware per-anchor contrastive temperatures, and
class-uncertainty-biased soft pseudo-labels, then scores the result under a
transductive/inductive evaluation matrix with Hungarian-matched accuracies.
"""

__version__ = "0.1.0"

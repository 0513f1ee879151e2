"""Uncertainty-aware weak-pair metric learning for cross-modal retrieval.

Subpackages cover the full pipeline: a reverse-mode autodiff kernel
(autograd), synthetic multi-view data (data), embedding towers and the
fusion head (encoders), the loss family (losses), weak-pair sampling and
hard-negative mining (mining), the deterministic trainer (training), the
ranking-diagnostic battery (metrics), gradient verification (verify), and
the command-line entry point (cli).
"""

__version__ = "0.1.0"

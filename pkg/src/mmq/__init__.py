"""Multiple meta-model quantifying on a desk-scale synthetic benchmark.

Modules, bottom up: ``autodiff`` (reverse-mode tensors), ``network`` (4-conv
feature extractor), ``data`` (meta/unlabeled pool and episodes), ``maml``,
``refinement`` (auto-annotation loop), ``quantify`` (fuse-score selection),
``downstream`` (fused-feature classifier), ``synthetic``, ``config``,
``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"

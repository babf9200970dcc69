"""quantlab: a desk-scale laboratory for smoothness-aware extreme quantization.

Library layout:

- ``engine``        reverse-mode autodiff with differentiable backward passes
- ``model``         tiny decoder-only transformer with gradient tap points
- ``quant``         fixed-point / ternary quantization math and packing
- ``gptq``          Hessian-based layer reconstruction (forward and backward)
- ``smoothness``    input-gradient smoothness proxies and layer profiles
- ``neighborhood``  reverse-perplexity curves and decoding-tree sparsity
- ``lgp``           learnable-clipping PTQ with gradient preservation
- ``lgr``           ternary QAT with gradient-norm regularization
- ``weightspace``   anisotropy interpolation and null-space feasibility
- ``harness``       corpus ingestion, experiment orchestration, CSV artifacts
- ``checkpoint``    binary model persistence
- ``cli``           the ``quantlab`` command
"""

__version__ = "0.1.0"

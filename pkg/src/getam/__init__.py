"""Toy-scale lab for gradient-weighted transformer attention maps.

Subpackages cover: a minimal reverse-mode tensor engine (``autodiff``), an
instrumented vision transformer (``vit``), class-wise attention-map
construction (``attribution``), saliency-guided pseudo-label completion
(``labels``), the double-backward training loop (``training``), a synthetic
shapes dataset plus metrics (``data``), and a command-line front end
(``cli``).
"""

__version__ = "0.1.0"

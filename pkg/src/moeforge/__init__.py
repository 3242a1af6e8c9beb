"""moeforge: desk-scale mixture-of-experts continual learning.

A small, dependency-free research framework: a residual MoE encoder with
per-task routers, usage-driven expert merging and freezing, a synthetic
multi-domain task generator, autoencoder task inference, and a
Transfer/Average/Last metric suite — all bit-reproducible across runs
and across the compiled/pure-Python kernel backends.
"""

from . import backend
from .errors import MoeForgeError

__version__ = "0.1.0"

__all__ = ["backend", "MoeForgeError", "__version__"]

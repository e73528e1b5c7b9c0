"""ytower: numerical construction and verification of Young structures
(inducing schemes with product structure and exponential return-time tails)
for concrete partially hyperbolic maps with mostly contracting central
direction.
"""

__version__ = "0.1.0"

from .maps import get_map  # noqa: F401

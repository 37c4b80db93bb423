"""Desk-scale asynchronous deep model reference adaptive control testbed.

A simulated uncertain attitude plant is tracked by PID, shallow MRAC, or
DMRAC controllers; DMRAC's output-layer weights adapt at the fast loop
rate under a Lyapunov-derived projection law while the inner feature
layers are trained asynchronously by a slow process across a lossy
datagram link.
"""

from . import buffer, cli, controllers, harness, linalg, link, net, plant, trainer

__all__ = [
    "buffer",
    "cli",
    "controllers",
    "harness",
    "linalg",
    "link",
    "net",
    "plant",
    "trainer",
]

__version__ = "0.1.0"

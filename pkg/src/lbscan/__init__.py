"""Locally bi-directional selective scan toolkit.

A linear-recurrence (selective state-space) scan library built around three
execution strategies: a deliberately naive sequential oracle, a tiled
worker-parallel engine that mirrors a GPU thread/register execution model,
and a globally bi-directional baseline.  On top of the scan sit an encoder
block, a small vision backbone with gradients and training, an analytic
cost model, receptive-field analysis, and a CLI.
"""

import os

# Allow up to 8 scan workers even on boxes with fewer cores; must be set
# before numba is first imported anywhere in the process.
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, os.cpu_count() or 1)))

__version__ = "0.1.0"

__all__ = ["__version__"]

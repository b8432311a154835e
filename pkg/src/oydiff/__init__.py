"""Simulation and verification toolkit for O'Connell-Yor type interacting diffusions."""
import os

# the TBB layer shipped with some numba wheels is too old; workqueue is always present
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"

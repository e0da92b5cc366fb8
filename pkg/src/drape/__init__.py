"""Cloth simulation, ambient occlusion and texture-space appearance for garments on moving bodies."""
import os

# The default TBB layer warns on older TBB builds; workqueue is always available.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"

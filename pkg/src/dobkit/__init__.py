"""dobkit: disturbance observers for robot joints, with closed-loop simulation."""
from ._jit import JIT_ENABLED

__version__ = "0.1.0"

__all__ = ["JIT_ENABLED", "__version__"]

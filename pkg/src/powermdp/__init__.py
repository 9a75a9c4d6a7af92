"""Power-aware server farm control as an average-reward CTMDP."""
from .params import SystemParams

__all__ = ["SystemParams"]
__version__ = "0.1.0"

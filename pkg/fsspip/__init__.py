"""
FSSPIP - few-shot political inclination prediction
"""

from .main import main

__version__ = "0.1.0"
__all__ = ["main"]

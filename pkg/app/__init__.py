"""
CPE Transformer Lab
Continuity and isolation experiments for decoder-only transformers
with compact positional encoding
"""

__version__ = "1.0.0"

"""
Utility Modules for the AMP Laboratory

Contains:
- logger.py: Structured logging utilities
- artifacts.py: CSV, triplet and MANIFEST writers
"""

__all__ = []

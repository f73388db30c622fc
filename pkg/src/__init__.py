# src/__init__.py
"""
Zero-shot spoken intent classification - source package

Submodules import the root-level config, so nothing is re-exported here.
"""

__version__ = "1.0.0"

# tests/__init__.py
"""
Test package for the zero-shot spoken intent pipeline
"""

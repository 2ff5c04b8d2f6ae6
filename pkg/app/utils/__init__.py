"""
Utility functions module
"""
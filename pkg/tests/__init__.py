"""
Tests module
"""
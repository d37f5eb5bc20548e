"""
Metric visual localization against a prior signed distance field map.
"""

__version__ = "0.1.0"

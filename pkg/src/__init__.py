"""
Aberration estimation and correction workbench for ultrasound localization microscopy
"""

__version__ = '1.0.0'

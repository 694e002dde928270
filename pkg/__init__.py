"""
condfuse

Condition-aware multimodal sensor fusion for semantic segmentation.
"""

__version__ = "0.1.0"

"""
condfuse

Condition-aware fusion of camera, lidar, radar and event observations for
semantic segmentation, on a synthetic desk-scale benchmark.
"""


# Defer the import so `python -m condfuse.cli` does not load the package twice
def __getattr__(name):
    if name == "main":
        from .cli import main
        return main
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

__all__ = ["main"]

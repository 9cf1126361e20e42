"""neurovol: batch segmentation, stitching, chunked serving, and
review-driven retraining for gridded volumetric microscopy."""

from .errors import (BatchJobError, ConflictError, InvalidArgumentError,
                     NotFoundError, PreconditionFailedError)
from .grid import GridLayout, make_grid_layout
from .volume import Resolution, VolumeBlock, load_block, save_block, voxel_to_physical

__version__ = "0.1.0"

__all__ = [
    "BatchJobError",
    "ConflictError",
    "GridLayout",
    "InvalidArgumentError",
    "NotFoundError",
    "PreconditionFailedError",
    "Resolution",
    "VolumeBlock",
    "load_block",
    "make_grid_layout",
    "save_block",
    "voxel_to_physical",
    "__version__",
]

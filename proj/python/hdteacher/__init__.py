"""Python bindings for the hybrid dual mean-teacher core operations."""

try:
    from ._hdteacher import (  # installed wheel layout
        HdtError,
        compute_sdf,
        conv,
        dice_loss,
        entropy_map,
        fuse_sdf,
        fuse_seg,
        generate_volume,
        oracle_sdf,
        overlap_metrics,
        softmax,
        surface_metrics,
        warmup_lambda,
    )
except ImportError:  # in-tree builds put the extension on PYTHONPATH directly
    from _hdteacher import (
        HdtError,
        compute_sdf,
        conv,
        dice_loss,
        entropy_map,
        fuse_sdf,
        fuse_seg,
        generate_volume,
        oracle_sdf,
        overlap_metrics,
        softmax,
        surface_metrics,
        warmup_lambda,
    )

__all__ = [
    "HdtError",
    "compute_sdf",
    "conv",
    "dice_loss",
    "entropy_map",
    "fuse_sdf",
    "fuse_seg",
    "generate_volume",
    "oracle_sdf",
    "overlap_metrics",
    "softmax",
    "surface_metrics",
    "warmup_lambda",
]

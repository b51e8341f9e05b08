"""MAE self pre-training for 2D images and 3D volumes on a small numpy autodiff core."""

__version__ = "0.1.0"

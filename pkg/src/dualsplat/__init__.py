"""Dual-model uncertainty-aware Gaussian splatting."""
import os
import warnings

warnings.filterwarnings("ignore", message="The TBB threading layer")

import numba  # noqa: E402

from .core import Camera, GaussianCloud  # noqa: E402
from .render import RenderOutput, render, render_at_ratio, render_backward  # noqa: E402

__version__ = "0.1.0"


def set_threads(n: int) -> None:
    """Cap rasterizer worker threads; 0 keeps numba's default."""
    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


set_threads(int(os.environ.get("GS_THREADS", "0") or 0))

__all__ = ["Camera", "GaussianCloud", "RenderOutput", "render", "render_at_ratio",
           "render_backward", "set_threads"]

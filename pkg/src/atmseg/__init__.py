"""Plain-ViT semantic segmentation built on a small autodiff tensor core.

Subpackages cover the dense tensor library (:mod:`atmseg.tensor`), the
transformer encoder (:mod:`atmseg.encoder`), the attention-to-mask decoder
(:mod:`atmseg.decoder`), token-downsampled encoder variants
(:mod:`atmseg.shrunk`), losses and metrics (:mod:`atmseg.losses`), the
freeze-and-grow continual protocol (:mod:`atmseg.continual`), the analytic
compute-cost model (:mod:`atmseg.costmodel`), and the synthetic-data
training harness (:mod:`atmseg.data`, :mod:`atmseg.train`,
:mod:`atmseg.cli`).
"""

from atmseg.tensor import Tensor, Tape, Rng, backward, finite_diff_check

__all__ = ["Tensor", "Tape", "Rng", "backward", "finite_diff_check"]
__version__ = "0.1.0"

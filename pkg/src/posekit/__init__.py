"""posekit: pose-conditioned video diffusion mechanisms at desk scale.

Subpackages cover dense tensor kernels with a gradient oracle, binary
mask and skeleton geometry, dataset curation filters, a toy diffusion
transformer with part-aware temporal attention, attention-based part
matching, decoupled subject/camera guidance with a deterministic
sampler, and standard frame metrics. The `posekit` CLI exposes each
capability as a batch subcommand.
"""

from .errors import (
    DimensionError,
    DomainError,
    FormatError,
    PolicyError,
    PosekitError,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "DomainError",
    "FormatError",
    "PolicyError",
    "PosekitError",
    "__version__",
]

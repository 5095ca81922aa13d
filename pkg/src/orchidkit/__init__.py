"""Joint color-depth-normal latent diffusion toolkit."""

__version__ = "0.1.0"

from .inpaint import InpaintTask, inpaint
from .jointvae import JointVAE
from .ldm import GeometryPredictor, LatentDiffusion
from .synthdata import Sample, generate_samples

__all__ = [
    "GeometryPredictor",
    "InpaintTask",
    "JointVAE",
    "LatentDiffusion",
    "Sample",
    "__version__",
    "generate_samples",
    "inpaint",
]

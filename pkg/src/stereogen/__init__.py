"""Text-to-stereo generation with a diffusion model on stacked image pairs.

Modules:

- ``diffusion``: noise schedule, denoiser, training loss and DDIM sampler
- ``codec``: stereo pair <-> stacked image
- ``lora``: low-rank adapters
- ``disparity``: block-matching stereo and a monocular estimator
- ``rewards``: stereo, prompt and convergence rewards
- ``trainers``: adapter fine-tuning and reward fine-tuning
- ``synthdata``: procedural stereo scenes with captions
- ``evaluation``, ``pipeline``, ``cli``: metrics, end-to-end steps, command line
"""

from .codec import STACK_ORDER, StereoPair, stack, unstack

__version__ = "0.1.0"

__all__ = ["STACK_ORDER", "StereoPair", "stack", "unstack", "__version__"]

"""Controllable surgical action video generation.

A latent video diffusion pipeline driven by four lightweight conditioning
signals (language prompt, reference frame, tissue affordance mask, tool-tip
trajectory), trained with flow matching plus a masked-depth-latent
consistency loss, and wrapped in dataset, augmentation, evaluation,
recognition, CLI, and HTTP-service tooling.
"""

from surgvid.enums import Action, Tool

__version__ = "0.1.0"

__all__ = ["Action", "Tool", "__version__"]

"""
Content-anchor conditioned video diffusion at desk scale.
Tiny diffusion transformer, synthetic character episodes, anchor extraction
pipeline and chunk-wise long generation.
"""

__version__ = "0.1.0"

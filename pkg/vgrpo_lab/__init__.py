"""
vgrpo_lab: desk-scale group-relative policy optimization for flow models,
with likelihood ratios replaced by denoising-loss surrogates.
"""

__version__ = "0.1.0"

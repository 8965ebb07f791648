"""Two-stage adversarial guidance against a conditional latent world model.

A toy driving world, an analytic (or trained) conditional denoiser and a
rule-based judge, small enough to run the whole attack matrix on a laptop.
"""

__version__ = "0.1.0"

"""Three-track (mixture, submixture, source) latent diffusion toolkit.

Covers the v-objective algebra, DDIM sampling with classifier-free
guidance, three inpainting regimes and the generation/extraction pipelines,
all checkable against closed-form Gaussian oracles.
"""

__version__ = "0.1.0"

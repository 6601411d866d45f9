"""One-step latent generators distilled from diffusion ODE trajectories."""

__version__ = "0.1.0"

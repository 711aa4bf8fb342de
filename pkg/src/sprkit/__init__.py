"""Single-shot Fourier phase retrieval: forward model, iterative baselines and
an attention-based reconstruction network on a small in-repo autodiff engine."""

__version__ = "0.1.0"

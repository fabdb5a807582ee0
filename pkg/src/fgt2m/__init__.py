"""Fine-grained text-to-motion diffusion with dependency-graph text conditioning."""

__version__ = "0.1.0"

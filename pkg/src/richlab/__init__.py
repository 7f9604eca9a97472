"""Width-scaling experiments for MLPs parameterized on the richness scale."""

__version__ = "0.1.0"

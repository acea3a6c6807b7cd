"""Design-based estimation of subgroup average treatment effects in randomized trials."""

__version__ = "0.1.0"

"""Graph-guided GUI agents: app exploration, graph refinement and runtime execution."""

__version__ = "0.1.0"

"""Goal-conditioned, model-based recommendation agent with a session simulator,
baselines and an experiment harness."""

__version__ = "0.1.0"

"""PPO trained jointly with a learned contraction metric, plus certification tools."""

__version__ = "0.1.0"

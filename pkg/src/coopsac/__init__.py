"""Cooperative consecutive soft actor-critic agents for chained subtasks."""

from .ccp import AgentSet, CoopConfig, gather_episode, train_iteration
from .maze import MazeEnv, MazeSpec
from .sac import SACAgent, SACConfig

__all__ = ["AgentSet", "CoopConfig", "MazeEnv", "MazeSpec", "SACAgent", "SACConfig",
           "gather_episode", "train_iteration"]
__version__ = "0.1.0"

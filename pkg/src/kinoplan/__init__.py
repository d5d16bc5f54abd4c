"""Planar kinodynamic locomotion with a learned recurrent world model,
PPO training, and constrained sampling MPC with value bootstrapping."""

__version__ = "0.1.0"

"""Adaptive unitary state space models: kernels, blocks, tasks, automata oracles and benchmarks."""
from .errors import ConfigError, ContractError, NonFiniteError
from .kernels import AussmParams, S6Params
from .scan import ChunkPlan

__all__ = ["AussmParams", "S6Params", "ChunkPlan", "ConfigError", "ContractError", "NonFiniteError"]

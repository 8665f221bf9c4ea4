"""Self-evolving embodied agent at desk scale: a text household world, a bag-of-tokens
policy, MCTS experience collection, Tree-GRPO updates and an outcome reward model."""

__version__ = "0.1.0"

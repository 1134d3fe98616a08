from .network import InterpolationNetwork, ModelConfig

__all__ = ["InterpolationNetwork", "ModelConfig"]

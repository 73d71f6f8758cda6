from .flipflop import (FlipFlopConfig, build_flipflop_oracle, fixed_context_chance_demo,
                       gen_flipflop, is_valid, prediction_set_ids, set_accuracy)
from .images import load_images, read_cifar_batch, read_idx
from .lorenz import LorenzConfig, gen_lorenz

__all__ = [
    "FlipFlopConfig", "build_flipflop_oracle", "fixed_context_chance_demo", "gen_flipflop",
    "is_valid", "prediction_set_ids", "set_accuracy", "load_images", "read_cifar_batch",
    "read_idx", "LorenzConfig", "gen_lorenz",
]

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD with step-decayed learning rate and L2 weight decay.

    Defaults are the full-scale training recipe.
    """

    initial_lr: float = 0.01
    decay_factor: float = 0.1
    decay_every_iters: int = 5000
    weight_decay: float = 0.00001
    batch_size: int = 32
    total_iters: int = 20000

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.decay_every_iters < 1 or self.batch_size < 1 or self.total_iters < 0:
            raise ValueError("decay_every_iters and batch_size must be positive, total_iters >= 0")


def learning_rate(config: SgdConfig, iteration: int) -> float:
    """Step schedule; iterations past the last one stay in the final band."""
    iteration = min(iteration, max(config.total_iters - 1, 0))
    return config.initial_lr * config.decay_factor ** (iteration // config.decay_every_iters)


def sgd_step(params, config: SgdConfig, iteration: int) -> float:
    """Apply one update in place and return the learning rate used."""
    lr = learning_rate(config, iteration)
    wd = config.weight_decay
    for p in params:
        if wd:
            p.value -= lr * (p.grad + wd * p.value)
        else:
            p.value -= lr * p.grad
    return lr

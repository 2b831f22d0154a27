"""SGD with momentum and L2 weight decay over named parameter dicts."""

import numpy as np


class SGD:
    def __init__(self, lr, momentum=0.9, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, params, grads, lr=None):
        """Return updated parameters; ``params`` is left untouched."""
        lr = self.lr if lr is None else lr
        out = dict(params)
        for name, g in grads.items():
            d = g + self.weight_decay * params[name]
            v = self.velocity.get(name)
            v = d if v is None else self.momentum * v + d
            self.velocity[name] = v
            out[name] = params[name] - lr * v
        return out


def warmup_lr(base, step, warmup_steps):
    if warmup_steps <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup_steps)


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))

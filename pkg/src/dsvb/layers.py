"""Parameter containers and feed-forward building blocks."""

import zlib

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class Initializer:
    """Seeded parameter factory.

    Every parameter draws from its own stream keyed by ``(seed, name)``, so two
    models that share a parameter name and shape start from identical values
    regardless of what else they contain or the order of construction.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)

    def rng(self, name):
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def uniform(self, name, shape, bound):
        return Tensor(self.rng(name).uniform(-bound, bound, size=shape), requires_grad=True, name=name)

    def constant(self, name, shape, value):
        return Tensor(np.full(shape, float(value)), requires_grad=True, name=name)


class Module:
    def __init__(self, name):
        self.name = name
        self.params = {}
        self.children = {}

    def add_param(self, key, tensor):
        self.params[key] = tensor
        return tensor

    def add_child(self, key, module):
        self.children[key] = module
        return module

    def named_parameters(self):
        out = {}
        for key, t in self.params.items():
            out[f"{self.name}.{key}"] = t
        for child in self.children.values():
            out.update(child.named_parameters())
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: t.values.copy() for k, t in self.named_parameters().items()}

    def load_state_dict(self, state):
        named = self.named_parameters()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in named.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"{k}: expected shape {t.shape}, got {v.shape}")
            t.values = v.copy()


def zero_parameters(module):
    for p in module.parameters():
        p.values = np.zeros_like(p.values)


class Linear(Module):
    def __init__(self, n_in, n_out, init, name):
        super().__init__(name)
        bound = 1.0 / np.sqrt(n_in)
        self.n_in, self.n_out = n_in, n_out
        self.w = self.add_param("w", init.uniform(f"{name}.w", (n_in, n_out), bound))
        self.b = self.add_param("b", init.uniform(f"{name}.b", (n_out,), bound))

    def __call__(self, x):
        return x @ self.w + self.b


class MLP(Module):
    """Feed-forward net with tanh hidden layers and a linear output layer."""

    def __init__(self, n_in, hidden, n_out, init, name):
        super().__init__(name)
        sizes = [n_in, *hidden, n_out]
        self.layers = [
            self.add_child(f"l{i}", Linear(a, b, init, f"{name}.l{i}"))
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = dc.tanh(layer(x))
        return self.layers[-1](x)

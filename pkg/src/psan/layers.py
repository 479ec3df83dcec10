"""Parameter-holding layers that compose the functional ops.

Layers register their parameters and sub-layers explicitly, in construction
order, so parameter lists, checkpoints, and seeded initialization are all
deterministic.
"""

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, default_dtype


def glorot_uniform(rng, shape, fan_in, fan_out):
    """Zero-mean uniform init with bound sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Module:
    """Minimal composite: tracks own parameters and child modules."""

    def __init__(self, name):
        self.name = name
        self._params = []
        self._children = []

    def param(self, leaf_name, value):
        p = Parameter(f"{self.name}.{leaf_name}", value)
        self._params.append(p)
        return p

    def child(self, module):
        self._children.append(module)
        return module

    def params(self):
        out = list(self._params)
        for c in self._children:
            out.extend(c.params())
        return out

    def modules(self):
        yield self
        for c in self._children:
            yield from c.modules()

    def set_training(self, flag):
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.training = flag

    def train(self):
        self.set_training(True)

    def eval(self):
        self.set_training(False)


class Conv2d(Module):
    def __init__(self, name, c_in, c_out, kernel, rng, stride=1, padding=0):
        super().__init__(name)
        self.stride = stride
        self.padding = padding
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        self.weight = self.param("weight", glorot_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, fan_out))
        self.bias = self.param("bias", np.zeros(c_out, dtype=default_dtype()))

    def forward(self, x):
        return ops.conv2d(x, self.weight.value, self.bias.value,
                          stride=self.stride, padding=self.padding, label=self.name)


class BatchNorm2d(Module):
    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        super().__init__(name)
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.gamma = self.param("gamma", np.ones(channels, dtype=default_dtype()))
        self.beta = self.param("beta", np.zeros(channels, dtype=default_dtype()))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma.value, self.beta.value,
                               self.running_mean, self.running_var,
                               momentum=self.momentum, eps=self.eps,
                               training=self.training, label=self.name)


class ConvBNReLU(Module):
    """3x3-or-other conv followed by batch norm and ReLU, the default block."""

    def __init__(self, name, c_in, c_out, kernel, rng, stride=1, padding=0):
        super().__init__(name)
        self.conv = self.child(Conv2d(f"{name}.conv", c_in, c_out, kernel, rng,
                                      stride=stride, padding=padding))
        self.bn = self.child(BatchNorm2d(f"{name}.bn", c_out))

    def forward(self, x):
        return ops.relu(self.bn.forward(self.conv.forward(x)))


class Linear(Module):
    def __init__(self, name, d_in, d_out, rng):
        super().__init__(name)
        self.weight = self.param("weight", glorot_uniform(rng, (d_in, d_out), d_in, d_out))
        self.bias = self.param("bias", np.zeros(d_out, dtype=default_dtype()))

    def forward(self, x):
        return ops.linear(x, self.weight.value, self.bias.value, label=self.name)


class Embedding(Module):
    def __init__(self, name, rows, dim, rng):
        super().__init__(name)
        self.table = self.param("table", glorot_uniform(rng, (rows, dim), rows, dim))

    def forward(self, indices):
        return ops.embedding(self.table.value, indices, label=self.name)

    def lookup(self, idx):
        return ops.embedding_lookup(self.table.value, idx, label=self.name)


class GRUCell(Module):
    """Gated recurrent cell with separate per-gate matrices, biases zero-initialized."""

    def __init__(self, name, d_in, d_hidden, rng):
        super().__init__(name)
        z = np.zeros(d_hidden, dtype=default_dtype())
        mk_w = lambda leaf: self.param(leaf, glorot_uniform(rng, (d_in, d_hidden), d_in, d_hidden))
        mk_u = lambda leaf: self.param(leaf, glorot_uniform(rng, (d_hidden, d_hidden), d_hidden, d_hidden))
        self.wz, self.uz, self.bz = mk_w("wz"), mk_u("uz"), self.param("bz", z.copy())
        self.wr, self.ur, self.br = mk_w("wr"), mk_u("ur"), self.param("br", z.copy())
        self.wh, self.uh, self.bh = mk_w("wh"), mk_u("uh"), self.param("bh", z.copy())

    def weights(self):
        return ops.GruWeights(*(p.value for p in (self.wz, self.uz, self.bz,
                                                  self.wr, self.ur, self.br,
                                                  self.wh, self.uh, self.bh)))

    def forward(self, x, h_prev):
        return ops.gru_cell(x, h_prev, self.weights(), label=self.name)

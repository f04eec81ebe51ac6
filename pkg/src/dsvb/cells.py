"""GRU and LSTM recurrent cells built on the autodiff core.

Inputs are batched row-major: ``x`` has shape ``(batch, input_size)`` and
hidden states ``(batch, hidden_size)``.  Unbatched 1-D vectors also work.
"""

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeMismatch
from .layers import Module


def _check(t, size, what):
    if t.shape[-1] != size:
        raise ShapeMismatch(f"{what}: expected last dimension {size}, got shape {t.shape}")


class GRUCell(Module):
    """Gated recurrent unit in its original form (reset gate applied before
    the recurrent matmul of the candidate)."""

    kind = "gru"

    def __init__(self, input_size, hidden_size, init, name="rnn"):
        super().__init__(name)
        self.input_size, self.hidden_size = input_size, hidden_size
        bound = 1.0 / np.sqrt(hidden_size)
        H = hidden_size
        # column blocks: [reset | update | candidate]
        self.w_x = self.add_param("w_x", init.uniform(f"{name}.w_x", (input_size, 3 * H), bound))
        self.w_hrz = self.add_param("w_hrz", init.uniform(f"{name}.w_hrz", (H, 2 * H), bound))
        self.w_hn = self.add_param("w_hn", init.uniform(f"{name}.w_hn", (H, H), bound))
        self.b = self.add_param("b", init.uniform(f"{name}.b", (3 * H,), bound))

    def initial_state(self, batch=None):
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return Tensor(np.zeros(shape))

    @staticmethod
    def hidden(state):
        return state

    def __call__(self, x, h):
        return gru_step(x, h, self)


class LSTMCell(Module):
    kind = "lstm"

    def __init__(self, input_size, hidden_size, init, name="rnn", forget_bias=1.0):
        super().__init__(name)
        self.input_size, self.hidden_size = input_size, hidden_size
        bound = 1.0 / np.sqrt(hidden_size)
        H = hidden_size
        # column blocks: [input | forget | cell candidate | output]
        self.w_x = self.add_param("w_x", init.uniform(f"{name}.w_x", (input_size, 4 * H), bound))
        self.w_h = self.add_param("w_h", init.uniform(f"{name}.w_h", (H, 4 * H), bound))
        b = init.uniform(f"{name}.b", (4 * H,), bound)
        b.values[H:2 * H] = forget_bias
        self.b = self.add_param("b", b)

    def initial_state(self, batch=None):
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))

    @staticmethod
    def hidden(state):
        return state[0]

    def __call__(self, x, state):
        return lstm_step(x, state, self)


def gru_step(x, h, cell):
    """One GRU update; returns the new hidden state."""
    _check(x, cell.input_size, "gru_step input")
    _check(h, cell.hidden_size, "gru_step hidden")
    H = cell.hidden_size
    gx = x @ cell.w_x + cell.b
    rz = dc.sigmoid(dc.slice_(gx, 0, 2 * H) + h @ cell.w_hrz)
    r = dc.slice_(rz, 0, H)
    z = dc.slice_(rz, H, 2 * H)
    n = dc.tanh(dc.slice_(gx, 2 * H, 3 * H) + (r * h) @ cell.w_hn)
    # h' = (1 - z) n + z h, written to reuse n
    return n + z * (h - n)


def lstm_step(x, state, cell):
    """One LSTM update; returns ``(hidden, cell_state)``."""
    h, c = state
    _check(x, cell.input_size, "lstm_step input")
    _check(h, cell.hidden_size, "lstm_step hidden")
    _check(c, cell.hidden_size, "lstm_step cell")
    H = cell.hidden_size
    gates = x @ cell.w_x + h @ cell.w_h + cell.b
    ifo = dc.sigmoid(dc.concat([dc.slice_(gates, 0, 2 * H), dc.slice_(gates, 3 * H, 4 * H)]))
    i = dc.slice_(ifo, 0, H)
    f = dc.slice_(ifo, H, 2 * H)
    o = dc.slice_(ifo, 2 * H, 3 * H)
    g = dc.tanh(dc.slice_(gates, 2 * H, 3 * H))
    c_new = f * c + i * g
    return o * dc.tanh(c_new), c_new


def make_cell(kind, input_size, hidden_size, init, name="rnn"):
    kind = kind.lower()
    if kind == "gru":
        return GRUCell(input_size, hidden_size, init, name)
    if kind == "lstm":
        return LSTMCell(input_size, hidden_size, init, name)
    raise ValueError(f"unknown cell type {kind!r}")

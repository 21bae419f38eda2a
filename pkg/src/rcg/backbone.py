"""Residual fully-connected denoiser used for both representations and
flattened images.

    x --Linear--> h --[FcBlock] x N--> Layer(zero-init) --> eps_hat

Each FcBlock adds its conditioning inputs (timestep embedding, and optionally
a class embedding or a representation), each through its own projection
Layer, between an input Layer and an output Layer, with an identity skip.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, UsageError
from .numkernel import Layer, Linear, Module


class FcBlock(Module):
    def __init__(self, hidden, cond_dims: dict, dtype=np.float32):
        super().__init__()
        self.cond_names = list(cond_dims)
        self.children = {"in_layer": Layer(hidden, hidden, dtype=dtype)}
        for name, d in cond_dims.items():
            self.children[f"{name}_proj"] = Layer(d, hidden, dtype=dtype)
        self.children["out_layer"] = Layer(hidden, hidden, dtype=dtype)

    def forward(self, h, conds):
        a = self.children["in_layer"].forward(h)
        for name in self.cond_names:
            a = a + self.children[f"{name}_proj"].forward(conds[name])
        return h + self.children["out_layer"].forward(a)

    def backward(self, grad_out):
        """Returns (grad_h, {cond name: grad_cond})."""
        ga = self.children["out_layer"].backward(grad_out)
        gconds = {name: self.children[f"{name}_proj"].backward(ga) for name in self.cond_names}
        return grad_out + self.children["in_layer"].backward(ga), gconds


def denoiser_param_shapes(data_dim, hidden, num_blocks, cond_dims: dict) -> dict:
    """Parameter shapes of :class:`FcDenoiser`, enumerated without allocating."""

    def layer(prefix, i, o):
        return {
            f"{prefix}.norm.gamma": (i,), f"{prefix}.norm.beta": (i,),
            f"{prefix}.linear.W": (i, o), f"{prefix}.linear.b": (o,),
        }

    shapes = {"input.W": (data_dim, hidden), "input.b": (hidden,)}
    for k in range(num_blocks):
        shapes.update(layer(f"blocks.{k}.in_layer", hidden, hidden))
        for name, d in cond_dims.items():
            shapes.update(layer(f"blocks.{k}.{name}_proj", d, hidden))
        shapes.update(layer(f"blocks.{k}.out_layer", hidden, hidden))
    shapes.update(layer("output", hidden, data_dim))
    return shapes


class _Blocks(Module):
    def __init__(self, blocks):
        super().__init__()
        self.children = {str(i): b for i, b in enumerate(blocks)}


class FcDenoiser(Module):
    def __init__(self, data_dim, hidden, num_blocks, cond_dims: dict, dtype=np.float32):
        super().__init__()
        if num_blocks < 1:
            raise ConfigError("denoiser needs at least one block")
        self.data_dim, self.hidden = data_dim, hidden
        self.cond_dims = dict(cond_dims)
        self.blocks = [FcBlock(hidden, cond_dims, dtype=dtype) for _ in range(num_blocks)]
        self.children = {
            "input": Linear(data_dim, hidden, dtype=dtype),
            "blocks": _Blocks(self.blocks),
            "output": Layer(hidden, data_dim, zero_init=True, dtype=dtype),
        }
        self._ran = False

    def forward(self, x, conds):
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise ConfigError(f"denoiser expects [B, {self.data_dim}], got {tuple(x.shape)}")
        for name, d in self.cond_dims.items():
            c = conds.get(name)
            if c is None:
                raise UsageError(f"missing conditioning input {name!r}")
            if c.shape != (x.shape[0], d):
                raise ConfigError(f"conditioning {name!r} expects [{x.shape[0]}, {d}], got {tuple(c.shape)}")
        h = self.children["input"].forward(x)
        for block in self.blocks:
            h = block.forward(h, conds)
        self._ran = True
        return self.children["output"].forward(h)

    def backward(self, grad_out):
        """Returns (grad_x, {cond name: grad summed over blocks})."""
        if not self._ran:
            raise UsageError("backward called without a cached forward")
        g = self.children["output"].backward(grad_out)
        gconds = {name: 0.0 for name in self.cond_dims}
        for block in reversed(self.blocks):
            g, gc = block.backward(g)
            for name, v in gc.items():
                gconds[name] = gconds[name] + v
        self._ran = False
        return self.children["input"].backward(g), gconds

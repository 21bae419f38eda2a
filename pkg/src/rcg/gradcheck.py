"""Finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .backbone import FcBlock
from .numkernel import Layer, LayerNorm, Linear, Module, SiLU, finite_diff_check
from .rng import make_rng


class BlockProbe(Module):
    """Adapts FcBlock(h, conds) to the single-input interface of finite_diff_check:
    the input row is [h | cond_1 | cond_2 ...] in ``cond_dims`` order."""

    def __init__(self, block, hidden, cond_dims):
        super().__init__()
        self.block, self.hidden, self.cond_dims = block, hidden, dict(cond_dims)
        self.children = {"block": block}

    def _split(self, x):
        conds, o = {}, self.hidden
        for k, d in self.cond_dims.items():
            conds[k] = x[:, o:o + d]
            o += d
        return x[:, :self.hidden], conds

    def forward(self, x):
        h, conds = self._split(x)
        return self.block.forward(h, conds)

    def backward(self, grad_out):
        gh, gc = self.block.backward(grad_out)
        return np.concatenate([gh] + [gc[k] for k in self.cond_dims], axis=1)


def _block_case(hidden, cond_dims, seed):
    block = FcBlock(hidden, cond_dims, dtype=np.float64)
    block.init_params(seed)
    # non-trivial LayerNorm affine so gamma/beta gradients are exercised
    rng = make_rng(seed, "gradcheck-ln")
    for name, p in block.named_parameters().items():
        if name.endswith("norm.gamma") or name.endswith("norm.beta"):
            p[...] = rng.standard_normal(p.shape)
    width = hidden + sum(cond_dims.values())
    return BlockProbe(block, hidden, cond_dims), (3, width)


def grad_check_suite(seed=0, tolerance=1e-4, hidden=8):
    """Run the standard cases; returns {case name: GradCheckReport}."""
    rng = make_rng(seed, "gradcheck-input")
    lin = Linear(5, 4, dtype=np.float64)
    lin.init_params(seed)
    ln = LayerNorm(6, dtype=np.float64)
    ln.params["gamma"][...] = rng.standard_normal(6)
    ln.params["beta"][...] = rng.standard_normal(6)
    layer = Layer(6, 5, dtype=np.float64)
    layer.init_params(seed)
    cases = {
        "affine": (lin, (3, 5)),
        "layer_norm": (ln, (3, 6)),
        "silu": (SiLU(), (3, 6)),
        "layer": (layer, (3, 6)),
        "rdm_block": _block_case(hidden, {"time": hidden}, seed),
        "generator_block": _block_case(hidden, {"time": hidden, "rep": 6}, seed),
    }
    return {name: finite_diff_check(net, rng.standard_normal(shape), tolerance=tolerance, seed=seed)
            for name, (net, shape) in cases.items()}

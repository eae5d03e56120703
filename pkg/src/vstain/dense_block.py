"""Densely connected convolution blocks.

Every layer maps the concatenation of the block input and all previous
layer outputs through conv(3x3, same, stride 1) -> batch norm -> ReLU ->
dropout, producing `growth` new feature maps, so layer l sees
c0 + (l-1)*growth channels. A trailing 1x1 convolution (no norm, no
activation) adjusts the concatenated c0 + L*growth maps to the requested
output count. Spatial extents never change. Dropout is active in train
mode only; these blocks are the only place dropout is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import BnState, Variable
from .errors import ShapeError


@dataclass
class DenseLayer:
    conv_w: Variable  # (3,3,c_layer_in,growth)
    conv_b: Variable
    bn_gamma: Variable
    bn_beta: Variable
    bn_state: BnState


@dataclass
class DenseBlockParams:
    layers: list[DenseLayer]
    out_w: Variable  # (1,1,c0+L*growth,c_out)
    out_b: Variable
    growth: int
    dropout_rate: float = 0.5

    @property
    def in_channels(self) -> int:
        return self.out_w.data.shape[2] - len(self.layers) * self.growth

    @property
    def concat_channels(self) -> int:
        return self.out_w.data.shape[2]

    @property
    def out_channels(self) -> int:
        return self.out_w.data.shape[3]

    def variables(self) -> list[Variable]:
        out = []
        for layer in self.layers:
            out += [layer.conv_w, layer.conv_b, layer.bn_gamma, layer.bn_beta]
        out += [self.out_w, self.out_b]
        return out


def make_dense_block(
    rng: np.random.Generator,
    c_in: int,
    depth: int,
    growth: int,
    c_out: int,
    dropout_rate: float = 0.5,
    dtype=np.float32,
) -> DenseBlockParams:
    layers = []
    c = c_in
    for _ in range(depth):
        layers.append(DenseLayer(
            conv_w=ag.var(kernels.he_init(rng, (3, 3, c, growth), 9 * c, dtype),
                          requires_grad=True),
            conv_b=ag.var(np.zeros(growth, dtype=dtype), requires_grad=True),
            bn_gamma=ag.var(np.ones(growth, dtype=dtype), requires_grad=True),
            bn_beta=ag.var(np.zeros(growth, dtype=dtype), requires_grad=True),
            bn_state=BnState.create(growth, dtype),
        ))
        c += growth
    out_w = ag.var(kernels.he_init(rng, (1, 1, c, c_out), c, dtype), requires_grad=True)
    out_b = ag.var(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return DenseBlockParams(layers, out_w, out_b, growth, dropout_rate)


def dense_forward(
    x: Variable,
    params: DenseBlockParams,
    mode: str,
    rng: np.random.Generator | None = None,
) -> Variable:
    """Run the block on (N, H, W, c0). Train mode needs `rng` for dropout."""
    if mode not in ("train", "eval"):
        raise ShapeError(f"dense_forward: invalid mode {mode!r}")
    if x.data.shape[3] != params.in_channels:
        raise ShapeError(
            f"dense block: input has {x.data.shape[3]} channels, "
            f"expected {params.in_channels}"
        )
    use_dropout = mode == "train" and params.dropout_rate > 0
    if use_dropout and rng is None:
        raise ShapeError("dense_forward: train mode with dropout needs an rng")
    feats = x
    for layer in params.layers:
        h = ag.conv2d(feats, layer.conv_w, layer.conv_b, stride=1)
        h = ag.batch_norm(h, layer.bn_gamma, layer.bn_beta, layer.bn_state, mode)
        h = ag.relu(h)
        if use_dropout:
            h = ag.dropout(h, params.dropout_rate, rng)
        feats = ag.concat_channels([feats, h])
    return ag.conv2d(feats, params.out_w, params.out_b, stride=1)

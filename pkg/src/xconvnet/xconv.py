"""The neighborhood-transform convolution operator.

For each representative point p with K gathered neighbors P and their
features F, the operator:

    1. moves P into p's local frame,
    2. lifts each local coordinate to c_delta channels point-wise,
    3. concatenates lifted coordinates with F,
    4. learns a K x K transform from the local coordinates,
    5. multiplies the transform against the concatenated features,
    6. reduces the K x C block to a c_out vector with a separable
       convolution (depthwise over K, then a dense channel mix).

Everything is vectorized over a batch of neighborhoods; the
single-neighborhood entry points wrap the batched path. An ablated
variant skips steps 4 and 5 and convolves the concatenated features
directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import engine
from .engine import (BatchNormState, Node, Parameter, ShapeError, affine,
                     batchnorm, concat, constant, depthwise_matrix_conv, elu,
                     glorot_uniform, matmul, reshape, separable_conv)


@dataclass
class XConvSpec:
    """Hyperparameters of one layer.

    Attributes:
        k: neighbors gathered per representative point.
        d: dilation; neighbors are drawn from the k*d nearest.
        n_out: representative points produced by the layer.
        c_in: input feature channels (0 for a raw coordinate cloud).
        c_out: output feature channels.
        c_delta: width of the lifted-coordinate features; defaults to
            max(1, c_in // 4), or max(1, c_out // 4) when c_in is 0.
        with_global: lift normalized representative coordinates through a
            side MLP and concatenate c_g = max(1, c_out // 4) channels.
        sampler: representative-point selection, "random" or "fps".
    """

    k: int
    d: int
    n_out: int
    c_in: int
    c_out: int
    c_delta: Optional[int] = None
    with_global: bool = False
    sampler: str = "random"

    def __post_init__(self):
        if self.k < 1 or self.d < 1 or self.n_out < 1:
            raise ValueError(f"k, d, n_out must be >= 1, got k={self.k} d={self.d} "
                             f"n_out={self.n_out}")
        if self.c_in < 0 or self.c_out < 1:
            raise ValueError(f"need c_in >= 0 and c_out >= 1, got c_in={self.c_in} "
                             f"c_out={self.c_out}")
        if self.c_delta is None:
            base = self.c_in if self.c_in > 0 else self.c_out
            self.c_delta = max(1, base // 4)
        if self.c_delta < 1:
            raise ValueError("c_delta must be >= 1")
        if self.sampler not in ("random", "fps"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @property
    def c_mid(self) -> int:
        """Channel width of the concatenated feature block."""
        return self.c_in + self.c_delta

    @property
    def c_global(self) -> int:
        return max(1, self.c_out // 4) if self.with_global else 0

    @property
    def c_total(self) -> int:
        """Channels leaving the layer, global lift included."""
        return self.c_out + self.c_global


def depth_multiplier(c_out: int, c_mid: int) -> int:
    return math.ceil(c_out / c_mid)


class Dense:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str):
        self.w = Parameter(glorot_uniform((c_in, c_out), c_in, c_out, rng), f"{name}.w")
        self.b = Parameter(np.zeros(c_out), f"{name}.b")

    def __call__(self, x: Node) -> Node:
        return affine(x, self.w, self.b)

    def parameters(self):
        return [self.w, self.b]


class PointwiseMlp:
    """Two dense/ELU/batchnorm blocks applied independently per point."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str):
        self.fc1 = Dense(c_in, c_out, rng, f"{name}.fc1")
        self.bn1 = BatchNormState(c_out, name=f"{name}.bn1")
        self.fc2 = Dense(c_out, c_out, rng, f"{name}.fc2")
        self.bn2 = BatchNormState(c_out, name=f"{name}.bn2")

    def __call__(self, x: Node, training: bool) -> Node:
        h = batchnorm(elu(self.fc1(x)), self.bn1, training)
        return batchnorm(elu(self.fc2(h)), self.bn2, training)

    def parameters(self):
        return (self.fc1.parameters() + [self.bn1.scale, self.bn1.shift]
                + self.fc2.parameters() + [self.bn2.scale, self.bn2.shift])

    def bn_states(self):
        return [self.bn1, self.bn2]


class XTransformMlp:
    """Maps flattened local coordinates to a K x K transform.

    Pipeline: dense(dim*K -> K*K), ELU, BN, reshape, depthwise filter,
    ELU, BN, reshape, depthwise filter, BN, reshape. The depthwise stages
    keep the parameter count at O(K^3) instead of the O(K^4) a dense
    K*K -> K*K map would cost.
    """

    def __init__(self, k: int, dim: int, rng: np.random.Generator, name: str):
        self.k = k
        self.fc = Dense(dim * k, k * k, rng, f"{name}.fc")
        self.bn1 = BatchNormState(k * k, name=f"{name}.bn1")
        self.dc1 = Parameter(glorot_uniform((k, k, k), k, k, rng), f"{name}.dc1")
        self.bn2 = BatchNormState(k * k, name=f"{name}.bn2")
        self.dc2 = Parameter(glorot_uniform((k, k, k), k, k, rng), f"{name}.dc2")
        self.bn3 = BatchNormState(k * k, name=f"{name}.bn3")

    def __call__(self, p_local: Node, training: bool) -> Node:
        k = self.k
        batch = p_local.value.shape[:-2]
        flat = reshape(p_local, batch + (-1,))
        h = batchnorm(elu(self.fc(flat)), self.bn1, training)
        h = reshape(h, batch + (k, k))
        h = batchnorm(elu(depthwise_matrix_conv(h, self.dc1)), self.bn2, training)
        h = reshape(h, batch + (k, k))
        h = batchnorm(depthwise_matrix_conv(h, self.dc2), self.bn3, training)
        return reshape(h, batch + (k, k))

    def parameters(self):
        return (self.fc.parameters() + [self.bn1.scale, self.bn1.shift,
                self.dc1, self.bn2.scale, self.bn2.shift,
                self.dc2, self.bn3.scale, self.bn3.shift])

    def bn_states(self):
        return [self.bn1, self.bn2, self.bn3]


class SeparableConvUnit:
    """Depthwise filter over the K axis followed by a dense map to c_out."""

    def __init__(self, k: int, c_mid: int, c_out: int, dm: int,
                 rng: np.random.Generator, name: str):
        self.dw = Parameter(glorot_uniform((k, c_mid, dm), k, dm, rng), f"{name}.dw")
        self.pw = Parameter(glorot_uniform((c_mid * dm, c_out), c_mid * dm, c_out, rng),
                            f"{name}.pw")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")

    def __call__(self, f: Node) -> Node:
        return separable_conv(f, self.dw, self.pw, self.bias)

    def parameters(self):
        return [self.dw, self.pw, self.bias]


class XConvParams:
    """All trainable state of one layer.

    ``mlp_x`` is None for the ablated variant; ``mlp_g`` is None unless
    the layer lifts global coordinates.
    """

    def __init__(self, spec: XConvSpec, dim: int, rng: np.random.Generator,
                 name: str, ablated: bool = False):
        self.spec = spec
        self.dim = dim
        self.name = name
        self.ablated = ablated
        self.mlp_delta = PointwiseMlp(dim, spec.c_delta, rng, f"{name}.mlp_delta")
        self.mlp_x = None if ablated else XTransformMlp(spec.k, dim, rng, f"{name}.mlp_x")
        dm = depth_multiplier(spec.c_out, spec.c_mid)
        self.sep = SeparableConvUnit(spec.k, spec.c_mid, spec.c_out, dm, rng,
                                     f"{name}.sep")
        self.mlp_g = (PointwiseMlp(dim, spec.c_global, rng, f"{name}.mlp_g")
                      if spec.with_global else None)

    def parameters(self):
        params = list(self.mlp_delta.parameters())
        if self.mlp_x is not None:
            params += self.mlp_x.parameters()
        params += self.sep.parameters()
        if self.mlp_g is not None:
            params += self.mlp_g.parameters()
        return params

    def bn_states(self):
        states = list(self.mlp_delta.bn_states())
        if self.mlp_x is not None:
            states += self.mlp_x.bn_states()
        if self.mlp_g is not None:
            states += self.mlp_g.bn_states()
        return states


def lift_coords(p_local, params: PointwiseMlp, training: bool) -> Node:
    """Apply the coordinate-lifting MLP independently to each point row."""
    x = p_local if isinstance(p_local, Node) else constant(p_local)
    return params(x, training)


def learn_x(p_local, params: XTransformMlp, training: bool) -> Node:
    """Produce the K x K transform from local neighbor coordinates."""
    x = p_local if isinstance(p_local, Node) else constant(p_local)
    return params(x, training)


def _as_feature_node(feats, k: int, c_in: int) -> Optional[Node]:
    if c_in == 0:
        return None
    if feats is None:
        raise ValueError(f"layer expects {c_in} feature channels, got none")
    node = feats if isinstance(feats, Node) else constant(feats)
    if node.value.shape[-1] != c_in or node.value.shape[-2] != k:
        raise ValueError(
            f"neighbor features {node.value.shape} do not match k={k}, c_in={c_in}")
    return node


def xconv_forward_batch(spec: XConvSpec, params: XConvParams,
                        rep_coords: np.ndarray, neighbor_coords: np.ndarray,
                        neighbor_feats=None, training: bool = False,
                        x_override=None, global_scale: float = 1.0,
                        internals: Optional[dict] = None) -> Node:
    """Run the operator over a batch of neighborhoods.

    Args:
        rep_coords: (B, Dim) representative coordinates.
        neighbor_coords: (B, K, Dim) gathered neighbor coordinates.
        neighbor_feats: Node or array (B, K, c_in); None when c_in is 0.
        x_override: optional fixed transform, (K, K) or (B, K, K); bypasses
            the learned transform (test hook; also used to force identity).
        global_scale: divisor applied to rep_coords before the global lift.
        internals: optional dict that receives the f_star / x / f_x Nodes.

    Returns:
        Node of shape (B, c_out) or (B, c_out + c_g) with the global lift.
    """
    rep_coords = np.asarray(rep_coords, dtype=np.float64)
    neighbor_coords = np.asarray(neighbor_coords, dtype=np.float64)
    if neighbor_coords.shape[1] != spec.k:
        raise ValueError(
            f"expected k={spec.k} neighbors, got {neighbor_coords.shape[1]}")

    p_local = constant(neighbor_coords - rep_coords[:, None, :])
    f_delta = lift_coords(p_local, params.mlp_delta, training)
    feats = _as_feature_node(neighbor_feats, spec.k, spec.c_in)
    f_star = f_delta if feats is None else concat(f_delta, feats)

    if params.ablated and x_override is None:
        f_x = f_star
        x_node = None
    else:
        if x_override is not None:
            x_value = np.asarray(x_override, dtype=np.float64)
            if x_value.ndim == 2:
                x_value = np.broadcast_to(x_value, (rep_coords.shape[0],) + x_value.shape)
            x_node = constant(x_value)
        else:
            x_node = learn_x(p_local, params.mlp_x, training)
        f_x = matmul(x_node, f_star)

    out = params.sep(f_x)

    if internals is not None:
        internals.update(p_local=p_local, f_star=f_star, x=x_node, f_x=f_x)

    if spec.with_global:
        scale = np.asarray(global_scale, dtype=np.float64)
        if scale.ndim == 1:
            scale = scale[:, None]
        lifted = lift_coords(rep_coords / scale, params.mlp_g, training)
        out = concat(out, lifted)
    return out


def xconv_forward(spec: XConvSpec, params: XConvParams, rep_coord, neighbor_coords,
                  neighbor_feats=None, training: bool = False, x_override=None,
                  global_scale: float = 1.0, internals: Optional[dict] = None) -> Node:
    """Single-neighborhood contract: one p, (K, Dim) neighbors, (K, c_in) features.

    Returns a vector Node of width c_out (plus c_g with the global lift).
    """
    feats = neighbor_feats
    if feats is not None:
        node = feats if isinstance(feats, Node) else constant(feats)
        feats = reshape(node, (1,) + node.value.shape)
    out = xconv_forward_batch(
        spec, params,
        np.asarray(rep_coord, dtype=np.float64)[None, :],
        np.asarray(neighbor_coords, dtype=np.float64)[None, :, :],
        feats, training=training, x_override=x_override,
        global_scale=global_scale, internals=internals)
    return reshape(out, (out.value.shape[-1],))


def xconv_forward_ablated(spec: XConvSpec, params: XConvParams, rep_coord,
                          neighbor_coords, neighbor_feats=None,
                          training: bool = False,
                          internals: Optional[dict] = None) -> Node:
    """Single-neighborhood forward with the transform stage removed."""
    if not params.ablated:
        raise ValueError("params were built for the full operator; "
                         "build with ablated=True")
    return xconv_forward(spec, params, rep_coord, neighbor_coords, neighbor_feats,
                         training=training, internals=internals)


def force_identity_x(params: XConvParams) -> None:
    """Pin the learned transform to the identity in both train and eval mode.

    Zeroes every transform-MLP weight so its output is exactly the final
    batchnorm shift, then sets that shift to the flattened identity.
    """
    if params.mlp_x is None:
        raise ValueError("ablated params have no transform to force")
    mlp = params.mlp_x
    for p in mlp.parameters():
        p.value[...] = 0.0
    mlp.bn3.shift.value[...] = np.eye(mlp.k).reshape(-1)


def count_params(spec: XConvSpec, dim: int = 3, ablated: bool = False) -> dict:
    """Closed-form learnable-scalar counts per sub-network.

    Must agree exactly with the registered-parameter census of a built
    :class:`XConvParams` for the same spec.
    """
    cd, k = spec.c_delta, spec.k
    c_mid = spec.c_mid
    dm = depth_multiplier(spec.c_out, c_mid)

    def two_fc_block(width):
        return (dim * width + width) + 2 * width + (width * width + width) + 2 * width

    counts = {
        "mlp_delta": two_fc_block(cd),
        "mlp_x": 0 if ablated else
                 (dim * k * k * k + k * k) + 2 * k * k     # dense stage + BN
                 + k ** 3 + 2 * k * k                      # depthwise 1 + BN
                 + k ** 3 + 2 * k * k,                     # depthwise 2 + BN
        "sep_conv": k * c_mid * dm + c_mid * dm * spec.c_out + spec.c_out,
        "mlp_g": two_fc_block(spec.c_global) if spec.with_global else 0,
    }
    counts["total"] = sum(counts.values())
    return counts

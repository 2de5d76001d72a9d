"""Network assembly: conv stacks, conv/deconv stacks, and the dense head.

A classification network is a chain of neighborhood-transform layers that
shrinks the cloud to R representative points, followed by a point-wise
dense head. Training supervises all R points; inference averages their
logits before the softmax.

A segmentation network appends a deconv stack: each deconv layer places
its representative points at an earlier (higher resolution) stage's
points, convolves against the current coarse stage, and concatenates the
result with the earlier stage's features (skip link). The final stage
covers every input point, so the head emits per-point logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import (BatchNormState, Node, Parameter, batchnorm, concat,
                     constant, dropout, elu, gather_rows, reshape)
from .errors import ConfigError, DataError
from .geometry import (Neighborhood, PointSet, bounding_radius,
                       dilated_sample_batch, fps_indices, receptive_field)
from .xconv import Dense, XConvParams, XConvSpec, xconv_forward_batch


@dataclass
class ConvLayerSpec:
    """Conv-stack layer as configured; input channels are derived later."""

    k: int
    d: int
    n_out: int
    c_out: int
    c_delta: Optional[int] = None
    with_global: bool = False
    sampler: str = "random"


@dataclass
class DeconvSpec:
    """One upsampling layer: an XConvSpec plus its mirror reference.

    ``mirror`` names the stage whose points this layer lands on: 0 is the
    network input, i >= 1 is conv layer i. The layer's representative
    points are exactly that stage's points, so its output count needs no
    separate configuration.
    """

    k: int
    d: int
    c_out: int
    mirror: int
    c_delta: Optional[int] = None
    with_global: bool = False


@dataclass
class NetworkSpec:
    """Complete description of a classification or segmentation network."""

    task: str
    layers: list
    num_classes: int
    n_input: int
    fc_head: list = field(default_factory=list)
    deconv_layers: list = field(default_factory=list)
    dropout: float = 0.5
    dim: int = 3
    c_input: int = 0

    def validate(self) -> "NetworkSpec":
        if self.task not in ("classification", "segmentation"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not self.layers:
            raise ConfigError("at least one conv layer is required")
        if self.task == "segmentation" and not self.deconv_layers:
            raise ConfigError("segmentation networks need deconv layers")
        if self.task == "classification" and self.deconv_layers:
            raise ConfigError("classification networks take no deconv layers")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

        prev_count = self.n_input
        for i, spec in enumerate(self.layers):
            if spec.n_out > prev_count:
                raise ConfigError(
                    f"conv layer {i} expands the cloud: {prev_count} -> {spec.n_out}")
            if spec.k * spec.d > prev_count:
                raise ConfigError(
                    f"conv layer {i} needs k*d={spec.k * spec.d} <= {prev_count} points")
            if spec.with_global and receptive_field(spec.k, spec.d, prev_count) >= 1.0:
                raise ConfigError(
                    f"conv layer {i} lifts global coordinates but already sees the "
                    f"whole previous stage (receptive field 1.0); the two are "
                    f"mutually exclusive")
            prev_count = spec.n_out

        if self.deconv_layers:
            prev_count = self.layers[-1].n_out
            prev_out = None
            for i, dspec in enumerate(self.deconv_layers):
                if not 0 <= dspec.mirror <= len(self.layers):
                    raise ConfigError(f"deconv layer {i} mirrors unknown stage "
                                      f"{dspec.mirror}")
                n_out = self._stage_count(dspec.mirror)
                if prev_out is not None and n_out < prev_out:
                    raise ConfigError(
                        f"deconv layer {i} shrinks the cloud: {prev_out} -> {n_out}")
                if dspec.k * dspec.d > prev_count:
                    raise ConfigError(
                        f"deconv layer {i} needs k*d={dspec.k * dspec.d} "
                        f"<= {prev_count} points")
                prev_count = n_out
                prev_out = n_out
            if self.deconv_layers[-1].mirror != 0:
                raise ConfigError("the last deconv layer must mirror the input "
                                  "(mirror 0) to emit per-point output")
        return self

    def _stage_count(self, stage: int) -> int:
        return self.n_input if stage == 0 else self.layers[stage - 1].n_out

    def conv_specs(self) -> list:
        """Conv-stack specs with their c_in fields resolved."""
        specs = []
        c_prev = self.c_input
        for layer in self.layers:
            resolved = XConvSpec(k=layer.k, d=layer.d, n_out=layer.n_out,
                                 c_in=c_prev, c_out=layer.c_out,
                                 c_delta=layer.c_delta,
                                 with_global=layer.with_global,
                                 sampler=layer.sampler)
            specs.append(resolved)
            c_prev = resolved.c_total
        return specs

    def deconv_specs(self, conv: list) -> list:
        """(XConvSpec, mirror, skip channel count) per deconv layer."""
        stage_channels = [self.c_input] + [s.c_total for s in conv]
        out = []
        c_prev = conv[-1].c_total
        for dspec in self.deconv_layers:
            skip = stage_channels[dspec.mirror]
            resolved = XConvSpec(k=dspec.k, d=dspec.d,
                                 n_out=self._stage_count(dspec.mirror),
                                 c_in=c_prev, c_out=dspec.c_out,
                                 c_delta=dspec.c_delta,
                                 with_global=dspec.with_global, sampler="fps")
            out.append((resolved, dspec.mirror, skip))
            c_prev = resolved.c_total + skip
        return out

    def head_input_channels(self) -> int:
        conv = self.conv_specs()
        if self.task == "classification":
            return conv[-1].c_total
        deconv = self.deconv_specs(conv)
        spec, _, skip = deconv[-1]
        return spec.c_total + skip


def subvolume_head(net: NetworkSpec) -> NetworkSpec:
    """Validate the partial-view supervision wiring of a classification net.

    Requires the last conv layer to lift global coordinates while seeing
    strictly less than the whole previous stage; rejects anything else.
    """
    net.validate()
    last = net.layers[-1]
    if not last.with_global:
        raise ConfigError("subvolume supervision requires with_global on the "
                          "last conv layer")
    n_prev = net.n_input if len(net.layers) == 1 else net.layers[-2].n_out
    rf = receptive_field(last.k, last.d, n_prev)
    if rf >= 1.0:
        raise ConfigError(
            f"last conv layer sees the whole previous stage (receptive field "
            f"{rf:.2f}); shrink k*d below {n_prev}")
    return net


@dataclass
class LayerActivation:
    """Recorded output of one layer for one cloud."""

    rep_coords: np.ndarray
    features: Optional[np.ndarray]
    neighborhoods: list


class _Stage:
    """Stacked activations of one stage across the batch."""

    def __init__(self, coords_list, feats: Optional[Node], counts):
        self.coords_list = coords_list            # per cloud (n_b, Dim)
        self.feats = feats                        # Node (sum n_b, C) or None
        self.counts = list(counts)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])


class PointCnnModel:
    """Parameters of a full network built from a NetworkSpec."""

    def __init__(self, net: NetworkSpec, rng: np.random.Generator,
                 ablated: bool = False):
        net.validate()
        self.net = net
        self.ablated = ablated
        self.conv_specs = net.conv_specs()
        self.conv_params = [XConvParams(spec, net.dim, rng, f"conv{i}", ablated)
                            for i, spec in enumerate(self.conv_specs)]
        self.deconv = net.deconv_specs(self.conv_specs) if net.deconv_layers else []
        self.deconv_params = [XConvParams(spec, net.dim, rng, f"deconv{i}", ablated)
                              for i, (spec, _, _) in enumerate(self.deconv)]

        self.head_blocks = []
        width = net.head_input_channels()
        for j, w in enumerate(net.fc_head):
            fc = Dense(width, w, rng, f"head{j}.fc")
            bn = BatchNormState(w, name=f"head{j}.bn")
            self.head_blocks.append((fc, bn))
            width = w
        self.head_out = Dense(width, net.num_classes, rng, "head_out")

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for lp in self.conv_params + self.deconv_params:
            params += lp.parameters()
        for fc, bn in self.head_blocks:
            params += fc.parameters() + [bn.scale, bn.shift]
        params += self.head_out.parameters()
        return params

    def bn_states(self) -> list[BatchNormState]:
        states: list[BatchNormState] = []
        for lp in self.conv_params + self.deconv_params:
            states += lp.bn_states()
        states += [bn for _, bn in self.head_blocks]
        return states

    def named_buffers(self):
        buffers = []
        for st in self.bn_states():
            buffers.append((f"{st.name}.running_mean", st.running_mean))
            buffers.append((f"{st.name}.running_var", st.running_var))
        return buffers

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def step_count(self) -> int:
        params = self.parameters()
        return params[0].t if params else 0


def _sample_reps(coords: np.ndarray, n_out: int, sampler: str,
                 rng: np.random.Generator) -> np.ndarray:
    if n_out > coords.shape[0]:
        raise DataError(f"cannot pick {n_out} representatives from "
                        f"{coords.shape[0]} points")
    if sampler == "fps":
        return fps_indices(coords, n_out, rng)
    return rng.choice(coords.shape[0], size=n_out, replace=False)


def _check_inputs(net: NetworkSpec, clouds) -> None:
    first = net.layers[0]
    need = max(first.k * first.d, first.n_out)
    for i, cloud in enumerate(clouds):
        if cloud.n_points < need:
            raise DataError(
                f"cloud {i} has {cloud.n_points} points; the first layer needs "
                f"at least {need}")
        if cloud.dim != net.dim:
            raise DataError(f"cloud {i} is {cloud.dim}-D, network expects {net.dim}-D")
        if (cloud.n_features or 0) != net.c_input:
            raise DataError(
                f"cloud {i} carries {cloud.n_features} feature channels, "
                f"network expects {net.c_input}")


def _input_stage(net: NetworkSpec, clouds) -> _Stage:
    coords_list = [c.coords for c in clouds]
    feats = None
    if net.c_input > 0:
        feats = constant(np.concatenate([c.features for c in clouds], axis=0))
    return _Stage(coords_list, feats, [c.n_points for c in clouds])


def _layer_forward(spec: XConvSpec, params: XConvParams, stage: _Stage,
                   rep_coords_list, nbr_list, radii, training: bool,
                   collect: Optional[list] = None) -> _Stage:
    """Run one layer for the whole batch given per-cloud reps and neighbors."""
    batch = len(stage.coords_list)
    rep_all = np.concatenate(rep_coords_list, axis=0)
    nbr_coords = np.concatenate(
        [stage.coords_list[b][nbr_list[b]] for b in range(batch)], axis=0)

    gathered = None
    if spec.c_in > 0:
        global_idx = np.concatenate(
            [nbr_list[b] + stage.offsets[b] for b in range(batch)], axis=0)
        gathered = gather_rows(stage.feats, global_idx)

    scale = 1.0
    if spec.with_global:
        scale = np.concatenate(
            [np.full(len(rep_coords_list[b]), radii[b]) for b in range(batch)])

    out = xconv_forward_batch(spec, params, rep_all, nbr_coords, gathered,
                              training=training, global_scale=scale)
    counts = [len(r) for r in rep_coords_list]
    if collect is not None:
        starts = np.concatenate([[0], np.cumsum(counts)])
        for b in range(batch):
            nbhs = [Neighborhood(rep_index=j, rep_coord=rep_coords_list[b][j],
                                 neighbor_indices=nbr_list[b][j])
                    for j in range(counts[b])]
            collect.append(LayerActivation(
                rep_coords=rep_coords_list[b],
                features=out.value[starts[b]:starts[b + 1]],
                neighborhoods=nbhs))
    return _Stage(rep_coords_list, out, counts)


def run_conv_stack(model: PointCnnModel, clouds, training: bool,
                   rng: np.random.Generator, record: Optional[list] = None):
    """Run every conv layer; returns all stages (input stage first)."""
    net = model.net
    _check_inputs(net, clouds)
    radii = [bounding_radius(c.coords) for c in clouds]
    stages = [_input_stage(net, clouds)]
    for spec, params in zip(model.conv_specs, model.conv_params):
        stage = stages[-1]
        reps, nbrs = [], []
        for b, coords in enumerate(stage.coords_list):
            rep_idx = _sample_reps(coords, spec.n_out, spec.sampler, rng)
            rep_coords = coords[rep_idx]
            nbr = dilated_sample_batch(coords, rep_coords, spec.k, spec.d, rng)
            reps.append(rep_coords)
            nbrs.append(nbr)
        collect = [] if record is not None else None
        stages.append(_layer_forward(spec, params, stage, reps, nbrs, radii,
                                     training, collect))
        if record is not None:
            record.append(collect)
    return stages, radii


def run_deconv_stack(model: PointCnnModel, stages, radii, training: bool,
                     rng: np.random.Generator) -> _Stage:
    """Run the deconv layers against the recorded conv stages."""
    current = stages[-1]
    for (spec, mirror, skip), params in zip(model.deconv, model.deconv_params):
        mirror_stage = stages[mirror]
        reps = list(mirror_stage.coords_list)
        nbrs = [dilated_sample_batch(current.coords_list[b], reps[b],
                                     spec.k, spec.d, rng)
                for b in range(len(reps))]
        produced = _layer_forward(spec, params, current, reps, nbrs, radii, training)
        if skip > 0:
            fused = concat(produced.feats, mirror_stage.feats)
        else:
            fused = produced.feats
        current = _Stage(reps, fused, produced.counts)
    return current


def run_head(model: PointCnnModel, feats: Node, training: bool,
             rng: np.random.Generator) -> Node:
    h = feats
    for fc, bn in model.head_blocks:
        h = batchnorm(elu(fc(h)), bn, training)
    h = dropout(h, model.net.dropout, training, rng)
    return model.head_out(h)


def forward_classify_batch(model: PointCnnModel, clouds, training: bool,
                           rng: np.random.Generator):
    """Per-representative-point logits for a batch of clouds.

    Returns (logits Node of shape (B * R, num_classes), R).
    """
    stages, _ = run_conv_stack(model, clouds, training, rng)
    logits = run_head(model, stages[-1].feats, training, rng)
    return logits, model.conv_specs[-1].n_out


def forward_classify(model: PointCnnModel, cloud: PointSet, training: bool,
                     rng: np.random.Generator) -> Node:
    """Logits for every final representative point of one cloud, (R, classes)."""
    logits, r = forward_classify_batch(model, [cloud], training, rng)
    return reshape(logits, (r, model.net.num_classes))


def average_logits(logits_value: np.ndarray, r: int) -> np.ndarray:
    """Collapse (B*R, C) per-point logits to (B, C) by averaging each cloud."""
    classes = logits_value.shape[-1]
    return logits_value.reshape(-1, r, classes).mean(axis=1)


def forward_segment_batch(model: PointCnnModel, clouds, training: bool,
                          rng: np.random.Generator):
    """Per-point logits for a batch; returns (logits Node, per-cloud counts)."""
    if model.net.task != "segmentation":
        raise ConfigError("model was not built for segmentation")
    stages, radii = run_conv_stack(model, clouds, training, rng)
    final = run_deconv_stack(model, stages, radii, training, rng)
    logits = run_head(model, final.feats, training, rng)
    return logits, final.counts


def forward_segment(model: PointCnnModel, cloud: PointSet, training: bool,
                    rng: np.random.Generator) -> Node:
    """Per-point logits for one cloud, in the cloud's own point order."""
    logits, _ = forward_segment_batch(model, [cloud], training, rng)
    return logits


def predict_multipass(model: PointCnnModel, cloud: PointSet, passes: int,
                      rng: np.random.Generator):
    """Average per-point logits over ``passes`` shuffled inference passes.

    Every pass feeds all points in a fresh order, so each point is
    evaluated exactly ``passes`` times. Returns (mean logits (N, C),
    appearance counts (N,)).
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    n = cloud.n_points
    total = np.zeros((n, model.net.num_classes))
    seen = np.zeros(n, dtype=np.int64)
    for _ in range(passes):
        perm = rng.permutation(n)
        shuffled = cloud.take(perm)
        logits = forward_segment(model, shuffled, training=False, rng=rng)
        total[perm] += logits.value
        seen[perm] += 1
    return total / seen[:, None], seen


def conv_receptive_fields(net: NetworkSpec) -> list[float]:
    """Receptive-field ratio of each conv layer against its input stage."""
    out = []
    prev = net.n_input
    for spec in net.layers:
        out.append(receptive_field(spec.k, spec.d, prev))
        prev = spec.n_out
    return out

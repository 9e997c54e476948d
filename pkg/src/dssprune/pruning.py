"""Bottom-k channel selection and structural surgery on conv layers.

Plan text form, one line per layer (``#`` lines are comments)::

    # ratio=0.4
    conv1: kept=[0,2,3,...] of 32
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, StateError
from .model import LayerKind, LayerSpec, ModelSpec, channel_count, forward
from .saliency import SaliencyScore
from .tensor import Tensor

_LINE = re.compile(r"^\s*(?P<lid>[^:\s]+)\s*:\s*kept=\[(?P<kept>[0-9,\s]*)\]\s+of\s+(?P<total>\d+)\s*$")


@dataclass(frozen=True)
class LayerPlan:
    layer_id: str
    kept: tuple[int, ...]
    original_channels: int

    @property
    def pruned(self) -> tuple[int, ...]:
        kept = set(self.kept)
        return tuple(i for i in range(self.original_channels) if i not in kept)

    def keep_mask(self) -> np.ndarray:
        mask = np.zeros(self.original_channels, dtype=bool)
        mask[list(self.kept)] = True
        return mask


@dataclass
class PrunePlan:
    layers: dict[str, LayerPlan] = field(default_factory=dict)
    ratio: float | None = None

    def add(self, entry: LayerPlan) -> None:
        self.layers[entry.layer_id] = entry

    def __bool__(self) -> bool:
        return any(e.pruned for e in self.layers.values())

    def to_text(self) -> str:
        lines = [] if self.ratio is None else [f"# ratio={self.ratio!r}"]
        for e in self.layers.values():
            lines.append(f"{e.layer_id}: kept=[{','.join(map(str, e.kept))}] of {e.original_channels}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PrunePlan":
        plan = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                m = re.match(r"#\s*ratio=(\S+)", stripped)
                if m:
                    plan.ratio = float(m.group(1))
                continue
            m = _LINE.match(line)
            if not m:
                raise InputError(f"plan line {lineno} is malformed: {line!r}")
            kept = tuple(int(v) for v in m.group("kept").replace(" ", "").split(",") if v)
            plan.add(_checked_entry(m.group("lid"), kept, int(m.group("total"))))
        return plan

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "PrunePlan":
        return cls.from_text(Path(path).read_text())


def _checked_entry(layer_id: str, kept, total: int) -> LayerPlan:
    kept = tuple(sorted(int(i) for i in kept))
    if not kept:
        raise InputError(f"{layer_id}: a plan must keep at least one channel")
    if len(set(kept)) != len(kept) or kept[0] < 0 or kept[-1] >= total:
        raise InputError(f"{layer_id}: kept indices must be unique and within [0, {total})")
    return LayerPlan(layer_id, kept, total)


def prune_count(ratio: float, channels: int) -> int:
    """``floor(ratio * channels)``, capped so one channel always survives."""
    # the epsilon absorbs representation error such as 0.29 * 100 = 28.999999999999996
    return min(math.floor(ratio * channels + 1e-9), channels - 1)


def select_bottom_k(score: SaliencyScore, ratio: float) -> LayerPlan:
    """Drop the ``floor(ratio * c)`` lowest-scoring channels; ties drop the lower index first."""
    if not 0 <= ratio < 1:
        raise InputError(f"sparsity ratio must lie in [0, 1), got {ratio}")
    values = np.asarray(score.values, dtype=np.float64)
    if np.isnan(values).any():
        raise InputError(f"{score.layer_id}: scores contain NaN")
    c = len(values)
    n = prune_count(ratio, c)
    order = np.lexsort((np.arange(c), values))
    return LayerPlan(score.layer_id, tuple(sorted(int(i) for i in order[n:])), c)


def make_plan(scores: dict[str, SaliencyScore], ratio: float) -> PrunePlan:
    plan = PrunePlan(ratio=ratio)
    for score in scores.values():
        plan.add(select_bottom_k(score, ratio))
    return plan


def _validate_plan(model: ModelSpec, plan: PrunePlan) -> None:
    for lid, entry in plan.layers.items():
        if lid not in model.prunable_layers:
            raise InputError(f"{lid!r} is not a prunable layer of this model")
        current = channel_count(model, lid)
        if entry.original_channels != current:
            raise StateError(
                f"{lid}: plan was made for {entry.original_channels} channels but the layer has {current}; "
                "its channels have already been pruned"
            )
        if entry.kept and max(entry.kept) >= current:
            raise StateError(f"{lid}: plan references channels beyond the current {current}")


def apply_prune(model: ModelSpec, plan: PrunePlan) -> ModelSpec:
    """Return a physically smaller copy of ``model`` with the plan's channels removed.

    A pruned conv loses output-channel slices of its weight and bias; the
    next parameterized layer loses the matching inputs (input channels of a
    conv, or the ``[i*h*w, (i+1)*h*w)`` column blocks of a dense layer
    reached through a flatten). The input model is not modified.
    """
    _validate_plan(model, plan)
    shapes = model.output_shapes()
    layers: list[LayerSpec] = []
    incoming: np.ndarray | None = None  # kept channel indices still to be applied downstream
    block = 1  # spatial size per channel once flattened
    for i, layer in enumerate(model.layers):
        params = {k: p.data for k, p in layer.params.items()}
        if layer.kind is LayerKind.CONV:
            if incoming is not None:
                params["weight"] = params["weight"][:, incoming]
                incoming = None
            entry = plan.layers.get(layer.layer_id)
            if entry is not None:
                keep = np.asarray(entry.kept)
                params["weight"] = params["weight"][keep]
                params["bias"] = params["bias"][keep]
                incoming = keep
        elif layer.kind is LayerKind.FLATTEN:
            prev = shapes[i - 1] if i > 0 else tuple(model.input_shape)
            block = math.prod(prev[1:]) if len(prev) == 3 else 1
            if incoming is not None:
                incoming = (incoming[:, None] * block + np.arange(block)[None, :]).reshape(-1)
        elif layer.kind is LayerKind.DENSE and incoming is not None:
            params["weight"] = params["weight"][:, incoming]
            incoming = None
        layers.append(
            LayerSpec(
                layer.kind,
                layer.layer_id,
                {k: Tensor(np.array(v, copy=True), requires_grad=layer.params[k].requires_grad) for k, v in params.items()},
                dict(layer.hyper),
            )
        )
    return ModelSpec(layers, tuple(model.input_shape), model.class_count, list(model.prunable_layers), model.seed)


def masked_forward(model: ModelSpec, plan: PrunePlan, batch) -> Tensor:
    """Forward the original model with pruned channels zeroed after their activation."""
    _validate_plan(model, plan)
    keep = {lid: e.keep_mask() for lid, e in plan.layers.items() if e.pruned}
    logits, _ = forward(model, batch, keep=keep or None)
    return logits


@dataclass(frozen=True)
class LayerReport:
    layer_id: str
    channels_before: int
    channels_after: int
    params_before: int
    params_after: int


@dataclass(frozen=True)
class SurgeryReport:
    layers: tuple[LayerReport, ...]
    params_before: int
    params_after: int
    channel_sparsity: float

    def summary(self) -> str:
        per_layer = ", ".join(f"{l.layer_id} {l.channels_before}->{l.channels_after}" for l in self.layers)
        return (
            f"channel sparsity {self.channel_sparsity:.4f} ({per_layer}); "
            f"params {self.params_before} -> {self.params_after}"
        )


def sparsity_report(before: ModelSpec, after: ModelSpec, plan: PrunePlan | None = None) -> SurgeryReport:
    rows = []
    for lid in before.prunable_layers:
        lb, la = before.layer(lid), after.layer(lid)
        rows.append(
            LayerReport(
                lid,
                channel_count(before, lid),
                channel_count(after, lid),
                sum(p.size for p in lb.params.values()),
                sum(p.size for p in la.params.values()),
            )
        )
    total = sum(r.channels_before for r in rows)
    kept = sum(r.channels_after for r in rows)
    return SurgeryReport(
        tuple(rows),
        before.parameter_count(),
        after.parameter_count(),
        1.0 - kept / total if total else 0.0,
    )

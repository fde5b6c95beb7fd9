"""Mini residual network with named parameter groups and checkpoint I/O.

The network mirrors a four-stage residual topology so that layer-freezing
schedules and per-stage activation capture can address stages by name:

    stem   : 3x3 conv (stride 2) + bn + relu          3x64x64 -> 16x32x32
    layer1 : basic block, width 16, stride 1          -> 16x32x32
    layer2 : basic block, width 32, stride 2          -> 32x16x16
    layer3 : basic block, width 64, stride 2          -> 64x8x8
    layer4 : basic block, width 128, stride 2         -> 128x4x4
    fc     : global average pool + linear head        -> num_classes logits

Parameters live in a flat dict keyed "group.layer.tensor"; the group is the
first dotted component, so the six groups partition the parameters by
construction. Batch-norm running statistics are kept in a separate dict with
the same naming scheme.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import ops
from .ops import BatchNormState, Tensor

GROUPS = ("stem", "layer1", "layer2", "layer3", "layer4", "fc")
STAGES = GROUPS[:-1]
STAGE_WIDTHS = {"layer1": 16, "layer2": 32, "layer3": 64, "layer4": 128}
INPUT_SIZE = 64
FEATURE_DIM = 128

CHECKPOINT_MAGIC = b"VXCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint persistence failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class TensorShapeMismatchError(CheckpointError):
    pass


@dataclass
class MiniResNet:
    num_classes: int
    seed: int
    params: dict[str, Tensor]
    bn_stats: dict[str, Tensor]
    stage: str = "source"

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        groups: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
        for name, arr in self.params.items():
            groups[self.group_of(name)][name] = arr
        return groups

    def copy(self) -> "MiniResNet":
        return MiniResNet(
            num_classes=self.num_classes,
            seed=self.seed,
            params={k: v.copy() for k, v in self.params.items()},
            bn_stats={k: v.copy() for k, v in self.bn_stats.items()},
            stage=self.stage,
        )

    def _bn_state(self, prefix: str) -> BatchNormState:
        return BatchNormState(
            running_mean=self.bn_stats[f"{prefix}.running_mean"],
            running_var=self.bn_stats[f"{prefix}.running_var"],
        )


@dataclass
class FeatureCapture:
    """Per-stage activations recorded by forward and gradients filled later.

    g[stage].shape == a[stage].shape for every captured stage once
    backward_from_class_score has run.
    """

    activations: dict[str, Tensor] = field(default_factory=dict)
    gradients: dict[str, Tensor] = field(default_factory=dict)
    _trace: Optional[list] = None


def _conv_shapes(num_classes: int) -> dict[str, tuple[int, ...]]:
    """Declared shape of every parameter, in a fixed order with fc last."""
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["stem.conv.weight"] = (16, 3, 3, 3)
    shapes["stem.bn.gamma"] = (16,)
    shapes["stem.bn.beta"] = (16,)
    in_c = 16
    for stage in ("layer1", "layer2", "layer3", "layer4"):
        out_c = STAGE_WIDTHS[stage]
        shapes[f"{stage}.conv1.weight"] = (out_c, in_c, 3, 3)
        shapes[f"{stage}.bn1.gamma"] = (out_c,)
        shapes[f"{stage}.bn1.beta"] = (out_c,)
        shapes[f"{stage}.conv2.weight"] = (out_c, out_c, 3, 3)
        shapes[f"{stage}.bn2.gamma"] = (out_c,)
        shapes[f"{stage}.bn2.beta"] = (out_c,)
        if out_c != in_c:
            shapes[f"{stage}.shortcut.conv.weight"] = (out_c, in_c, 1, 1)
            shapes[f"{stage}.shortcut.bn.gamma"] = (out_c,)
            shapes[f"{stage}.shortcut.bn.beta"] = (out_c,)
        in_c = out_c
    shapes["fc.weight"] = (num_classes, FEATURE_DIM)
    shapes["fc.bias"] = (num_classes,)
    return shapes


def _bn_stat_shapes(num_classes: int) -> dict[str, tuple[int, ...]]:
    stats: dict[str, tuple[int, ...]] = {}
    for name, shape in _conv_shapes(num_classes).items():
        if name.endswith(".gamma"):
            prefix = name[: -len(".gamma")]
            stats[f"{prefix}.running_mean"] = shape
            stats[f"{prefix}.running_var"] = shape
    return stats


def _init_fc(num_classes: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    std = np.sqrt(2.0 / FEATURE_DIM)
    return {
        "fc.weight": (rng.standard_normal((num_classes, FEATURE_DIM)) * std).astype(np.float32),
        "fc.bias": np.zeros(num_classes, dtype=np.float32),
    }


def build_model(num_classes: int, seed: int) -> MiniResNet:
    """He fan-in normal init for conv/linear weights; bn gamma 1, beta 0.

    The body and the head draw from independent seed streams, so models built
    with the same seed share every non-fc tensor regardless of num_classes.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    body_rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    params: dict[str, Tensor] = {}
    for name, shape in _conv_shapes(num_classes).items():
        if name.startswith("fc."):
            continue
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = (body_rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    params.update(_init_fc(num_classes, seed))
    bn_stats = {}
    for name, shape in _bn_stat_shapes(num_classes).items():
        bn_stats[name] = (
            np.ones(shape, dtype=np.float32) if name.endswith("running_var") else np.zeros(shape, dtype=np.float32)
        )
    return MiniResNet(num_classes=num_classes, seed=seed, params=params, bn_stats=bn_stats)


def replace_head(model: MiniResNet, num_classes: int, seed: Optional[int] = None) -> MiniResNet:
    """New model with fc reinitialized for num_classes; everything else copied bit-identically."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    head_seed = model.seed if seed is None else seed
    out = model.copy()
    out.num_classes = num_classes
    for name in ("fc.weight", "fc.bias"):
        del out.params[name]
    out.params.update(_init_fc(num_classes, head_seed))
    return out


def _block_forward(
    model: MiniResNet,
    stage: str,
    x: Tensor,
    mode: str,
) -> tuple[Tensor, Callable]:
    p = model.params
    has_projection = f"{stage}.shortcut.conv.weight" in p
    stride = 1 if stage == "layer1" else 2
    y, conv1_b = ops.conv2d(x, p[f"{stage}.conv1.weight"], stride=stride, pad=1)
    y, bn1_b = ops.batchnorm2d(y, p[f"{stage}.bn1.gamma"], p[f"{stage}.bn1.beta"], model._bn_state(f"{stage}.bn1"), mode)
    y, relu1_b = ops.relu(y)
    y, conv2_b = ops.conv2d(y, p[f"{stage}.conv2.weight"], stride=1, pad=1)
    y, bn2_b = ops.batchnorm2d(y, p[f"{stage}.bn2.gamma"], p[f"{stage}.bn2.beta"], model._bn_state(f"{stage}.bn2"), mode)
    if has_projection:
        sc, sc_conv_b = ops.conv2d(x, p[f"{stage}.shortcut.conv.weight"], stride=stride, pad=0)
        sc, sc_bn_b = ops.batchnorm2d(
            sc, p[f"{stage}.shortcut.bn.gamma"], p[f"{stage}.shortcut.bn.beta"], model._bn_state(f"{stage}.shortcut.bn"), mode
        )
    else:
        sc = x
    out, relu2_b = ops.relu(y + sc)

    def backward(upstream: Tensor, want_params: bool, want_input: bool) -> tuple[Optional[Tensor], dict[str, Tensor]]:
        d_sum = relu2_b(upstream)
        grads: dict[str, Tensor] = {}
        g = bn2_b(d_sum, want_input=True)
        if want_params:
            grads[f"{stage}.bn2.gamma"] = g.d_params["gamma"]
            grads[f"{stage}.bn2.beta"] = g.d_params["beta"]
        g = conv2_b(g.d_input, want_input=True)
        if want_params:
            grads[f"{stage}.conv2.weight"] = g.d_params["kernel"]
        d = relu1_b(g.d_input)
        g = bn1_b(d, want_input=True)
        if want_params:
            grads[f"{stage}.bn1.gamma"] = g.d_params["gamma"]
            grads[f"{stage}.bn1.beta"] = g.d_params["beta"]
        g = conv1_b(g.d_input, want_input=want_input)
        if want_params:
            grads[f"{stage}.conv1.weight"] = g.d_params["kernel"]
        d_input = g.d_input
        if has_projection:
            gs = sc_bn_b(d_sum, want_input=True)
            if want_params:
                grads[f"{stage}.shortcut.bn.gamma"] = gs.d_params["gamma"]
                grads[f"{stage}.shortcut.bn.beta"] = gs.d_params["beta"]
            gs = sc_conv_b(gs.d_input, want_input=want_input)
            if want_params:
                grads[f"{stage}.shortcut.conv.weight"] = gs.d_params["kernel"]
            if want_input:
                d_input = d_input + gs.d_input
        elif want_input:
            d_input = d_input + d_sum
        return d_input, grads

    return out, backward


def _stem_forward(model: MiniResNet, x: Tensor, mode: str) -> tuple[Tensor, Callable]:
    p = model.params
    y, conv_b = ops.conv2d(x, p["stem.conv.weight"], stride=2, pad=1)
    y, bn_b = ops.batchnorm2d(y, p["stem.bn.gamma"], p["stem.bn.beta"], model._bn_state("stem.bn"), mode)
    out, relu_b = ops.relu(y)

    def backward(upstream: Tensor, want_params: bool, want_input: bool) -> tuple[Optional[Tensor], dict[str, Tensor]]:
        d = relu_b(upstream)
        grads: dict[str, Tensor] = {}
        g = bn_b(d, want_input=True)
        if want_params:
            grads["stem.bn.gamma"] = g.d_params["gamma"]
            grads["stem.bn.beta"] = g.d_params["beta"]
        g = conv_b(g.d_input, want_input=want_input)
        if want_params:
            grads["stem.conv.weight"] = g.d_params["kernel"]
        return g.d_input, grads

    return out, backward


def _head_forward(model: MiniResNet, x: Tensor) -> tuple[Tensor, Callable]:
    p = model.params
    pooled, pool_b = ops.global_avg_pool(x)
    n, c = pooled.shape[:2]
    flat = pooled.reshape(n, c)
    logits, fc_b = ops.linear(flat, p["fc.weight"], p["fc.bias"])

    def backward(upstream: Tensor, want_params: bool, want_input: bool) -> tuple[Optional[Tensor], dict[str, Tensor]]:
        g = fc_b(upstream, want_input=want_input)
        grads: dict[str, Tensor] = {}
        if want_params:
            grads["fc.weight"] = g.d_params["weight"]
            grads["fc.bias"] = g.d_params["bias"]
        d_input = pool_b(g.d_input.reshape(n, c, 1, 1)) if want_input else None
        return d_input, grads

    return logits, backward


def forward_trace(
    model: MiniResNet,
    batch: Tensor,
    train_stages: Iterable[str] = (),
    capture: Iterable[str] = (),
    start_stage: Optional[str] = None,
):
    """Run the network, recording backward closures and captured activations.

    train_stages selects which stages run batch-norm in train mode (updating
    running stats); all others run in eval mode. When start_stage is given,
    `batch` is taken to be that stage's output and only later stages run.
    Returns (logits, steps, captured) where steps is the bottom-up list of
    (group_name, backward) pairs actually executed.
    """
    train_set = frozenset(train_stages)
    capture_set = frozenset(capture)
    unknown = capture_set - set(STAGES)
    if unknown:
        raise ValueError(f"unknown capture stages {sorted(unknown)}; valid: {STAGES}")
    steps: list[tuple[str, Callable]] = []
    captured: dict[str, Tensor] = {}
    x = batch
    chain = list(STAGES)
    if start_stage is not None:
        if start_stage not in STAGES:
            raise ValueError(f"unknown start stage {start_stage!r}")
        chain = chain[chain.index(start_stage) + 1 :]
    for stage in chain:
        mode = "train" if stage in train_set else "eval"
        if stage == "stem":
            x, bwd = _stem_forward(model, x, mode)
        else:
            x, bwd = _block_forward(model, stage, x, mode)
        steps.append((stage, bwd))
        if stage in capture_set:
            captured[stage] = x
    logits, head_bwd = _head_forward(model, x)
    steps.append(("fc", head_bwd))
    return logits, steps, captured


def backward_trace(
    steps: list[tuple[str, Callable]],
    d_logits: Tensor,
    trainable_groups: Iterable[str] = (),
    capture: Iterable[str] = (),
) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Walk the trace top-down, collecting parameter grads and capture grads.

    Descends only as deep as the earliest trainable group or captured stage
    requires; returns (param_grads, capture_grads).
    """
    trainable = frozenset(trainable_groups)
    capture_set = frozenset(capture)
    needed = [i for i, (name, _) in enumerate(steps) if name in trainable or name in capture_set]
    lowest = min(needed) if needed else len(steps)
    grads: dict[str, Tensor] = {}
    cap_grads: dict[str, Tensor] = {}
    d = d_logits
    for i in range(len(steps) - 1, -1, -1):
        name, bwd = steps[i]
        if name in capture_set:
            cap_grads[name] = d
        if i < lowest:
            break
        want_params = name in trainable
        want_input = i > lowest
        if not want_params and not want_input:
            break
        d, step_grads = bwd(d, want_params=want_params, want_input=want_input)
        grads.update(step_grads)
    return grads, cap_grads


def forward(
    model: MiniResNet,
    batch: Tensor,
    mode: str = "eval",
    capture: Iterable[str] = (),
) -> tuple[Tensor, FeatureCapture]:
    """Forward pass returning logits and a FeatureCapture for the named stages."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train_stages = STAGES if mode == "train" else ()
    logits, steps, captured = forward_trace(model, batch, train_stages=train_stages, capture=capture)
    return logits, FeatureCapture(activations=captured, _trace=steps)


def backward_from_class_score(model: MiniResNet, capture: FeatureCapture, class_index: int) -> FeatureCapture:
    """Fill capture.gradients with d(logit_class)/d(activation) per captured stage.

    Gradients are of each sample's own pre-softmax score for class_index;
    model parameters are left untouched.
    """
    if capture._trace is None:
        raise ValueError("backward_from_class_score requires a capture produced by forward()")
    if not (0 <= class_index < model.num_classes):
        raise ValueError(f"class_index {class_index} out of range [0, {model.num_classes})")
    head_step = capture._trace[-1]
    batch = capture.activations[next(iter(capture.activations))].shape[0] if capture.activations else None
    if batch is None:
        # Nothing captured; gradients are trivially empty.
        capture.gradients = {}
        return capture
    d_logits = np.zeros((batch, model.num_classes), dtype=np.float32)
    d_logits[:, class_index] = 1.0
    _, cap_grads = backward_trace(capture._trace, d_logits, trainable_groups=(), capture=capture.activations.keys())
    capture.gradients = cap_grads
    for stage, g in cap_grads.items():
        if g.shape != capture.activations[stage].shape:
            raise AssertionError(f"gradient shape {g.shape} != activation shape for {stage}")
    return capture


def save_checkpoint(model: MiniResNet, path) -> None:
    """Write all parameters and running stats in the VXCK binary format."""
    entries = sorted({**model.params, **model.bn_stats}.items())
    meta = json.dumps(
        {"num_classes": model.num_classes, "seed": model.seed, "stage": model.stage},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedCheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> MiniResNet:
    """Read a VXCK checkpoint back into a MiniResNet, validating shapes."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        tensors: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims"))
            numel = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(_read_exact(f, 4 * numel, f"data of {name}"), dtype="<f4")
            tensors[name] = data.reshape(dims).astype(np.float32)
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        meta = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))

    model = build_model(int(meta["num_classes"]), int(meta["seed"]))
    model.stage = str(meta.get("stage", "source"))
    expected = {**_conv_shapes(model.num_classes), **_bn_stat_shapes(model.num_classes)}
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise TensorShapeMismatchError(f"checkpoint entries do not match model: missing={missing}, extra={extra}")
    for name, arr in tensors.items():
        if arr.shape != expected[name]:
            raise TensorShapeMismatchError(f"tensor {name} has shape {arr.shape}, declared {expected[name]}")
        target = model.params if name in model.params else model.bn_stats
        target[name][...] = arr
    return model

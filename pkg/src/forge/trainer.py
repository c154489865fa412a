"""Two-stage layer-selective tuning plus the ablation modes it is
compared against: single-stage union training, full fine-tuning, and the
per-layer sweep.

Freezing contract: a training step touches exactly the tensors of the
stage's trainable set; everything else stays bit-identical. Embeddings
and the final norm gain train only in full fine-tuning. Each stage gets
a fresh optimizer state and a fresh warmup+cosine schedule over the same
dataset.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange, OverlappingStages
from .synth import EvalResult, EvalSet, evaluate
from .tinylm import (
    Batch,
    ModelParams,
    ParamKey,
    global_keys,
    layer_keys,
    loss_and_backward,
)


@dataclass(frozen=True)
class LayerSelection:
    n_layers: int
    bottom_k: int
    top_m: int
    skip: frozenset[int]
    stage1_layers: frozenset[int]
    stage2_layers: frozenset[int]


def select_layers(n_layers: int, k: int, m: int, skip=()) -> LayerSelection:
    """Resolve bottom-k / top-m index sets. k and m larger than the layer
    count select all layers from that end; the skip list is removed
    before the overlap check."""
    if k < 0 or m < 0:
        raise IndexOutOfRange("k and m must be >= 0")
    skip_set = frozenset(skip)
    for idx in skip_set:
        if not 0 <= idx < n_layers:
            raise IndexOutOfRange(f"skip index {idx} outside 0..{n_layers - 1}")
    k = min(k, n_layers)
    m = min(m, n_layers)
    stage1 = frozenset(range(k)) - skip_set
    stage2 = frozenset(range(n_layers - m, n_layers)) - skip_set
    if stage1 & stage2:
        raise OverlappingStages(
            f"bottom-{k} and top-{m} overlap on layers {sorted(stage1 & stage2)}")
    return LayerSelection(n_layers, k, m, skip_set, stage1, stage2)


@dataclass
class TrainConfig:
    lr_max: float = 1e-5
    lr_min: float = 2e-6
    warmup_ratio: float = 0.03
    epochs: int = 1
    batch_size: int = 16
    grad_accum: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must be <= lr_max")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.grad_accum < 1 or self.epochs < 1:
            raise ValueError("grad_accum and epochs must be >= 1")


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to lr_max over ceil(warmup_ratio * total) steps,
    then cosine decay to exactly lr_min at the final step."""
    warmup = math.ceil(config.warmup_ratio * total_steps)
    if step < warmup:
        return config.lr_max * (step + 1) / warmup
    span = total_steps - warmup - 1
    if span <= 0:
        return config.lr_max
    progress = (step - warmup) / span
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (
        1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class TrainMode:
    kind: str  # "two-stage" | "single-stage" | "fft" | "single-layer"
    selection: LayerSelection | None = None
    layer: int | None = None

    @classmethod
    def two_stage(cls, selection: LayerSelection) -> "TrainMode":
        return cls("two-stage", selection=selection)

    @classmethod
    def single_stage(cls, selection: LayerSelection) -> "TrainMode":
        return cls("single-stage", selection=selection)

    @classmethod
    def full_finetune(cls) -> "TrainMode":
        return cls("fft")

    @classmethod
    def single_layer(cls, layer: int) -> "TrainMode":
        return cls("single-layer", layer=layer)

    def label(self) -> str:
        if self.kind == "single-layer":
            return f"single-layer:{self.layer}"
        return self.kind


def stage_plan(mode: TrainMode, n_layers: int) -> list[tuple[str, set[ParamKey]]]:
    """Resolve a mode into (stage name, trainable parameter keys) pairs."""
    if mode.kind == "two-stage":
        sel = mode.selection
        return [
            ("stage1", resolve_layer_keys_for(sel.stage1_layers, n_layers)),
            ("stage2", resolve_layer_keys_for(sel.stage2_layers, n_layers)),
        ]
    if mode.kind == "single-stage":
        sel = mode.selection
        union = sel.stage1_layers | sel.stage2_layers
        return [("single", resolve_layer_keys_for(union, n_layers))]
    if mode.kind == "fft":
        keys = resolve_layer_keys_for(set(range(n_layers)), n_layers)
        keys.update(global_keys())
        return [("fft", keys)]
    if mode.kind == "single-layer":
        if not 0 <= mode.layer < n_layers:
            raise IndexOutOfRange(f"layer {mode.layer} outside 0..{n_layers - 1}")
        return [(f"layer{mode.layer}", resolve_layer_keys_for({mode.layer}, n_layers))]
    raise ValueError(f"unknown mode {mode.kind!r}")


def resolve_layer_keys_for(layers, n_layers: int) -> set[ParamKey]:
    for layer in layers:
        if not 0 <= layer < n_layers:
            raise IndexOutOfRange(f"layer {layer} outside 0..{n_layers - 1}")
    keys: set[ParamKey] = set()
    for layer in layers:
        keys.update(layer_keys(layer))
    return keys


class AdamState:
    """First/second moments, held only for the trainable tensors."""

    def __init__(self):
        self.m: dict[ParamKey, np.ndarray] = {}
        self.v: dict[ParamKey, np.ndarray] = {}
        self.t = 0


def optimizer_step(params: ModelParams, grads: dict[ParamKey, np.ndarray],
                   state: AdamState, trainable: set[ParamKey], lr: float,
                   config: TrainConfig) -> None:
    """One AdamW update restricted to the trainable keys; every other
    tensor is left bit-identical."""
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for key in params.keys():
        if key not in trainable:
            continue
        g = grads[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        m = state.m[key]
        v = state.v[key]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * params[key]
        params[key] -= (lr * update).astype(params[key].dtype)


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    stage_params: dict[str, ModelParams] = field(default_factory=dict)
    wall_clock: float = 0.0


def _epoch_order(n_batches: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_batches)


def _run_stage(params: ModelParams, batches: list[Batch], trainable: set[ParamKey],
               config: TrainConfig, stage: str, log: list[dict]) -> None:
    steps_per_epoch = math.ceil(len(batches) / config.grad_accum)
    total_steps = config.epochs * steps_per_epoch
    state = AdamState()
    step = 0
    for epoch in range(config.epochs):
        order = _epoch_order(len(batches), config.seed, epoch)
        for start in range(0, len(order), config.grad_accum):
            window = order[start:start + config.grad_accum]
            acc: dict[ParamKey, np.ndarray] | None = None
            losses = []
            for idx in window:
                loss, grads = loss_and_backward(params, batches[int(idx)])
                losses.append(loss)
                if acc is None:
                    acc = grads
                else:
                    for key in acc:
                        acc[key] += grads[key]
            for key in acc:
                acc[key] /= len(window)
            lr = lr_at(step, total_steps, config)
            optimizer_step(params, acc, state, trainable, lr, config)
            log.append({"stage": stage, "step": step, "lr": lr,
                        "loss": float(np.mean(losses))})
            step += 1


def run(start_params: ModelParams, batches: list[Batch], mode: TrainMode,
        config: TrainConfig) -> TrainResult:
    """Train per the mode's stage plan. The caller's params are never
    mutated; each stage starts from the previous stage's output with a
    fresh optimizer and schedule over the same data order."""
    t0 = time.monotonic()
    params = start_params.clone()
    result = TrainResult(params=params)
    for stage, trainable in stage_plan(mode, params.config.n_layers):
        if not trainable:
            result.log.append({"stage": stage, "skipped": True})
        else:
            _run_stage(params, batches, trainable, config, stage, result.log)
        result.stage_params[stage] = params.clone()
    result.wall_clock = time.monotonic() - t0
    return result


@dataclass
class SweepRow:
    layer: int
    results: dict[str, EvalResult]


def single_layer_sweep(start_params: ModelParams, batches: list[Batch],
                       eval_sets: dict[str, EvalSet], config: TrainConfig,
                       workers: int = 1) -> list[SweepRow]:
    """Train each layer independently from the same start checkpoint and
    evaluate on the held-out sets. Rows come back ordered by layer and
    are independent of execution order."""

    def one(layer: int) -> SweepRow:
        res = run(start_params, batches, TrainMode.single_layer(layer), config)
        evals = {name: evaluate(res.params, es) for name, es in eval_sets.items()}
        return SweepRow(layer=layer, results=evals)

    layers = range(start_params.config.n_layers)
    if workers <= 1:
        return [one(layer) for layer in layers]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, layers))

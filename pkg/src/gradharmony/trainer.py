"""Pre-training loop: batch sampling, both pairwise losses, harmonizer dispatch,
optimizer update and per-step records."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from . import model as M
from .errors import ConfigError, DimensionError, DivergenceError
from .harmonizer import HarmonizerConfig, combine, expected_action, gamma_at
from .linalg import cosine_similarity
from .seeding import derive_rng
from .synth import Triplet, to_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    lr_schedule: str = "cosine"
    min_lr_ratio: float = 0.5
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    harmonizer: HarmonizerConfig = field(default_factory=HarmonizerConfig)
    temperature: float = M.DEFAULT_TEMPERATURE
    symmetric: bool = False
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.warmup_steps <= max(self.steps, 0):
            raise ConfigError("warmup_steps must lie in [0, steps]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.min_lr_ratio <= 1:
            raise ConfigError("min_lr_ratio must lie in (0, 1]")
        if self.log_every <= 0:
            raise ConfigError("log_every must be positive")


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss_va: float
    loss_vt: float
    cos_sim: float
    action: str
    grad_norm_va: float
    grad_norm_vt: float
    gamma: float
    lr: float
    n_dropped: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        return cls(**json.loads(line))


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def learning_rate_at(config: TrainConfig, step: int) -> float:
    """Linear warmup to the peak rate, then constant or cosine decay to
    ``min_lr_ratio`` times the peak at the final step."""
    peak = config.learning_rate
    if step < config.warmup_steps:
        return peak * (step + 1) / config.warmup_steps
    if config.lr_schedule == "constant":
        return peak
    span = max(config.steps - config.warmup_steps, 1)
    progress = min((step - config.warmup_steps) / span, 1.0)
    floor = peak * config.min_lr_ratio
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def apply_update(vector: np.ndarray, grad: np.ndarray, state: OptimizerState, lr: float,
                 config: TrainConfig):
    """One SGD or Adam update on a plain parameter array."""
    if config.optimizer == "sgd":
        return vector - lr * grad, replace(state, t=state.t + 1)
    b1, b2 = config.adam_beta1, config.adam_beta2
    m = np.zeros_like(grad) if state.m is None else state.m
    v = np.zeros_like(grad) if state.v is None else state.v
    t = state.t + 1
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    return vector - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps), OptimizerState(m, v, t)


def optimizer_step(params: M.ModelParams, grad, state: OptimizerState, step: int,
                   config: TrainConfig):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.vector.shape:
        raise DimensionError(f"gradient length {grad.size} != parameter count {params.size}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite gradient at step {step}", step=step)
    vector, state = apply_update(params.vector, grad, state, learning_rate_at(config, step), config)
    return params.with_vector(vector), state


def _as_batch(data) -> M.RawBatch:
    if isinstance(data, M.RawBatch):
        return data
    if not data:
        raise ConfigError("training data is empty")
    return to_batch(list(data))


def _per_sample_update(params, batch, config: TrainConfig, step):
    hcfg = config.harmonizer
    ps = M.per_sample_grads(params, batch, config.temperature, config.symmetric)
    b = batch.size
    total = np.zeros(params.size)
    n_drop = n_proj = 0
    for i in range(b):
        d = combine(ps.g_va[i], ps.g_vt[i], hcfg, step)
        if d.action == "drop":
            n_drop += 1
            continue
        n_proj += d.action == "project"
        total += d.combined_grad
    g_va, g_vt = ps.g_va.mean(axis=0), ps.g_vt.mean(axis=0)
    if n_drop == b:
        action = "drop"
    elif n_proj:
        action = "project"
    else:
        action = "plain"
    cos = cosine_similarity(g_va, g_vt).value
    update = None if action == "drop" else total / b
    return float(ps.loss_va.mean()), float(ps.loss_vt.mean()), g_va, g_vt, cos, action, update, n_drop


def train(params: M.ModelParams, data, config: TrainConfig,
          on_step: Callable[[dict], None] | None = None):
    """Run ``config.steps`` harmonized updates; returns ``(params, records)``.

    ``on_step`` (optional) receives a dict with the step number, sampled
    batch indices, the parameters before the step, raw gradients, the
    decision and the record. It must not mutate anything.
    """
    batch_all = _as_batch(data)
    n = batch_all.size
    if config.batch_size > n:
        raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    rng = derive_rng(config.seed, "train-batches")
    hcfg = config.harmonizer
    state = OptimizerState()
    records = []
    for step in range(config.steps):
        idx = np.sort(rng.choice(n, size=config.batch_size, replace=False))
        batch = batch_all.take(idx)
        gamma = gamma_at(hcfg.schedule, step)
        if hcfg.granularity == "per_sample":
            loss_va, loss_vt, g_va, g_vt, cos, action, update, n_drop = _per_sample_update(
                params, batch, config, step)
            decision = None
        else:
            loss_va, g_va = M.loss_and_grad_va(params, batch, config.temperature, config.symmetric)
            loss_vt, g_vt = M.loss_and_grad_vt(params, batch, config.temperature, config.symmetric)
            decision = combine(g_va, g_vt, hcfg, step)
            cos, action, update = decision.cos_sim, decision.action, decision.combined_grad
            n_drop = config.batch_size if action == "drop" else 0
        if not (math.isfinite(loss_va) and math.isfinite(loss_vt)):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        rec = StepRecord(step, loss_va, loss_vt, cos, action,
                         float(np.linalg.norm(g_va)), float(np.linalg.norm(g_vt)),
                         gamma, learning_rate_at(config, step), n_drop)
        if on_step is not None:
            on_step({"step": step, "indices": idx, "params": params, "g_va": g_va,
                     "g_vt": g_vt, "decision": decision, "record": rec})
        if update is not None:
            params, state = optimizer_step(params, update, state, step, config)
        records.append(rec)
        if (step + 1) % config.log_every == 0:
            log.info("step %d loss_va=%.4f loss_vt=%.4f cos=%.3f action=%s",
                     step, loss_va, loss_vt, cos, action)
    return params, records


class ConflictSample(NamedTuple):
    id: int
    cos: float
    text_aligned: bool
    audio_aligned: bool

    @property
    def aligned(self) -> bool:
        return self.text_aligned and self.audio_aligned


def probe_conflicts(params: M.ModelParams, probe: list[Triplet], batch_size: int,
                    temperature=M.DEFAULT_TEMPERATURE, symmetric=False) -> list[ConflictSample]:
    """Per-sample cos(g_va, g_vt) over ``probe``.

    The probe set is cut, in order, into near-equal chunks of at most
    ``batch_size``; each triplet's negatives are the other members of its chunk.
    """
    if len(probe) < 2:
        raise ConfigError("probe set needs at least two triplets")
    n_chunks = max(1, math.ceil(len(probe) / batch_size))
    if len(probe) // n_chunks < 2:
        n_chunks = len(probe) // 2
    out = []
    for chunk in np.array_split(np.arange(len(probe)), n_chunks):
        items = [probe[i] for i in chunk]
        ps = M.per_sample_grads(params, to_batch(items), temperature, symmetric)
        for t, gva, gvt in zip(items, ps.g_va, ps.g_vt):
            out.append(ConflictSample(t.id, cosine_similarity(gva, gvt).value,
                                      t.text_aligned, t.audio_aligned))
    return out


def conflict_trace(params: M.ModelParams, data, probe: list[Triplet], config: TrainConfig,
                   n_probe_steps: int):
    """Warm the model for ``n_probe_steps`` baseline steps on ``data``, then
    measure per-sample gradient agreement on the held-out ``probe`` set.

    Returns ``(samples, warmed_params, records)``.
    """
    probe_cfg = replace(config, steps=n_probe_steps,
                        warmup_steps=min(config.warmup_steps, n_probe_steps),
                        harmonizer=replace(config.harmonizer, mode="baseline",
                                           granularity="microbatch"))
    warmed, records = train(params, data, probe_cfg)
    samples = probe_conflicts(warmed, probe, config.batch_size, config.temperature,
                              config.symmetric)
    return samples, warmed, records


def audit_records(records: list[StepRecord], mode: str) -> list[int]:
    """Steps whose logged action disagrees with the logged cos and gamma."""
    return [r.step for r in records if r.action != expected_action(mode, r.cos_sim, r.gamma)]


def write_step_log(records: list[StepRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_step_log(path) -> list[StepRecord]:
    with open(path) as fh:
        return [StepRecord.from_json(line) for line in fh if line.strip()]

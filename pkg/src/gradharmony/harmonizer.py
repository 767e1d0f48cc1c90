"""Gradient harmonization: realignment by projection, gamma-scheduled curriculum
dropping, the re-weighting baseline and the combined three-way dispatch."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DimensionError
from .linalg import NORM_EPS, cosine_similarity

MODES = ("baseline", "reweight", "realign", "curriculum", "both")
GRANULARITIES = ("microbatch", "per_sample")
ACTIONS = ("drop", "project", "plain")

# (w_va, w_vt) presets for the re-weighting baseline
RW_VA = (2.5, 0.5)
RW_VT = (0.5, 2.5)


@dataclass(frozen=True)
class GammaSchedule:
    gamma_start: float = -0.3
    gamma_end: float = 0.0
    total_steps: int = 2000

    def __post_init__(self):
        for name in ("gamma_start", "gamma_end"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [-1, 1], got {v}")
        if self.gamma_start > self.gamma_end:
            raise ConfigError("gamma schedule must be nondecreasing (gamma_start <= gamma_end)")
        if self.total_steps <= 0:
            raise ConfigError("gamma schedule total_steps must be positive")


@dataclass(frozen=True)
class HarmonizerConfig:
    mode: str = "baseline"
    w_va: float = 1.0
    w_vt: float = 1.0
    schedule: GammaSchedule = field(default_factory=GammaSchedule)
    granularity: str = "microbatch"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown harmonizer mode {self.mode!r}; expected one of {MODES}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        for name in ("w_va", "w_vt"):
            w = getattr(self, name)
            if not (np.isfinite(w) and w > 0):
                raise ConfigError(f"{name} must be finite and positive, got {w}")


class UpdateDecision(NamedTuple):
    action: str
    combined_grad: np.ndarray | None
    cos_sim: float
    degenerate: bool = False


def _pair(g_va, g_vt):
    g_va = np.asarray(g_va, dtype=np.float64)
    g_vt = np.asarray(g_vt, dtype=np.float64)
    if g_va.shape != g_vt.shape or g_va.ndim != 1:
        raise DimensionError(f"gradient shapes differ: {g_va.shape} vs {g_vt.shape}")
    return g_va, g_vt


def realign(g_va, g_vt):
    """Project each gradient onto the normal plane of the other when they conflict.

    Both projections use the original counterpart, so the result does not
    depend on the order of the two losses. Non-conflicting pairs
    (``g_va . g_vt >= 0``) are returned unchanged.
    """
    g_va, g_vt = _pair(g_va, g_vt)
    d = float(g_va @ g_vt)
    if d >= 0:
        return g_va.copy(), g_vt.copy()
    # d < 0 implies both vectors are nonzero
    return _reject(g_va, g_vt), _reject(g_vt, g_va)


_EPS = np.finfo(np.float64).eps


def _unit(x: np.ndarray) -> np.ndarray:
    # prescaled so tiny or huge vectors neither underflow nor overflow
    x = x / np.max(np.abs(x))
    return x / np.sqrt(x @ x)


def _norm(x: np.ndarray) -> float:
    s = np.max(np.abs(x))
    return float(s * np.sqrt((x / s) @ (x / s))) if s > 0 else 0.0


def _reject(g: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``g - (g.h / |h|^2) h``, accurate to round-off relative to the result."""
    u = _unit(h)
    r = g - float(g @ u) * u
    # a second pass removes the round-off left along h, which dominates when
    # g and h are nearly collinear and the true result is small
    r = r - float(r @ u) * u
    g_norm, r_norm = _norm(g), _norm(r)
    if r_norm <= _EPS * g_norm:
        # below the resolution of the first pass: g is collinear with h
        return np.zeros_like(g)
    # the exact result never outgrows g; undo last-ulp growth from rounding,
    # as seen by either the scaled or the plain norm
    if r_norm > g_norm:
        r = r * (g_norm / r_norm)
    while _norm(r) > g_norm or np.linalg.norm(r) > np.linalg.norm(g):
        r = r * (1 - 2 * _EPS)
    return r


def gamma_at(schedule: GammaSchedule, step: int) -> float:
    if step >= schedule.total_steps:
        return schedule.gamma_end
    frac = max(step, 0) / schedule.total_steps
    return schedule.gamma_start + frac * (schedule.gamma_end - schedule.gamma_start)


def curriculum_decision(cos_sim: float, gamma: float) -> str:
    return "keep" if cos_sim > gamma else "drop"


def combine(g_va, g_vt, config: HarmonizerConfig, step: int, eps: float = NORM_EPS) -> UpdateDecision:
    """Turn one (g_va, g_vt) pair into the update direction for ``config.mode``.

    ``both`` partitions the cosine range into three cases:
    ``cos <= gamma`` drops the sample, ``gamma < cos < 0`` projects, and
    ``cos >= 0`` keeps the plain sum.
    """
    g_va, g_vt = _pair(g_va, g_vt)
    cos, degenerate = cosine_similarity(g_va, g_vt, eps)
    mode = config.mode

    if mode == "baseline":
        return UpdateDecision("plain", g_va + g_vt, cos, degenerate)
    if mode == "reweight":
        return UpdateDecision("plain", config.w_va * g_va + config.w_vt * g_vt, cos, degenerate)
    if mode == "realign":
        if float(g_va @ g_vt) < 0:
            a, b = realign(g_va, g_vt)
            return UpdateDecision("project", a + b, cos, degenerate)
        return UpdateDecision("plain", g_va + g_vt, cos, degenerate)

    gamma = gamma_at(config.schedule, step)
    if curriculum_decision(cos, gamma) == "drop":
        return UpdateDecision("drop", None, cos, degenerate)
    if mode == "both" and cos < 0:
        a, b = realign(g_va, g_vt)
        return UpdateDecision("project", a + b, cos, degenerate)
    return UpdateDecision("plain", g_va + g_vt, cos, degenerate)


def expected_action(mode: str, cos_sim: float, gamma: float) -> str:
    """Action ``combine`` must have taken for a logged (cos, gamma); used to audit logs."""
    if mode in ("baseline", "reweight"):
        return "plain"
    if mode == "realign":
        return "project" if cos_sim < 0 else "plain"
    if cos_sim <= gamma:
        return "drop"
    if mode == "both" and cos_sim < 0:
        return "project"
    return "plain"

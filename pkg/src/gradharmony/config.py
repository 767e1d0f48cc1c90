"""Flat ``key = value`` experiment configuration.

One key per line, ``#`` starts a comment. Unknown keys, duplicate keys and
unparsable values are rejected with the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .harmonizer import GammaSchedule, HarmonizerConfig
from .model import ModelDims
from .seeding import derive_seed
from .synth import SynthConfig
from .trainer import TrainConfig


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


REQUIRED = object()

# key -> (parser, default)
SCHEMA = {
    "seed": (int, REQUIRED),
    # data
    "n_samples": (int, 2000),
    "latent_dim": (int, 16),
    "dim_video": (int, 24),
    "dim_audio": (int, 20),
    "dim_text": (int, 28),
    "p_mis_text": (float, 0.0),
    "p_mis_audio": (float, 0.0),
    "noise_std": (float, 0.1),
    "neighbor_std": (float, 0.3),
    "k_neighbors": (int, 4),
    "eval_fraction": (float, 0.2),
    # model
    "hidden_dim": (int, 32),
    "backbone_layers": (int, 2),
    "emb_dim_va": (int, 16),
    "emb_dim_vt": (int, 16),
    "temperature": (float, 0.07),
    "symmetric": (_bool, False),
    # training
    "steps": (int, 2000),
    "batch_size": (int, 64),
    "learning_rate": (float, 1e-3),
    "warmup_steps": (int, 100),
    "lr_schedule": (str, "cosine"),
    "min_lr_ratio": (float, 0.5),
    "optimizer": (str, "adam"),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "log_every": (int, 100),
    "checkpoint_every": (int, 0),
    # harmonizer
    "mode": (str, "baseline"),
    "w_va": (float, 1.0),
    "w_vt": (float, 1.0),
    "gamma_start": (float, -0.3),
    "gamma_end": (float, 0.0),
    "gamma_steps": (int, 0),  # 0: same as steps
    "granularity": (str, "microbatch"),
    # evaluation / diagnosis
    "retrieval_ks": (_int_list, (1, 5, 10)),
    "probe_steps": (int, 200),
    "probe_size": (int, 256),
    "n_step_bins": (int, 10),
    "n_cos_bins": (int, 20),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    text: str = ""

    def __getitem__(self, key):
        return self.values[key]

    @property
    def synth(self) -> SynthConfig:
        v = self.values
        return SynthConfig(
            n_samples=v["n_samples"], latent_dim=v["latent_dim"], dim_video=v["dim_video"],
            dim_audio=v["dim_audio"], dim_text=v["dim_text"], p_mis_text=v["p_mis_text"],
            p_mis_audio=v["p_mis_audio"], noise_std=v["noise_std"],
            neighbor_std=v["neighbor_std"], k_neighbors=v["k_neighbors"],
            seed=derive_seed(v["seed"], "data"),
        )

    @property
    def dims(self) -> ModelDims:
        v = self.values
        return ModelDims(v["dim_video"], v["dim_audio"], v["dim_text"], v["hidden_dim"],
                         v["backbone_layers"], v["emb_dim_va"], v["emb_dim_vt"])

    @property
    def harmonizer(self) -> HarmonizerConfig:
        v = self.values
        total = v["gamma_steps"] or max(v["steps"], 1)
        return HarmonizerConfig(v["mode"], v["w_va"], v["w_vt"],
                                GammaSchedule(v["gamma_start"], v["gamma_end"], total),
                                v["granularity"])

    @property
    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            steps=v["steps"], batch_size=v["batch_size"], learning_rate=v["learning_rate"],
            warmup_steps=v["warmup_steps"], lr_schedule=v["lr_schedule"],
            min_lr_ratio=v["min_lr_ratio"], optimizer=v["optimizer"],
            adam_beta1=v["adam_beta1"], adam_beta2=v["adam_beta2"], adam_eps=v["adam_eps"],
            harmonizer=self.harmonizer, temperature=v["temperature"],
            symmetric=v["symmetric"], seed=derive_seed(v["seed"], "train"),
            log_every=v["log_every"],
        )

    def validate(self) -> "ExperimentConfig":
        """Build every derived config once so bad combinations fail early."""
        self.synth, self.dims, self.train  # noqa: B018
        if not 0 < self.values["eval_fraction"] < 1:
            raise ConfigError("eval_fraction must lie in (0, 1)")
        if not self.values["retrieval_ks"]:
            raise ConfigError("retrieval_ks must list at least one K")
        return self


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values, seen = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {seen[key]})")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        seen[key] = lineno
    for key, (_, default) in SCHEMA.items():
        if key not in values:
            if default is REQUIRED:
                raise ConfigError(f"{source}: missing required key {key!r}")
            values[key] = default
    try:
        return ExperimentConfig(values, text).validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))

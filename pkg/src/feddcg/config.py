"""Run configuration: one flat key-value record with a canonical JSON form.

Defaults follow the reference training recipe: 250 rounds, 18 clients as 6
per domain over 3 domains, 20 classes per client, batch 128, SGD at 1e-3
with cosine annealing, 4-head attention with hidden width 512. Everything
else (temperatures, prompt lengths, beta shapes, stage pattern) is a
documented choice with a sensible small default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError

_AGGREGATORS = ("domain_guided", "average", "uncertainty")


@dataclass
class RunConfig:
    rounds: int = 250
    clients_per_domain: int = 6
    classes_per_client: int = 20
    batch_size: int = 128
    local_epochs: int = 1
    base_lr: float = 1e-3
    min_lr: float = 0.0
    tau: float = 0.07
    tau_w: float = 0.07
    mix: float = 0.5
    participation: float = 1.0
    sampling_rate: float = 1.0
    beta_a: float = 2.0
    beta_b: float = 2.0
    normalized_momentum: bool = False
    l_p: int = 4
    l_g: int = 4
    l_d: int = 4
    d_h: int = 512
    heads: int = 4
    seed: int = 0
    # Seed of the text-encoder stub; None means "same as seed". Evaluating a
    # synthetic store meaningfully requires the stub seed the store was
    # generated with.
    stub_seed: int | None = None
    stage_pattern: str = "AB"
    checkpoint_every: int = 50
    train_store: str | None = None
    eval_store: str | None = None
    out_dir: str | None = None
    aggregator: str = "domain_guided"
    fixed_global_weight: float | None = None

    @property
    def effective_stub_seed(self) -> int:
        return self.seed if self.stub_seed is None else self.stub_seed

    def validate(self) -> None:
        positive_ints = {
            "clients_per_domain": self.clients_per_domain,
            "classes_per_client": self.classes_per_client,
            "batch_size": self.batch_size,
            "l_p": self.l_p,
            "l_g": self.l_g,
            "l_d": self.l_d,
            "d_h": self.d_h,
            "heads": self.heads,
            "checkpoint_every": self.checkpoint_every,
        }
        for name, value in positive_ints.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds and local_epochs must be >= 0")
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ConfigError("need 0 <= min_lr <= base_lr and base_lr > 0")
        if self.tau <= 0 or self.tau_w <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.mix <= 1.0:
            raise ConfigError(f"mix must be in [0, 1], got {self.mix}")
        for name, value in (("participation", self.participation),
                            ("sampling_rate", self.sampling_rate)):
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {value}")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ConfigError("beta shape parameters must be positive")
        if self.d_h % self.heads != 0:
            raise ConfigError(f"d_h={self.d_h} not divisible by heads={self.heads}")
        if not self.stage_pattern or set(self.stage_pattern) - {"A", "B"}:
            raise ConfigError(f"stage_pattern must be a nonempty string over A/B, "
                              f"got {self.stage_pattern!r}")
        if self.aggregator not in _AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {_AGGREGATORS}, "
                              f"got {self.aggregator!r}")
        if self.fixed_global_weight is not None and not 0.0 <= self.fixed_global_weight <= 1.0:
            raise ConfigError("fixed_global_weight must be in [0, 1]")


def parse_config(source: dict | str | Path) -> RunConfig:
    """Build a validated RunConfig from a dict or a JSON file path."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    else:
        raw = dict(source)
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    config = RunConfig(**raw)
    config.validate()
    return config


def serialize_config(config: RunConfig) -> str:
    """Canonical form: sorted keys, two-space indent, trailing newline."""
    return json.dumps(asdict(config), indent=2, sort_keys=True) + "\n"


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(config))

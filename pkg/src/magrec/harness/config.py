"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from magrec.errors import ConfigError
from magrec.graphbuild import REPRESENTATIONS
from magrec.model import MagrecConfig, _coerce


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunConfig:
    # data source: exactly one of data_dir, log_path, synthetic
    data_dir: str | None = None
    log_path: str | None = None
    synthetic: bool = False
    synthetic_users: int = 200
    synthetic_items: int = 50
    synthetic_domains: int = 2
    cross_domain_strength: float = 0.5
    events_min: int = 20
    events_max: int = 40
    synthetic_topics: int = 5
    synthetic_static: float = 0.2
    synthetic_noise: float = 0.1
    data_seed: int = 0
    representation: str = "interacting"
    epochs: int = 30
    patience: int = 3
    seed: int = 0
    eval_workers: int = 1
    model: MagrecConfig = field(default_factory=MagrecConfig)

    def validate(self) -> None:
        sources = sum([self.data_dir is not None, self.log_path is not None, bool(self.synthetic)])
        if sources != 1:
            raise ConfigError("exactly one data source is required: data_dir, log_path or synthetic")
        if self.representation not in REPRESENTATIONS:
            raise ConfigError(f"representation must be one of {', '.join(REPRESENTATIONS)}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0 (0 disables early stopping)")
        if not 0.0 <= self.cross_domain_strength <= 1.0:
            raise ConfigError("cross_domain_strength must lie in [0, 1]")
        if self.events_min < 1 or self.events_max < self.events_min:
            raise ConfigError("need 1 <= events_min <= events_max")
        if self.synthetic_topics < 1:
            raise ConfigError("synthetic_topics must be >= 1")
        if not (0.0 <= self.synthetic_static <= 1.0 and 0.0 <= self.synthetic_noise <= 1.0):
            raise ConfigError("synthetic_static and synthetic_noise must lie in [0, 1]")
        self.model.validate()

    def replace(self, **changes) -> "RunConfig":
        model_keys = {f.name for f in fields(MagrecConfig)}
        model_changes = {k: v for k, v in changes.items() if k in model_keys}
        run_changes = {k: v for k, v in changes.items() if k not in model_keys}
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **model_changes), **run_changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "model":
                continue
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n" + self.model.to_text()

    @classmethod
    def from_mapping(cls, mapping: dict[str, object]) -> "RunConfig":
        model_keys = {f.name for f in fields(MagrecConfig)}
        run_keys = {f.name for f in fields(cls)} - {"model"}
        unknown = set(mapping) - model_keys - run_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        defaults = cls()
        kwargs = {}
        for key in run_keys & set(mapping):
            default = getattr(defaults, key)
            raw = mapping[key]
            if default is None:
                kwargs[key] = None if raw in (None, "") else str(raw)
            else:
                kwargs[key] = _coerce(key, raw, default)
        model = MagrecConfig.from_mapping({k: v for k, v in mapping.items() if k in model_keys})
        run = cls(model=model, **kwargs)
        return run


def load_run_config(path: str | Path | None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Read a config file (optional) and apply overrides; overrides win."""
    mapping: dict[str, object] = {}
    if path is not None:
        try:
            mapping.update(parse_kv_text(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    mapping.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_mapping(mapping)

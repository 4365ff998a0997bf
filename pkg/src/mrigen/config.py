"""Run configuration files: ``key = value`` lines, ``#`` comments.

Precedence when resolving a run: command-line flag > config file > default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import InvalidInput
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    learning_rate: float = 1e-4
    max_steps: int = 1000
    batch_size: int = 1
    grad_accum_steps: int = 1
    lr_schedule: str = "cosine"
    seed: int | None = None
    cond_dropout_prob: float = 0.1
    lambda_prior: float = 1.0
    guidance_scale: float = 1.0
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    precision: str = "single"

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, max_steps=self.max_steps,
            batch_size=self.batch_size, grad_accum_steps=self.grad_accum_steps,
            lr_schedule=self.lr_schedule, seed=self.seed or 0,
            cond_dropout_prob=self.cond_dropout_prob, precision=self.precision, **overrides)

    def merged(self, **values) -> "RunConfig":
        """Copy with every non-None entry of ``values`` applied."""
        return replace(self, **{k: v for k, v in values.items() if v is not None})

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items() if v is not None)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, text):
    kind = _TYPES[key]
    try:
        if kind.startswith("int"):
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise InvalidInput(f"config key {key}: cannot parse {text!r}") from None
    return text


def parse_config(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInput(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise InvalidInput(f"config line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig(**parse_config(Path(path).read_text()))

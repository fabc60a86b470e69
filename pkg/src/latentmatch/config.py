"""Flat ``section.key=value`` run configuration.

Precedence is flag > file > default. Every key is typed by the schema
below; unknown keys and unparsable values raise ``ConfigError`` naming the
key.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .encoder import LossWeights, TrainConfig
from .history import HistoryConfig, concept_set
from .synthgen import DgpConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _auto(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.strip().lower() in ("auto", "none", "") else parse(text)
    return inner


def _dgp_schema() -> dict[str, tuple[Any, Callable]]:
    out = {}
    for name, value in DgpConfig().to_dict().items():
        kind = type(value)
        out[f"dgp.{name}"] = (value, int if kind is int else float)
    return out


SCHEMA: dict[str, tuple[Any, Callable[[str], Any]]] = {
    **_dgp_schema(),
    "split.fractions": ((0.7, 0.1, 0.2), _floats),
    "history.lookback_days": (180, int),
    "history.scales": (None, _auto(_ints)),
    "history.concepts": ("ALL", str),
    "history.dump_text": (False, _bool),
    "encoder.embed_dim": (256, int),
    "encoder.hidden": (64, int),
    "encoder.latent_dim": (16, int),
    "encoder.lr": (TrainConfig().lr, float),
    "encoder.disc_lr": (TrainConfig().disc_lr, float),
    "encoder.epochs": (TrainConfig().epochs, int),
    "encoder.batch_size": (TrainConfig().batch_size, int),
    "encoder.disc_steps": (TrainConfig().disc_steps, int),
    "encoder.clip_norm": (TrainConfig().clip_norm, float),
    "encoder.lam": (LossWeights().lam, float),
    "encoder.beta": (LossWeights().beta, float),
    "encoder.alpha": (LossWeights().alpha, float),
    "lsh.tables": (12, int),
    "lsh.hashes": (8, int),
    "lsh.width": (None, _auto(float)),
    "lsh.k": (None, _auto(int)),
    "lsh.mode": ("unrestricted", str),
    "lsh.candidate_cap": (None, _auto(int)),
    "lsh.fallback": (True, _bool),
    "estimator.delta_clip": (0.01, float),
    "estimator.ridge": (1e-3, float),
    "estimator.local_propensity": (False, _bool),
    "estimator.propensity_iterations": (300, int),
    "eval.phenotypes": (3, int),
    "eval.svg": (True, _bool),
    "run.seed": (0, int),
    "run.outdir": ("runs", str),
    "run.id": (None, _auto(str)),
    "run.threads": (1, int),
}

# keys that do not change any artifact content
_VOLATILE = ("run.outdir", "run.id", "run.threads")


def _render(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: d for k, (d, _) in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, text: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown configuration key")
        try:
            self.values[key] = SCHEMA[key][1](text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def update(self, pairs: dict[str, Any]) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, v if isinstance(v, str) else _render(v))
        return self

    def copy(self, **overrides: Any) -> "RunConfig":
        """Copy with ``section__key`` style overrides."""
        out = RunConfig(dict(self.values))
        return out.update({k.replace("__", "."): v for k, v in overrides.items()})

    def lines(self) -> list[str]:
        return [f"{k}={_render(self.values[k])}" for k in sorted(self.values)]

    def config_hash(self) -> str:
        body = "\n".join(l for l in self.lines() if l.split("=", 1)[0] not in _VOLATILE)
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def run_id(self) -> str:
        return self.values["run.id"] or f"run-{self.config_hash()[:12]}"

    def run_dir(self) -> Path:
        return Path(self.values["run.outdir"]) / self.run_id()

    # --- typed views -----------------------------------------------------------

    def dgp(self) -> DgpConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("dgp.")}
        cfg = DgpConfig(**kw)
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def fractions(self) -> tuple[float, float, float]:
        fr = self.values["split.fractions"]
        if len(fr) != 3 or any(not math.isfinite(f) or f <= 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise ConfigError(f"split.fractions: need three positive fractions summing to 1, got {_render(fr)}")
        return fr

    def history(self) -> HistoryConfig:
        try:
            cs = concept_set(self.values["history.concepts"])
        except KeyError as exc:
            raise ConfigError(f"history.concepts: {exc.args[0]}") from None
        lb = self.values["history.lookback_days"]
        horizon = self.dgp().horizon_days()
        if lb > horizon:
            raise ConfigError(f"history.lookback_days: {lb} exceeds the generated horizon of {horizon} days")
        try:
            if self.values["history.scales"] is None:
                return HistoryConfig.for_lookback(lb, cs)
            return HistoryConfig(lb, self.values["history.scales"], cs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train(self) -> TrainConfig:
        try:
            return TrainConfig(lr=self["encoder.lr"], disc_lr=self["encoder.disc_lr"], epochs=self["encoder.epochs"],
                               batch_size=self["encoder.batch_size"], seed=self["run.seed"],
                               disc_steps=self["encoder.disc_steps"], clip_norm=self["encoder.clip_norm"])
        except ValueError as exc:
            raise ConfigError(f"encoder: {exc}") from None

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(self["encoder.lam"], self["encoder.beta"], self["encoder.alpha"])
        except ValueError as exc:
            raise ConfigError(f"encoder: {exc}") from None

    def k_for(self, n_units: int) -> int:
        k = self.values["lsh.k"]
        return k if k is not None else int(math.ceil(n_units ** 0.6))

    def validate(self) -> None:
        self.dgp()
        self.fractions()
        self.history()
        self.train()
        self.loss_weights()
        for key in ("lsh.tables", "lsh.hashes", "eval.phenotypes", "run.threads", "encoder.embed_dim",
                    "encoder.hidden", "encoder.latent_dim"):
            if self.values[key] < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.values["lsh.mode"] not in ("unrestricted", "action_stratified"):
            raise ConfigError("lsh.mode: must be unrestricted or action_stratified")
        w = self.values["lsh.width"]
        if w is not None and not w > 0:
            raise ConfigError("lsh.width: must be > 0")
        k = self.values["lsh.k"]
        if k is not None and k < 1:
            raise ConfigError("lsh.k: must be >= 1")
        if not 0 <= self.values["estimator.delta_clip"] < 0.5:
            raise ConfigError("estimator.delta_clip: must lie in [0, 0.5)")
        if not self.values["estimator.ridge"] > 0:
            raise ConfigError("estimator.ridge: must be > 0")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        cfg.update(parse_text(p.read_text(), str(p)))
    if overrides:
        cfg.update(overrides)
    return cfg


def write_config(cfg: RunConfig, path: str | Path) -> None:
    """Write the hashed keys only, so run contents do not depend on where they were written."""
    lines = [l for l in cfg.lines() if l.split("=", 1)[0] not in _VOLATILE]
    Path(path).write_text("\n".join(lines) + "\n")

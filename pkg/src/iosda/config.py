"""Flat ``key=value`` run configuration with dotted namespaces.

Every key has a type and a default; unknown keys are rejected.  The defaults
describe a desk-scale synthetic run (small GAN and adapter widths) that
finishes in about a minute on one core; :func:`full_scale` returns the
overrides for the full-width networks.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from . import mdcgan, meosda
from .datahub import DomainDataset, SynthSpec, gen_synthetic, load_features
from .errors import ConfigError
from .timeline import TimelineConfig

SEED_ENV = "IOSDA_SEED"


def _ints(s: str) -> tuple[int, ...]:
    parts = [p for p in s.replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _paths(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _format(s: str) -> str:
    if s not in ("auto", "csv", "bin"):
        raise ValueError("format is one of auto, csv, bin")
    return s


def _verbosity(s: str) -> str:
    if s not in ("quiet", "info", "debug"):
        raise ValueError("verbosity is one of quiet, info, debug")
    return s


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: str
    doc: str


KEYS: dict[str, Key] = {
    "seed": Key(int, "0", f"seed for splits, replay, adaptation and GAN training (fallback: ${SEED_ENV})"),
    "out_dir": Key(str, "runs/default", "run directory"),
    "verbosity": Key(_verbosity, "info", "quiet, info or debug"),
    "data.paths": Key(_paths, "", "comma-separated feature files in stream order; empty means synthetic"),
    "data.format": Key(_format, "auto", "csv, bin or auto (by extension)"),
    "synth.domains": Key(int, "3", "number of synthetic domains"),
    "synth.feat_dim": Key(int, "16", "synthetic feature width"),
    "synth.open_per_domain": Key(int, "2", "open clusters per target domain"),
    "synth.samples_per_class": Key(int, "200", "samples per class and domain"),
    "synth.shift": Key(float, "1.5", "per-domain mean shift length"),
    "synth.std": Key(float, "0.5", "isotropic cluster std"),
    "synth.class_sep": Key(float, "6.0", "radius of the class-mean sphere"),
    "synth.seed": Key(int, "0", "seed of the synthetic data"),
    "timeline.n_known": Key(int, "4", "number of known classes K"),
    "timeline.threshold": Key(float, "0.95", "pseudo-label probability threshold"),
    "timeline.replay_per_class": Key(int, "100", "generated samples per class and past domain"),
    "timeline.holdout_frac": Key(float, "0.2", "evaluation share of each target domain"),
    "gan.z_dim": Key(int, "64", "generator noise width"),
    "gan.d_dim": Key(int, "3", "bits of the domain code"),
    "gan.gen_hidden": Key(_ints, "128,128", "generator hidden widths"),
    "gan.disc_hidden": Key(_ints, "128,128,128", "discriminator trunk widths"),
    "gan.slope": Key(float, "0.01", "leaky-ReLU slope"),
    "gan.lr": Key(float, "0.001", "Adam learning rate"),
    "gan.beta1": Key(float, "0.5", "Adam beta1"),
    "gan.beta2": Key(float, "0.9", "Adam beta2"),
    "gan.batch_size": Key(int, "64", "minibatch size"),
    "gan.epochs": Key(int, "200", "epochs per GAN"),
    "gan.replay_open_class": Key(_bool, "1", "train and replay the open class"),
    "meosda.extractor_dims": Key(_ints, "256,128", "extractor widths"),
    "meosda.head_hidden": Key(int, "128", "hidden width of each head"),
    "meosda.batch_norm": Key(_bool, "1", "batch norm in extractor and head hidden layers"),
    "meosda.slope": Key(float, "0.01", "leaky-ReLU slope"),
    "meosda.lr": Key(float, "0.001", "Adam learning rate"),
    "meosda.beta1": Key(float, "0.5", "Adam beta1"),
    "meosda.beta2": Key(float, "0.9", "Adam beta2"),
    "meosda.batch_size": Key(int, "64", "batch size per source and for the target"),
    "meosda.epochs": Key(int, "30", "adaptation epochs per timestamp"),
    "meosda.t_boundary": Key(float, "0.5", "open-probability target of the boundary loss"),
    "meosda.grl_lambda": Key(float, "1.0", "gradient-reversal strength"),
    "meosda.adv_weight": Key(float, "1.0", "weight of the boundary loss"),
}


def full_scale() -> dict[str, str]:
    """Overrides that restore the full network widths."""
    return {
        "gan.z_dim": "2000",
        "gan.gen_hidden": "1024,1024",
        "gan.disc_hidden": "1024,1024,1024",
        "meosda.extractor_dims": "1024,512",
        "meosda.head_hidden": "256",
    }


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Validated values for every key in :data:`KEYS`."""

    def __init__(self, raw: Mapping[str, str] | None = None):
        raw = dict(raw or {})
        unknown = sorted(set(raw) - set(KEYS))
        if unknown:
            raise ConfigError("unknown config key(s): " + ", ".join(unknown))
        self.raw = {k: raw.get(k, key.default) for k, key in KEYS.items()}
        self.values = {}
        for k, key in KEYS.items():
            try:
                self.values[k] = key.parse(self.raw[k])
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {self.raw[k]!r} ({exc})") from None
        try:
            self.timeline_config()
            if not self.values["data.paths"]:
                self.synth_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.values["data.paths"] and self.values["synth.domains"] < 2:
            raise ConfigError("synth.domains must be >= 2")

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Mapping[str, str] | None = None,
             seed: int | None = None, env: Mapping[str, str] | None = None) -> RunConfig:
        """File values, then ``overrides``, then ``seed``.

        The seed falls back to ``$IOSDA_SEED`` when neither the file, the
        overrides nor ``seed`` set it.
        """
        raw: dict[str, str] = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            raw.update(parse_text(p.read_text(), str(p)))
        raw.update(overrides or {})
        env = os.environ if env is None else env
        if seed is not None:
            raw["seed"] = str(seed)
        elif "seed" not in raw and env.get(SEED_ENV):
            raw["seed"] = env[SEED_ENV]
        return cls(raw)

    def with_values(self, changes: Mapping[str, object]) -> RunConfig:
        raw = dict(self.raw)
        raw.update({k: str(v) for k, v in changes.items()})
        return RunConfig(raw)

    def to_text(self) -> str:
        return "".join(f"{k}={self.raw[k]}\n" for k in KEYS)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def _section(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def gan_config(self) -> mdcgan.GanConfig:
        return mdcgan.GanConfig(**self._section("gan."))

    def meosda_config(self) -> meosda.MeosdaConfig:
        return meosda.MeosdaConfig(**self._section("meosda."))

    def timeline_config(self) -> TimelineConfig:
        return TimelineConfig(seed=self.values["seed"], gan=self.gan_config(), meosda=self.meosda_config(),
                              **self._section("timeline."))

    def synth_spec(self) -> SynthSpec:
        s = self._section("synth.")
        s.pop("domains")
        return SynthSpec(n_known=self.values["timeline.n_known"], **s)

    def domains(self) -> list[DomainDataset]:
        paths = self.values["data.paths"]
        if not paths:
            return gen_synthetic(self.synth_spec(), self.values["synth.domains"])
        fmt = None if self.values["data.format"] == "auto" else self.values["data.format"]
        return [load_features(p, fmt) for p in paths]

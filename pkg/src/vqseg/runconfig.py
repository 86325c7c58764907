"""Plain-text ``key=value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment.  Every key has a typed
default, and unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError
from .perturb import DomainParams, PerturbationSpec
from .segnet import AdamConfig, ModelConfig
from .synthdata import CorpusSpec


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_str(text: str) -> str | None:
    return None if text.strip().lower() in ("", "none") else text.strip()


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _strs(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _fmt(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_M, _O, _C = ModelConfig(), AdamConfig(), CorpusSpec()

SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "out_dir": (str, "runs/default"),
    "checkpoint": (_strs, []),
    "data.dir": (str, "data"),
    "data.n_train": (int, _C.n_train),
    "data.n_val": (int, _C.n_val),
    "data.n_test": (int, _C.n_test),
    "data.image_size": (int, _C.image_size),
    "data.domains": (_strs, ["A"]),
    "model.levels": (int, _M.levels),
    "model.base_channels": (int, _M.base_channels),
    "model.in_channels": (int, _M.in_channels),
    "model.num_classes": (int, _M.num_classes),
    "model.skip_connections": (_bool, _M.skip_connections),
    "model.vq_enabled": (_bool, _M.vq_enabled),
    "model.K": (int, _M.K),
    "model.D": (_opt_str, None),
    "model.beta": (float, _M.beta),
    "model.groups": (int, _M.groups),
    "model.unit_sphere": (_bool, _M.unit_sphere),
    "optim.lr": (float, 1e-3),
    "optim.beta1": (float, _O.beta1),
    "optim.beta2": (float, _O.beta2),
    "optim.eps": (float, _O.eps),
    "optim.weight_decay": (float, _O.weight_decay),
    "optim.decoupled": (_bool, _O.decoupled),
    "train.epochs": (int, 200),
    "train.batch_size": (int, 8),
    "train.augment": (_bool, True),
    "train.reseed_dead": (_bool, False),
    "train.eval_every": (int, 5),
    "train.target_dice": (_opt_float, None),
    "train.resume": (_opt_str, None),
    "eval.split": (str, "val"),
    "eval.domain": (str, "A"),
    "eval.spacing": (float, 1.0),
    "eval.n_images": (int, 0),
    "perturb.kinds": (_strs, ["gaussian"]),
    "perturb.levels": (_floats, [0.0, 0.01, 0.1, 0.2, 0.3]),
    "perturb.seed": (_opt_str, None),
    "perturb.draws": (int, 100),
    "perturb.n_images": (int, 10),
    "perturb.which": (_strs, ["pre", "post"]),
    "domain.gamma": (float, DomainParams().gamma),
    "domain.contrast": (float, DomainParams().contrast),
    "domain.bias_amp": (float, DomainParams().bias_amp),
    "bound.h": (float, 1e-2),
    "bound.level": (float, 0.1),
    "bound.n_images": (int, 4),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, text: str) -> None:
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parse, _ = SCHEMA[key]
        try:
            self.values[key] = parse(text.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    def update_from_text(self, text: str, source: str = "<config>") -> None:
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            self.set(key, value)

    @classmethod
    def load(cls, path: Path | str | None = None, overrides: list[str] = ()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            cfg.update_from_text(p.read_text(), str(p))
        cfg.update_from_text("\n".join(overrides), "<command line>")
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA)

    # -- typed views -----------------------------------------------------
    def model_config(self) -> ModelConfig:
        v = self.values
        cfg = ModelConfig(
            levels=v["model.levels"],
            base_channels=v["model.base_channels"],
            in_channels=v["model.in_channels"],
            num_classes=v["model.num_classes"],
            skip_connections=v["model.skip_connections"],
            vq_enabled=v["model.vq_enabled"],
            K=v["model.K"],
            beta=v["model.beta"],
            groups=v["model.groups"],
            seed=v["seed"],
            unit_sphere=v["model.unit_sphere"],
        )
        d = v["model.D"]
        if d is None or d == "auto":
            cfg.D = cfg.bottleneck_channels
        else:
            try:
                cfg.D = int(d)
            except ValueError as exc:
                raise ConfigError(f"model.D must be an integer or 'auto', got {d!r}") from exc
        cfg.validate()
        return cfg

    def adam_config(self) -> AdamConfig:
        v = self.values
        return AdamConfig(
            lr=v["optim.lr"], beta1=v["optim.beta1"], beta2=v["optim.beta2"], eps=v["optim.eps"],
            weight_decay=v["optim.weight_decay"], decoupled=v["optim.decoupled"],
        )

    def corpus_spec(self, domain: str = "A") -> CorpusSpec:
        v = self.values
        spec = CorpusSpec(v["data.n_train"], v["data.n_val"], v["data.n_test"], v["data.image_size"],
                          3, domain, v["seed"])
        spec.validate()
        return spec

    def noise_seed(self) -> int:
        s = self.values["perturb.seed"]
        try:
            return self.values["seed"] if s is None else int(s)
        except ValueError as exc:
            raise ConfigError(f"perturb.seed must be an integer, got {s!r}") from exc

    def domain_params(self) -> DomainParams:
        v = self.values
        return DomainParams(v["domain.gamma"], v["domain.contrast"], v["domain.bias_amp"])

    def perturbation(self, kind: str, level: float) -> PerturbationSpec:
        return PerturbationSpec(kind, level, self.noise_seed(), self.domain_params())

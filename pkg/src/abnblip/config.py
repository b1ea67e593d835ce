"""Flat ``key = value`` configuration with typed defaults.

Every key has a default; a config file and ``--set key=value`` overrides may
only name known keys.  Values are parsed by the type of their default.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .encoder import EncoderConfig
from .objectives import SmoothingSpec
from .qformer import QFormerConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (default, kind); kinds: int, float, bool, str, ints, floats
SCHEMA: dict[str, tuple[object, str]] = {
    "seed": (0, "int"),
    "data.n": (2000, "int"),
    "data.extents": ((32, 32, 20), "ints"),
    "data.noise": (60.0, "float"),
    "data.split": ((0.7, 0.1, 0.2), "floats"),
    "encoder.widths": ((4, 8, 16, 32, 64), "ints"),
    "encoder.patch": ((2, 2, 2), "ints"),
    "encoder.d_v": (32, "int"),
    "encoder.use_multiscale": (True, "bool"),
    "encoder.use_fcls": (True, "bool"),
    "qformer.d": (32, "int"),
    "qformer.layers": (2, "int"),
    "qformer.heads": (4, "int"),
    "qformer.ffn": (64, "int"),
    "qformer.d_p": (16, "int"),
    "qformer.max_len": (12, "int"),
    "loss.tau": (0.07, "float"),
    "loss.label_smoothing": (0.1, "float"),
    "loss.acl_soft_weights": (True, "bool"),
    "loss.reduction": ("sum", "str"),
    "train.batch": (8, "int"),
    "train.stage1_lr": (1e-3, "float"),
    "train.stage1_epochs": (10, "int"),
    "train.stage2_lr": (2e-3, "float"),
    "train.stage2_epochs": (8, "int"),
    "train.beta1": (0.9, "float"),
    "train.beta2": (0.999, "float"),
    "train.eps": (1e-8, "float"),
    "train.weight_decay": (0.01, "float"),
    "train.lambda_acl": (1.0, "float"),
    "train.lambda_atg": (1.0, "float"),
    "train.ckpt_every": (0, "int"),
    "report.threshold": (0.5, "float"),
    "report.condition_scope": ("all", "str"),
    "report.split": ("test", "str"),
    "report.batch": (16, "int"),
    "eval.split": ("test", "str"),
    "eval.pooled_regions": (False, "bool"),
    "check.eps": (1e-6, "float"),
    "check.tol": (1e-4, "float"),
    "check.samples": (4, "int"),
    "check.floor": (1e-6, "float"),
    "check.n_cases": (2, "int"),
    "ablate.stage2_epochs": (6, "int"),
    "ablate.n_train": (0, "int"),
}

CHOICES = {
    "loss.reduction": ("mean", "sum"),
    "report.condition_scope": ("all", "single"),
    "report.split": ("train", "val", "test"),
    "eval.split": ("train", "val", "test"),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse(key: str, raw: str):
    kind = SCHEMA[key][1]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(x) for x in raw.replace(" ", "").split(","))
        if kind == "floats":
            return tuple(float(x) for x in raw.replace(" ", "").split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class Config:
    values: dict

    @classmethod
    def default(cls) -> "Config":
        return cls({k: v for k, (v, _) in SCHEMA.items()})

    @classmethod
    def load(cls, path=None, overrides=()) -> "Config":
        cfg = cls.default()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            cfg.update_from_text(p.read_text(encoding="utf-8"), origin=str(p))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            cfg.set(key.strip(), raw)
        cfg.validate()
        return cfg

    def update_from_text(self, text: str, origin: str = "<text>") -> None:
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            self.set(key.strip(), raw)

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, raw) if isinstance(raw, str) else raw

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        for key, allowed in CHOICES.items():
            if self.values[key] not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {self.values[key]!r}")
        for key in ("data.extents", "encoder.patch"):
            if len(self.values[key]) != 3:
                raise ConfigError(f"{key} needs three integers")
        if len(self.values["data.split"]) != 3:
            raise ConfigError("data.split needs three fractions")
        try:
            self.encoder()
            self.qformer(95)
            self.train(1)
            self.train(2)
            self.smoothing(95)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def text(self) -> str:
        """The fully resolved configuration, one sorted ``key = value`` per line."""
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:12]

    # -------------------------------------------------------------- views

    def encoder(self, **changes) -> EncoderConfig:
        v = self.values
        kw = dict(
            widths=v["encoder.widths"],
            patch=v["encoder.patch"],
            d_v=v["encoder.d_v"],
            use_multiscale=v["encoder.use_multiscale"],
            use_fcls=v["encoder.use_fcls"],
        )
        kw.update(changes)
        return EncoderConfig(**kw)

    def qformer(self, vocab_size: int) -> QFormerConfig:
        v = self.values
        return QFormerConfig(
            d=v["qformer.d"],
            layers=v["qformer.layers"],
            heads=v["qformer.heads"],
            ffn=v["qformer.ffn"],
            d_p=v["qformer.d_p"],
            d_v=v["encoder.d_v"],
            vocab_size=vocab_size,
            max_len=v["qformer.max_len"],
        )

    def train(self, stage: int) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr=v[f"train.stage{stage}_lr"],
            batch=v["train.batch"],
            epochs=v[f"train.stage{stage}_epochs"],
            seed=v["seed"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            eps=v["train.eps"],
            weight_decay=v["train.weight_decay"],
            lambda_acl=v["train.lambda_acl"],
            lambda_atg=v["train.lambda_atg"],
            ckpt_every=v["train.ckpt_every"],
            tau=v["loss.tau"],
            label_smoothing=v["loss.label_smoothing"],
            acl_soft_weights=v["loss.acl_soft_weights"],
            reduction=v["loss.reduction"],
            condition_scope=v["report.condition_scope"],
        )

    def smoothing(self, vocab_size: int) -> SmoothingSpec:
        return SmoothingSpec(self.values["loss.label_smoothing"], vocab_size)

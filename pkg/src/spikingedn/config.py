"""Sectioned ``key = value`` run configuration with command-line overrides."""

from __future__ import annotations

import configparser
import io
from pathlib import Path
from typing import Iterable

from .network import ConfigError

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "precision": "float32"},
    "data": {
        "dir": "", "scenes": "60", "size": "64", "num_classes": "3", "stacks_per_scene": "16",
        "seq_len": "4", "warmup": "1", "n_frames": "5", "delta_t_us": "50000", "test_fraction": "0.2",
        "aug": "image", "max_shapes": "2",
    },
    "model": {
        "genotype": "", "levels": "0,1,1", "op": "conv3x3", "plan": "2,2,2,2",
        "stem_channels": "16", "node_width": "8", "aspp_channels": "8", "aspp_rates": "2,4,6",
        "decoder_channels": "16", "placement": "first", "u_th": "0.5", "tau": "0.2", "beta": "0.07",
        "tau_a": "0.3", "tau_a_range": "0.2,0.4", "surrogate": "triangle", "surrogate_temp": "1.0",
        "ssam": "none", "ssam_multiplicative": "false",
    },
    "train": {
        "epochs": "20", "batch_size": "8", "lr": "0.01", "poly_power": "0.9", "weight_decay": "0",
        "grad_clip": "none", "eval_every": "5",
    },
    "search": {
        "epochs": "20", "warmup_epochs": "5", "layers": "3", "levels": "3", "batch_size": "4",
        "w_lr": "0.003", "a_lr": "0.01", "scenes": "6", "size": "32",
    },
    "eval": {"checkpoint": "", "batch_size": "8"},
    "stream": {"checkpoint": "", "reset_every": "4", "dump": "true"},
    "count_ops": {"checkpoint": "", "batch_size": "8", "fold": "true"},
}


class RunConfig:
    """Typed view over a :class:`configparser.ConfigParser` seeded with :data:`DEFAULTS`."""

    def __init__(self) -> None:
        self.cp = configparser.ConfigParser(interpolation=None)
        self.cp.read_dict(DEFAULTS)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Iterable[str] = ()) -> "RunConfig":
        cfg = cls()
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {p} does not exist")
            try:
                cfg.cp.read_string(p.read_text(), source=str(p))
            except configparser.Error as exc:
                raise ConfigError(f"{p}: {exc}".replace("\n", " ")) from None
        for item in overrides:
            cfg.set_override(item)
        cfg.check_known()
        return cfg

    def set_override(self, item: str) -> None:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not self.cp.has_section(section):
            raise ConfigError(f"unknown config section {section!r}")
        self.cp.set(section, name, value.strip())

    def check_known(self) -> None:
        for section in self.cp.sections():
            known = DEFAULTS.get(section)
            if known is None:
                raise ConfigError(f"unknown config section [{section}]")
            for key in self.cp[section]:
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")

    def get(self, section: str, key: str) -> str:
        return self.cp.get(section, key)

    def text(self, section: str, key: str) -> str | None:
        v = self.get(section, key).strip()
        return None if v.lower() in ("", "none") else v

    def int(self, section: str, key: str) -> int:
        try:
            return self.cp.getint(section, key)
        except ValueError:
            raise ConfigError(f"{section}.{key} must be an integer, got {self.get(section, key)!r}") from None

    def float(self, section: str, key: str) -> float:
        try:
            return self.cp.getfloat(section, key)
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a number, got {self.get(section, key)!r}") from None

    def opt_float(self, section: str, key: str) -> float | None:
        return None if self.text(section, key) is None else self.float(section, key)

    def bool(self, section: str, key: str) -> bool:
        try:
            return self.cp.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"{section}.{key} must be true/false, got {self.get(section, key)!r}") from None

    def ints(self, section: str, key: str) -> tuple[int, ...]:
        try:
            return tuple(int(v) for v in self.get(section, key).split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{section}.{key} must be comma-separated integers") from None

    def floats(self, section: str, key: str) -> tuple[float, ...]:
        try:
            return tuple(float(v) for v in self.get(section, key).split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{section}.{key} must be comma-separated numbers") from None

    def to_text(self) -> str:
        buf = io.StringIO()
        self.cp.write(buf)
        return buf.getvalue()

"""Experiment configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from aplnet.layers import ACTIVATION_KINDS, ConfigError, NetworkSpec, mlp_spec, small_convnet_spec
from aplnet.optim import TrainConfig

PRECISIONS = {"float64", "float32"}
SHARING = {"shared", "per_neuron"}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one training run or sweep.

    ``arch`` is ``mlp:<w0>-<w1>-...``, ``convnet`` or ``file:<path>`` (a
    network description; its activation layers are replaced by ``activation``).
    Repetition ``r`` uses seed ``seed + r`` for initialisation, data order,
    dropout and the validation split alike.
    """

    manifest: str = ""
    out_dir: str = "runs"
    arch: str = "mlp:784-128-128-10"
    activation: str = "relu"
    S: int = 1
    k: float = 0.01
    K: int = 2
    sharing: str = "shared"
    frozen: bool = False
    dropout: float = 0.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    apl_penalty: float = 0.001
    batch_size: int = 64
    epochs: int = 10
    lr_schedule: str = ""
    seed: int = 0
    repetitions: int = 1
    val_fraction: float = 0.1
    mean_subtract: bool = True
    augment_pad: int = 0
    precision: str = "float64"
    workers: int = 1

    # -- derived views ---------------------------------------------------------------------

    def activation_options(self) -> dict[str, Any]:
        if self.activation == "apl":
            return {"kind": "apl", "S": self.S, "sharing": self.sharing}
        if self.activation == "leaky_relu":
            return {"kind": "leaky_relu", "k": self.k}
        if self.activation == "maxout":
            return {"kind": "maxout", "K": self.K}
        return {"kind": self.activation}

    def parsed_schedule(self) -> list[tuple[int, float]] | None:
        if not self.lr_schedule.strip():
            return None
        pairs = []
        for item in self.lr_schedule.split():
            epoch, _, mult = item.partition(":")
            pairs.append((int(epoch), float(mult)))
        return pairs

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                           apl_penalty=self.apl_penalty, batch_size=self.batch_size,
                           epochs=self.epochs, lr_schedule=self.parsed_schedule(), seed=seed)

    def network_spec(self, input_shape: tuple[int, ...]) -> NetworkSpec:
        act = self.activation_options()
        if self.arch.startswith("mlp:"):
            sizes = [int(w) for w in self.arch[4:].split("-")]
            return mlp_spec(sizes, act, self.dropout)
        if self.arch == "convnet":
            return small_convnet_spec(input_shape, act, fc_dropout=self.dropout)
        if self.arch.startswith("file:"):
            return NetworkSpec.from_text(Path(self.arch[5:]).read_text()).with_activation(act)
        raise ConfigError(f"unknown arch {self.arch!r}")

    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repetitions)]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- validation ----------------------------------------------------------------------------

    def errors(self) -> list[str]:
        errs = []
        if not self.manifest:
            errs.append("manifest is required")
        elif not Path(self.manifest).is_file():
            errs.append(f"manifest not found: {self.manifest}")
        if self.activation not in ACTIVATION_KINDS:
            errs.append(f"activation must be one of {', '.join(ACTIVATION_KINDS)}, got {self.activation!r}")
        if self.frozen and self.activation != "apl":
            errs.append("frozen is only valid with activation = apl")
        if self.S < 0:
            errs.append(f"S must be >= 0, got {self.S}")
        if self.K < 1:
            errs.append(f"K must be >= 1, got {self.K}")
        if self.sharing not in SHARING:
            errs.append(f"sharing must be shared or per_neuron, got {self.sharing!r}")
        if self.repetitions < 1:
            errs.append(f"repetitions must be >= 1, got {self.repetitions}")
        if not 0.0 <= self.dropout < 1.0:
            errs.append(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.val_fraction < 1.0:
            errs.append(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.augment_pad < 0:
            errs.append(f"augment_pad must be >= 0, got {self.augment_pad}")
        if self.precision not in PRECISIONS:
            errs.append(f"precision must be float64 or float32, got {self.precision!r}")
        if self.workers < 1:
            errs.append(f"workers must be >= 1, got {self.workers}")
        arch_ok = (self.arch == "convnet" or self.arch.startswith("file:")
                   or (self.arch.startswith("mlp:") and _valid_widths(self.arch[4:])))
        if not arch_ok:
            errs.append(f"arch must be mlp:<w0>-...-<wn>, convnet or file:<path>, got {self.arch!r}")
        elif self.arch.startswith("file:") and not Path(self.arch[5:]).is_file():
            errs.append(f"network description not found: {self.arch[5:]}")
        try:
            schedule = self.parsed_schedule()
        except ValueError:
            errs.append(f"lr_schedule must be 'epoch:multiplier ...', got {self.lr_schedule!r}")
            schedule = None
        tc = self.train_config(self.seed) if schedule is not None or not self.lr_schedule.strip() else None
        if tc is not None:
            errs.extend(tc.validate())
        return errs

    def validate(self) -> "ExperimentConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errs))
        return self

    # -- text form -------------------------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "ExperimentConfig":
        """Build from strings or native values; all bad keys/values are reported together."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs, errs = {}, []
        for key, raw in values.items():
            if key not in types:
                errs.append(f"unknown key {key!r}")
                continue
            try:
                kwargs[key] = _convert(raw, types[key])
            except ValueError:
                errs.append(f"{key}: cannot parse {raw!r} as {types[key]}")
        if errs:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errs))
        return cls(**kwargs)


def _valid_widths(text: str) -> bool:
    parts = text.split("-")
    return len(parts) >= 2 and all(p.isdigit() and int(p) > 0 for p in parts)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _convert(raw, typename: str):
    if not isinstance(raw, str):
        return raw
    if typename == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if typename == "int":
        return int(raw)
    if typename == "float":
        return float(raw)
    return raw.strip()


def read_config_file(path, _seen: tuple[Path, ...] = ()) -> dict[str, str]:
    """Parse ``key = value`` lines; ``include = other.cfg`` pulls in another file first.

    Relative include paths resolve against the including file. Later keys
    override earlier ones, so keys after an include override its values.
    """
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle at {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        if key == "include":
            out.update(read_config_file(path.parent / value, _seen + (path,)))
        else:
            if key in ("manifest", "out_dir") or (key == "arch" and value.startswith("file:")):
                value = _resolve(path.parent, value)
            out[key] = value
    return out


def _resolve(base: Path, value: str) -> str:
    prefix = "file:" if value.startswith("file:") else ""
    p = Path(value[len(prefix):])
    return prefix + str(p if p.is_absolute() else base / p)


def load_config(path=None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    values: dict[str, Any] = read_config_file(path) if path else {}
    values.update(overrides or {})
    return ExperimentConfig.from_mapping(values)

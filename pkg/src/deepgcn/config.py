"""``key = value`` run configuration files."""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import ConfigError
from .model import ModelConfig

MODEL_KEYS = {
    "backbone": str,
    "aggregator": str,
    "depth": int,
    "width": int,
    "k": int,
    "d_max": int,
    "epsilon": float,
    "dynamic": "bool",
    "dilation": "bool",
    "num_classes": int,
    "dropout": float,
    "aux_dim": int,
    "fusion_width": int,
    "head_widths": "ints",
    "mlp_depth": int,
}
TRAIN_KEYS = {
    "lr": float,
    "decay_steps": int,
    "decay_factor": float,
    "batch_size": int,
    "epochs": int,
    "seed": int,
}
REQUIRED_KEYS = ("backbone", "depth", "width", "k")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def canonical_key(key):
    return key.strip().lower().replace("-", "_")


def parse_pairs(text, source="<config>"):
    """Parse ``key = value`` lines (``#`` comments, blank lines ignored).

    Several ``key=value`` tokens may share a line when separated by spaces.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.count("=") == 1:
            key, value = line.split("=")
            tokens = [(key, value)]
        else:
            tokens = []
            for tok in line.split():
                if "=" not in tok:
                    raise ConfigError(f"{source}:{lineno}: expected key=value, got {tok!r}")
                tokens.append(tuple(tok.split("=", 1)))
        for key, value in tokens:
            key = canonical_key(key)
            if not key:
                raise ConfigError(f"{source}:{lineno}: empty key")
            if any(ch.isspace() for ch in key):
                raise ConfigError(f"{source}:{lineno}: malformed key {key!r}")
            if key in out:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def _convert(key, kind, value):
    try:
        if kind == "bool":
            v = value.lower()
            if v in _TRUE:
                return True
            if v in _FALSE:
                return False
            raise ValueError(value)
        if kind == "ints":
            return tuple(int(x) for x in value.replace(",", " ").split())
        return kind(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


@dataclass
class TrainSettings:
    lr: float = 1e-3
    decay_steps: int = 300_000
    decay_factor: float = 0.5
    batch_size: int = 4
    epochs: int = 100
    seed: int = 0


@dataclass
class RunConfig:
    model: dict
    train: TrainSettings

    def model_config(self, num_classes=None, aux_dim=None):
        vals = dict(self.model)
        if num_classes is not None:
            if "num_classes" in vals and vals["num_classes"] != num_classes:
                raise ConfigError(f"config says num_classes={vals['num_classes']} but data has {num_classes}")
            vals["num_classes"] = num_classes
        if aux_dim is not None:
            if "aux_dim" in vals and vals["aux_dim"] != aux_dim:
                raise ConfigError(f"config says aux_dim={vals['aux_dim']} but data has {aux_dim}")
            vals["aux_dim"] = aux_dim
        try:
            return ModelConfig(**vals)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def run_config_from_pairs(pairs, required=REQUIRED_KEYS):
    unknown = sorted(set(pairs) - set(MODEL_KEYS) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    missing = [k for k in required if k not in pairs]
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)}")
    model = {k: _convert(k, MODEL_KEYS[k], v) for k, v in pairs.items() if k in MODEL_KEYS}
    train = TrainSettings(**{k: _convert(k, TRAIN_KEYS[k], v) for k, v in pairs.items() if k in TRAIN_KEYS})
    return RunConfig(model, train)


def load_run_config(path, required=REQUIRED_KEYS):
    with open(path) as fh:
        return run_config_from_pairs(parse_pairs(fh.read(), path), required)


def format_model_config(cfg):
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, bool):
            value = "on" if value else "off"
        elif isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_model_config(text, source="<config>"):
    pairs = parse_pairs(text, source)
    unknown = sorted(set(pairs) - set(MODEL_KEYS))
    if unknown:
        raise ConfigError(f"{source}: unknown model key(s): {', '.join(unknown)}")
    try:
        return ModelConfig(**{k: _convert(k, MODEL_KEYS[k], v) for k, v in pairs.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None

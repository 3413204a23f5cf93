"""YAML run configuration with dotted-path overrides."""
import copy
from pathlib import Path

import yaml

from .errors import ValidationError
from .training import TrainConfig

DEFAULTS = {
    "data": {
        "image_size": 128,
        "n_source": 250,
        "n_target": 50,
        "val_fraction": 0.2,
        "domains": None,  # None -> built-in source + three targets
    },
    "train": TrainConfig().to_dict(),
    "diversity": {
        "n_images": 16,
        "n_variants": 16,
        "seed": 0,
    },
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def set_dotted(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ValidationError(f"unknown config section in {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ValidationError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def apply_overrides(cfg, overrides):
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        set_dotted(cfg, key.strip(), yaml.safe_load(raw))
    return cfg


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"{path} does not hold a mapping")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, loaded)
    return apply_overrides(cfg, overrides)


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))

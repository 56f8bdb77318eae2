"""Flat INI-style run configuration with dotted-key overrides.

Sections map to module knobs; unknown sections or keys are rejected by
name. The effective configuration is echoed into the output directory for
provenance.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .harness import SyntheticSpec
from .model import ModelConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "model": {
        "image_size": 32, "mask_size": 16, "attention_level": "L2",
        "pooling": "pwap", "r": 0.5, "backbone_widths": "8,16,16,32",
        "n_classes": 3, "fusion": "aaa",
    },
    "synthetic": {
        "image_size": 32, "n_train": 480, "n_val": 64, "n_test": 128,
        "noise": 0.25, "anatomy_contrast": 0.02, "lesion_amplitude": 1.0,
        "lesion_radius": 2, "mask_jitter": 1, "seed": 0,
    },
    "train": {"epochs": 12, "lr": 3e-3, "batch": 16},
    "seg": {"size": 16, "steps": 500, "lr": 3e-3, "width": 8,
            "n_annotated": 8, "n_unannotated": 8, "data_seed": 0},
    "robustness": {"windows": "0,2,4,6,8,10,12", "trials": 3},
}


def _convert(section: str, key: str, raw: str):
    ref = DEFAULTS[section][key]
    if isinstance(ref, int) and not isinstance(ref, bool):
        return int(raw)
    if isinstance(ref, float):
        return float(raw)
    return str(raw)


def load_config(path=None, overrides=()) -> dict:
    """Merge defaults <- INI file <- `section.key=value` overrides."""
    merged = {s: dict(kv) for s, kv in DEFAULTS.items()}

    def apply(section, key, raw, origin):
        if section not in merged:
            raise ConfigError(f"unknown config section '{section}' ({origin})")
        if key not in merged[section]:
            raise ConfigError(f"unknown config key '{section}.{key}' ({origin})")
        try:
            merged[section][key] = _convert(section, key, raw)
        except ValueError as exc:
            raise ConfigError(
                f"bad value for '{section}.{key}': {raw!r}") from exc

    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                apply(section, key, raw, f"file {path}")

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, "
                              f"got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        apply(section.strip(), key.strip(), raw.strip(), "--set")
    return merged


def echo_config(cfg: dict, out_dir) -> None:
    parser = configparser.ConfigParser()
    for section in sorted(cfg):
        parser[section] = {k: str(v) for k, v in sorted(cfg[section].items())}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.ini", "w") as fh:
        parser.write(fh)


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    widths = tuple(int(x) for x in str(m["backbone_widths"]).split(","))
    return ModelConfig(image_size=m["image_size"], mask_size=m["mask_size"],
                       attention_level=m["attention_level"],
                       pooling=m["pooling"], r=m["r"],
                       backbone_widths=widths, n_classes=m["n_classes"],
                       fusion=m["fusion"])


def synthetic_spec(cfg: dict, seed: int | None = None) -> SyntheticSpec:
    s = dict(cfg["synthetic"])
    if seed is not None:
        s["seed"] = seed
    return SyntheticSpec(**s)


def parse_int_list(raw: str):
    return [int(x) for x in str(raw).split(",") if x.strip() != ""]

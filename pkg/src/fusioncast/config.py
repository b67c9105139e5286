"""Plain-text ``key = value`` run configuration with a fixed schema.

Files may use ``[section]`` headers followed by bare keys, or fully dotted
keys (``train.lr = 0.001``). Unknown keys are errors. Lists are comma
separated.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigKeyError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, dict[str, Key]] = {
    "grid": {
        "lat_min": Key(float, 32.0, "southern bound, degrees"),
        "lat_max": Key(float, 42.24, "northern bound, degrees"),
        "lon_min": Key(float, -93.49, "western bound, degrees"),
        "lon_max": Key(float, -83.25, "eastern bound, degrees"),
        "n": Key(int, 32, "grid extent (n x n pixels)"),
    },
    "data": {
        "dir": Key(str, "data", "dataset directory"),
        "frames": Key(int, 24, "frames per synthetic scene"),
        "n_cells": Key(int, 6, "rain cells per scene"),
        "speed": Key(float, 1.118033988749895, "cell speed, px/frame (direction is random per scene)"),
        "cell_sigma": Key(float, 2.5, "rain cell radius (Gaussian sigma), px"),
        "growth": Key(float, 0.25, "moisture/growth coupling per frame"),
        "n_stations": Key(int, 40, "GNSS stations per scene"),
        "station_noise": Key(float, 1.0, "station PWV noise sigma, mm"),
        "idw_k": Key(int, 4, "stations used per pixel by IDW"),
        "prior_perturb": Key(float, 0.0, "sigma of flow perturbation for priors, px/frame"),
        "train_scenes": Key(int, 24, "training scenes per corpus"),
        "val_scenes": Key(int, 4, "validation scenes per corpus"),
        "test_scenes": Key(int, 8, "test scenes per corpus"),
        "min_availability": Key(float, 0.9, "minimum station availability fraction"),
    },
    "model": {
        "t_in": Key(int, 4, "input frames"),
        "t_out": Key(int, 12, "forecast frames"),
        "enc_channels": Key(_ints, (8, 16), "PWV/history conv plan"),
        "prior_channels": Key(_ints, (8, 24), "prior conv plan"),
        "hidden": Key(int, 16, "PWV/history ConvLSTM channels"),
        "prior_hidden": Key(int, 24, "prior ConvLSTM channels"),
        "proj_channels": Key(int, 16, "merged radar / decoder channels"),
        "dec_channels": Key(_ints, (8, 16), "decoder input conv plan"),
        "head_channels": Key(_ints, (8, 8), "decoder upsampling channels"),
        "mlp_reduction": Key(int, 4, "channel-attention MLP reduction ratio"),
        "share_hc_gates": Key(_bool, True, "share fusion gates between H and C"),
        "variant": Key(str, "full", "full | no_pwv | no_prior | no_rpf_concat | rpf_concat_fusion"),
    },
    "train": {
        "lr": Key(float, 3e-3, "learning rate"),
        "epochs": Key(int, 6, "epochs"),
        "batch_size": Key(int, 4, "samples per step"),
        "clip_norm": Key(float, 1.0, "global gradient-norm clip"),
        "teacher_p": Key(float, 0.5, "initial teacher-forcing probability"),
        "seed": Key(int, 0, "training seed"),
        "dtype": Key(str, "float32", "float32 | float64"),
        "checkpoint_every": Key(int, 0, "extra checkpoint cadence in epochs (0 = off)"),
    },
    "eval": {
        "thresholds": Key(_floats, (0.1, 1.0, 4.0), "CSI thresholds, mm/h"),
        "lead_frames": Key(_ints, (1, 4, 8, 12), "lead frames (10 min each)"),
        "csi_agg": Key(str, "pooled", "pooled | mean"),
        "strict": Key(_bool, False, "fail when a requested CSI cell is undefined"),
    },
    "ablate": {
        "seeds": Key(_ints, (0, 1, 2, 3, 4), "corpus/model seeds"),
        "variants": Key(_strs, ("full", "no_pwv", "no_prior", "no_rpf_concat", "rpf_concat_fusion"), "variants"),
    },
}


def defaults() -> dict[str, dict[str, Any]]:
    return {sec: {k: key.default for k, key in keys.items()} for sec, keys in SCHEMA.items()}


def set_value(cfg: dict, dotted: str, raw: str) -> None:
    if "." not in dotted:
        raise ConfigKeyError(f"key {dotted!r} needs a section")
    sec, key = dotted.split(".", 1)
    if sec not in SCHEMA or key not in SCHEMA[sec]:
        raise ConfigKeyError(f"unknown config key {dotted!r}")
    try:
        cfg[sec][key] = SCHEMA[sec][key].parse(raw.strip())
    except ValueError as exc:
        raise ValueError(f"bad value for {dotted}: {exc}") from None


def parse_text(text: str, cfg: dict | None = None) -> dict:
    cfg = cfg if cfg is not None else defaults()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigKeyError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key and section is not None:
            key = f"{section}.{key}"
        set_value(cfg, key, value)
    return cfg


def load(path=None, overrides: list[str] | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        parse_text(Path(path).read_text(), cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_value(cfg, k.strip(), v)
    return cfg


def _render(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump(cfg: dict) -> str:
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for k in keys:
            lines.append(f"{k} = {_render(cfg[sec][k])}")
        lines.append("")
    return "\n".join(lines)


def help_text() -> str:
    rows = []
    for sec, keys in SCHEMA.items():
        for k, key in keys.items():
            rows.append(f"  {sec}.{k} (default {_render(key.default)}): {key.help}")
    return "config keys:\n" + "\n".join(rows)

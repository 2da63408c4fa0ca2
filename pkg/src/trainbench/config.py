"""Campaign configuration: schema, defaults, presets and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_frac = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_int1 = {"type": "integer", "minimum": 1}
_layers = {"type": "array", "items": {"enum": ["conv1", "conv2", "dense1", "head"]}, "uniqueItems": True}
_strategy = {"enum": ["simple_random", "stratified_random"]}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SYNTHETIC_SCHEMA = _obj({
    "classes": {"type": "integer", "minimum": 1, "maximum": 5},
    "per_class": _int1,
    "side": {"type": "integer", "minimum": 16},
    "noise": {"type": "number", "minimum": 0},
    "hue_jitter": _num,
    "rotation": _num,
    "shear": {"type": "number", "minimum": 0, "exclusiveMaximum": 90},
    "scale_jitter": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "shift": {"type": "number", "minimum": 0},
    "hflip_prob": {"type": "number", "minimum": 0, "maximum": 1},
    "hue_offset": _num,
    "shape_shift": {"type": "integer", "minimum": 0},
})

AUGMENT_SCHEMA = _obj({
    "horizontal_flip": {"type": "boolean"},
    "vertical_flip": {"type": "boolean"},
    "rotation_range": {"type": "number", "minimum": 0},
    "shear_range": {"type": "number", "minimum": 0, "exclusiveMaximum": 90},
    "zoom_range": {"type": "number", "minimum": 0},
    "brightness_range": {"type": "number", "minimum": 0},
})

OPTIMIZER_SCHEMA = _obj({
    "kind": {"enum": ["sgd", "adam", "adadelta"]},
    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "rho": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "eps": {"type": ["number", "null"], "minimum": 0},
}, required=["kind"])

SCHEDULE_SCHEMA = _obj({
    "kind": {"enum": ["constant", "step_decay", "cyclic_triangular"]},
    "gamma": _frac,
    "every": _int1,
    "lr_base": _pos,
    "lr_max": _pos,
    "step_size": _int1,
}, required=["kind"])

TRAIN_SCHEMA = _obj({
    "batch_size": _int1,
    "learning_rate": _pos,
    "optimizer": OPTIMIZER_SCHEMA,
    "schedule": SCHEDULE_SCHEMA,
    "head": {"enum": ["softmax_cross_entropy", "linear_svm_hinge"]},
    "trainable": _layers,
    "patience": _int1,
    "max_epochs": _int1,
    "augment": AUGMENT_SCHEMA,
})

_sweep_values = {
    "schedule": {"type": "array", "items": SCHEDULE_SCHEMA, "minItems": 1},
    "optimizer": {"type": "array", "items": OPTIMIZER_SCHEMA, "minItems": 1},
    "patience": {"type": "array", "items": _int1, "minItems": 1},
    "freezing": {"type": "array", "items": _layers, "minItems": 1},
    "head": {"type": "array", "items": TRAIN_SCHEMA["properties"]["head"], "minItems": 1},
    "batch_size": {"type": "array", "items": _int1, "minItems": 1},
    "learning_rate": {"type": "array", "items": _pos},
}

SWEEP_SCHEMA = {
    "oneOf": [
        _obj({"name": {"const": name}, "values": values, "use_lr_finder": {"type": "boolean"}},
             required=["name", "values"])
        for name, values in _sweep_values.items()
    ]
}

CAMPAIGN_SCHEMA = _obj({
    "version": {"const": SCHEMA_VERSION},
    "dataset": {"oneOf": [
        _obj({"synthetic": SYNTHETIC_SCHEMA}, required=["synthetic"]),
        _obj({"path": {"type": "string"}}, required=["path"]),
    ]},
    "source": {"oneOf": [{"type": "null"}, SYNTHETIC_SCHEMA]},
    "pretrain": TRAIN_SCHEMA,
    "test_ratio": _frac,
    "test_strategy": _strategy,
    "candidate_ratios": {"type": "array", "items": _frac, "minItems": 2, "uniqueItems": True},
    "ratio_strategy": _strategy,
    "fold_strategy": _strategy,
    "k": {"type": ["integer", "null"], "minimum": 2},
    "sample_size": _obj({
        "tau": _pos,
        "n_min": {"type": "integer", "minimum": 3},
        "n_max": {"type": "integer", "minimum": 3},
        "trainer": TRAIN_SCHEMA,
    }),
    "alpha": _frac,
    "base_config": TRAIN_SCHEMA,
    "sweeps": {"type": "array", "items": SWEEP_SCHEMA},
    "lr_finder": _obj({
        "lr_min": _pos,
        "lr_max": _pos,
        "n_steps": {"type": "integer", "minimum": 10},
    }),
    "augmentation": _obj({fam: {"type": "array", "items": AUGMENT_SCHEMA}
                          for fam in ("flip", "rotation", "shear", "zoom", "brightness")}),
    "master_seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": ["string", "null"]},
    "parallelism": _int1,
})

# fields that do not influence any result and so stay out of the config hash
_UNHASHED = ("output_dir", "parallelism")


class ConfigError(ValueError):
    pass


def _paper_sweeps(lrs):
    return [
        {"name": "schedule", "values": [
            {"kind": "constant"},
            {"kind": "step_decay", "gamma": 0.5, "every": 10},
            {"kind": "cyclic_triangular", "lr_base": 1e-5, "lr_max": 1e-3, "step_size": 200},
        ]},
        {"name": "optimizer", "values": [{"kind": "sgd", "momentum": 0.9}, {"kind": "adam"}, {"kind": "adadelta"}]},
        {"name": "patience", "values": [50, 100]},
        {"name": "freezing", "values": [[], ["head"], ["head", "dense1"], ["head", "dense1", "conv2"],
                                        ["head", "dense1", "conv2", "conv1"]]},
        {"name": "head", "values": ["softmax_cross_entropy", "linear_svm_hinge"]},
        {"name": "batch_size", "values": [8, 16, 32]},
        {"name": "learning_rate", "values": lrs, "use_lr_finder": True},
    ]


def _paper_augmentation():
    return {
        "flip": [{"horizontal_flip": True}, {"vertical_flip": True},
                 {"horizontal_flip": True, "vertical_flip": True}],
        "rotation": [{"rotation_range": r} for r in (15, 40, 90, 180)],
        "shear": [{"shear_range": s} for s in (1, 10, 30, 60, 89)],
        "zoom": [{"zoom_range": z} for z in (0.25, 0.5, 1.0)],
        "brightness": [{"brightness_range": b} for b in (0.1, 0.25, 0.5)],
    }


TABLE1_TRAIN = {
    "batch_size": 16,
    "learning_rate": 2e-05,
    "optimizer": {"kind": "adam", "momentum": 0.0, "beta1": 0.9, "beta2": 0.999, "rho": 0.95, "eps": 1e-08},
    "schedule": {"kind": "constant", "gamma": 0.5, "every": 10, "lr_base": 1e-4, "lr_max": 1e-2, "step_size": 100},
    "head": "softmax_cross_entropy",
    "trainable": ["dense1", "head"],
    "patience": 100,
    "max_epochs": 1000,
    "augment": {"horizontal_flip": True, "vertical_flip": True, "rotation_range": 180.0, "shear_range": 89.0,
                "zoom_range": 1.0, "brightness_range": 0.0},
}

_SYNTH_DEFAULT = {
    "classes": 5, "per_class": 200, "side": 32, "noise": 0.08, "hue_jitter": 180.0, "rotation": 180.0,
    "shear": 30.0, "scale_jitter": 0.15, "shift": 0.1, "hflip_prob": 0.0, "hue_offset": 0.0, "shape_shift": 0,
}

_NO_AUG = {"horizontal_flip": False, "vertical_flip": False, "rotation_range": 0.0, "shear_range": 0.0,
           "zoom_range": 0.0, "brightness_range": 0.0}

PRESETS = {
    # the study's final settings and full parameter grids, on the 5 x 200 synthetic task
    "table1": {
        "version": SCHEMA_VERSION,
        "dataset": {"synthetic": dict(_SYNTH_DEFAULT)},
        "source": {**_SYNTH_DEFAULT, "per_class": 200, "rotation": 0.0, "shear": 0.0, "hue_offset": 36.0,
                   "shape_shift": 2},
        "pretrain": {**TABLE1_TRAIN, "learning_rate": 3e-3, "trainable": ["conv1", "conv2", "dense1", "head"],
                     "patience": 10, "max_epochs": 60, "augment": dict(_NO_AUG)},
        "test_ratio": 0.1,
        "test_strategy": "simple_random",
        "candidate_ratios": [0.1, 0.15, 0.2, 0.25],
        "ratio_strategy": "simple_random",
        "fold_strategy": "simple_random",
        "k": 10,
        "sample_size": {"tau": 0.0035, "n_min": 5, "n_max": 60,
                        "trainer": {**TABLE1_TRAIN, "learning_rate": 1e-3, "patience": 20, "max_epochs": 20,
                                    "augment": dict(_NO_AUG)}},
        "alpha": 0.05,
        "base_config": {**TABLE1_TRAIN, "augment": dict(_NO_AUG)},
        "sweeps": _paper_sweeps([2e-5, 1e-4, 1e-3]),
        "lr_finder": {"lr_min": 1e-7, "lr_max": 1.0, "n_steps": 100},
        "augmentation": _paper_augmentation(),
        "master_seed": 42,
        "output_dir": None,
        "parallelism": 1,
    },
}

_DESK_TRAIN = {**TABLE1_TRAIN, "learning_rate": 3e-3, "patience": 6, "max_epochs": 30, "augment": dict(_NO_AUG)}

PRESETS["desk"] = {
    **copy.deepcopy(PRESETS["table1"]),
    "dataset": {"synthetic": {**_SYNTH_DEFAULT, "per_class": 60, "side": 16}},
    "source": {**_SYNTH_DEFAULT, "per_class": 60, "side": 16, "rotation": 0.0, "shear": 0.0, "hue_offset": 36.0,
               "shape_shift": 2},
    "pretrain": {**_DESK_TRAIN, "trainable": ["conv1", "conv2", "dense1", "head"], "patience": 8, "max_epochs": 40},
    "candidate_ratios": [0.2, 0.25],
    "k": None,
    "sample_size": {"tau": 0.0035, "n_min": 5, "n_max": 12,
                    "trainer": {**_DESK_TRAIN, "patience": 8, "max_epochs": 8}},
    "base_config": dict(_DESK_TRAIN),
    "sweeps": [
        {"name": "schedule", "values": [{"kind": "constant"}, {"kind": "step_decay", "gamma": 0.5, "every": 10}]},
        {"name": "optimizer", "values": [{"kind": "adam"}, {"kind": "sgd", "momentum": 0.9}]},
        {"name": "patience", "values": [6]},
        {"name": "freezing", "values": [[], ["head"], ["head", "dense1"], ["head", "dense1", "conv2"]]},
        {"name": "head", "values": ["softmax_cross_entropy", "linear_svm_hinge"]},
        {"name": "batch_size", "values": [16, 32]},
        {"name": "learning_rate", "values": [3e-3], "use_lr_finder": True},
    ],
    "lr_finder": {"lr_min": 1e-6, "lr_max": 1.0, "n_steps": 60},
    "augmentation": {
        "flip": [{"horizontal_flip": True, "vertical_flip": True}],
        "rotation": [{"rotation_range": 90.0}, {"rotation_range": 180.0}],
        "shear": [{"shear_range": 30.0}],
        "zoom": [{"zoom_range": 0.25}],
        "brightness": [{"brightness_range": 0.25}],
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("dataset", "augmentation"):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


_VALIDATOR = jsonschema.Draft202012Validator(CAMPAIGN_SCHEMA)


def validate(obj: dict) -> None:
    try:
        _VALIDATOR.validate(obj)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def build_config(user: dict | None = None, preset: str = "desk") -> dict:
    """Validate ``user`` and merge it over a preset into a complete config."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
    user = user or {}
    validate(user) if user else None
    full = _deep_merge(PRESETS[preset], user)
    validate(full)
    ss = full["sample_size"]
    if ss["n_max"] < ss["n_min"]:
        raise ConfigError("sample_size.n_max must be >= n_min")
    return full


def load_config(path, preset: str = "desk") -> dict:
    path = Path(path)
    try:
        user = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build_config(user, preset)


def dumps(config: dict) -> str:
    return json.dumps(config, indent=2, sort_keys=True) + "\n"


def config_hash(config: dict) -> str:
    hashed = {k: v for k, v in config.items() if k not in _UNHASHED}
    return hashlib.sha256(json.dumps(hashed, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

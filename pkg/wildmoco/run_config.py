"""
Run configuration
-----------------
Every hyperparameter of a pretraining or evaluation run lives in ``RunConfig``.
On disk it is a flat ``key=value`` document (read with python-dotenv), where
nested sections are prefixed: ``aug_``, ``cld_``, ``mix_``, ``probe_`` and
``finetune_``.

Resolution order (later wins):
    defaults -> preset -> --desk overrides -> config file -> WILDMOCO_<KEY> env -> CLI
"""

import os
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Optional, Tuple

from dotenv import dotenv_values

from wildmoco.config import env_prefix
from wildmoco.log_helper import write_log

STRATEGIES = ("moco_v2", "moco_cld", "moco_geo", "geocld", "mixco")
BACKBONES = ("desk_cnn", "resnet50")
# WILDMOCO_* variables read by config.py and run_desk_protocol.sh rather than by RunConfig
PROCESS_ENV_KEYS = ("out", "number_proc", "verbose", "cache_dir")
SCRIPT_ENV_PREFIX = "protocol_"

# strategy name -> view policy name used by augment.make_views
VIEW_POLICY = {
    "moco_v2": "moco_v2",
    "moco_cld": "cld_color",
    "moco_geo": "geo",
    "geocld": "geocld",
    "mixco": "mixco",
}


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


@dataclass
class AugPolicy:
    crop_size: int = 224
    hflip_p: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    blur_p: float = 0.5
    blur_kernel: int = 23
    jitter_brightness: float = 0.4
    jitter_contrast: float = 0.4
    jitter_saturation: float = 0.4
    jitter_hue: float = 0.1
    jitter_p: float = 1.0
    grayscale_p: float = 0.2
    rotation_angles: Tuple[int, ...] = (90, 180, 270)

    def problems(self):
        out = []
        if self.crop_size < 1:
            out.append(f"aug_crop_size must be positive, got {self.crop_size}")
        if not 0 < self.blur_sigma_min <= self.blur_sigma_max:
            out.append(f"blur sigma range must be positive and ordered, got "
                       f"[{self.blur_sigma_min}, {self.blur_sigma_max}]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            out.append(f"aug_blur_kernel must be odd and positive, got {self.blur_kernel}")
        if not self.rotation_angles or any(a % 90 != 0 or a % 360 == 0 for a in self.rotation_angles):
            out.append(f"rotation angles must be non-zero multiples of 90, got {self.rotation_angles}")
        if not 0 <= self.jitter_hue <= 0.5:
            out.append(f"aug_jitter_hue must lie in [0, 0.5], got {self.jitter_hue}")
        for name in ("hflip_p", "blur_p", "jitter_p", "grayscale_p"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                out.append(f"aug_{name} must lie in [0, 1], got {value}")
        return out


@dataclass
class CLDConfig:
    k: int = 32
    lam: float = 0.25
    tau_g: float = 0.4
    kmeans_iters: int = 10
    kmeans_seed: int = 0

    def problems(self):
        out = []
        if self.k < 1:
            out.append(f"cld_k must be >= 1, got {self.k}")
        if self.lam < 0:
            out.append(f"cld_lam must be >= 0, got {self.lam}")
        if self.tau_g <= 0:
            out.append(f"cld_tau_g must be > 0, got {self.tau_g}")
        if self.kmeans_iters < 1:
            out.append(f"cld_kmeans_iters must be >= 1, got {self.kmeans_iters}")
        return out


@dataclass
class MixConfig:
    gamma: float = 0.9
    p: float = 0.3
    beta: float = 1.0
    seed: int = 0

    def problems(self):
        out = []
        if not 0 <= self.gamma <= 1:
            out.append(f"mix_gamma must lie in [0, 1], got {self.gamma}")
        if not 0 <= self.p <= 1:
            out.append(f"mix_p must lie in [0, 1], got {self.p}")
        if self.beta <= 0:
            out.append(f"mix_beta must be > 0, got {self.beta}")
        return out


@dataclass
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 30.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def problems(self, prefix="probe"):
        out = []
        if self.epochs < 0:
            out.append(f"{prefix}_epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"{prefix}_batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            out.append(f"{prefix}_lr must be >= 0, got {self.lr}")
        return out


def _finetune_defaults():
    return ProbeConfig(epochs=200, batch_size=256, lr=0.01, momentum=0.9, weight_decay=0.0)


@dataclass
class RunConfig:
    preset: str = "moco_v2"
    strategy: str = "moco_v2"
    run_id: str = ""
    backbone: str = "desk_cnn"
    epochs: int = 200
    batch_size: int = 64
    lr: Optional[float] = None
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    tau_q: float = 0.2
    momentum: float = 0.999
    queue_size: int = 4096
    feature_dim: int = 128
    head_hidden: int = 2048
    patch_size: int = 256
    data_seed: int = 0
    aug_seed: int = 0
    init_seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    knn_every: int = 0
    knn_k: int = 20
    knn_t: float = 0.02
    deterministic: bool = True
    num_workers: int = 0
    label_fraction: float = 0.1
    pretrain_manifest: str = ""
    downstream_manifest: str = ""
    aug: AugPolicy = field(default_factory=AugPolicy)
    cld: CLDConfig = field(default_factory=CLDConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: ProbeConfig = field(default_factory=_finetune_defaults)

    @property
    def initial_lr(self):
        # linear scaling rule, 0.03 at batch 256
        if self.lr is None:
            return 0.03 * self.batch_size / 256
        return self.lr

    @property
    def view_policy(self):
        return VIEW_POLICY[self.strategy]

    def problems(self):
        out = []
        if self.preset not in PRESETS:
            out.append(f"unknown preset '{self.preset}', expected one of {sorted(PRESETS)}")
        if self.strategy not in STRATEGIES:
            out.append(f"unknown strategy '{self.strategy}', expected one of {list(STRATEGIES)}")
        if self.backbone not in BACKBONES:
            out.append(f"unknown backbone '{self.backbone}', expected one of {list(BACKBONES)}")
        if self.epochs < 0:
            out.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.tau_q <= 0:
            out.append(f"tau_q must be > 0, got {self.tau_q}")
        if not 0 <= self.momentum < 1:
            out.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.queue_size < self.batch_size:
            out.append(f"queue_size ({self.queue_size}) must hold at least one batch ({self.batch_size})")
        if self.aug.crop_size > self.patch_size:
            out.append(f"aug_crop_size ({self.aug.crop_size}) exceeds patch_size ({self.patch_size})")
        if self.knn_k < 1 or self.knn_t <= 0:
            out.append(f"knn_k must be >= 1 and knn_t > 0, got k={self.knn_k} t={self.knn_t}")
        if not 0 < self.label_fraction <= 1:
            out.append(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        out += self.aug.problems() + self.cld.problems() + self.mix.problems()
        out += self.probe.problems("probe") + self.finetune.problems("finetune")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


SECTIONS = {"aug": AugPolicy, "cld": CLDConfig, "mix": MixConfig,
            "probe": ProbeConfig, "finetune": ProbeConfig}

# Table 2 wiring and the defaults chosen for each model
PRESETS = {
    "moco_v2": {"strategy": "moco_v2"},
    "moco_cld": {"strategy": "moco_cld", "cld_lam": 0.25, "cld_k": 32},
    "moco_cld_k64": {"strategy": "moco_cld", "cld_lam": 0.25, "cld_k": 64},
    "moco_geo": {"strategy": "moco_geo"},
    "geocld": {"strategy": "geocld", "cld_lam": 0.25, "cld_k": 32},
    "mixco": {"strategy": "mixco", "mix_gamma": 0.9, "mix_p": 0.3, "mix_beta": 1.0},
    # long cosine schedules; the epoch count survives --desk
    "moco_v2_long": {"strategy": "moco_v2", "epochs": 800},
    "mixco_long": {"strategy": "mixco", "mix_gamma": 0.9, "mix_p": 0.3, "mix_beta": 1.0, "epochs": 800},
}

DESK_OVERRIDES = {
    "backbone": "desk_cnn",
    "epochs": 20,
    "batch_size": 64,
    "queue_size": 1024,
    "head_hidden": 512,
    "patch_size": 96,
    "aug_crop_size": 64,
    "aug_blur_kernel": 9,
    "knn_every": 5,
    "probe_epochs": 30,
    "probe_lr": 10.0,
    "finetune_epochs": 10,
    "finetune_batch_size": 64,
}


def _field_types(cls):
    return typing.get_type_hints(cls)


def flat_keys():
    keys = []
    for name in _field_types(RunConfig):
        if name in SECTIONS:
            keys += [f"{name}_{sub}" for sub in _field_types(SECTIONS[name])]
        else:
            keys.append(name)
    return keys


def _coerce(value, tp, key):
    if not isinstance(value, str):
        return value
    text = value.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("", "none", "auto"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(text, inner, key)
    if origin is tuple:
        return tuple(_coerce(part, args[0], key) for part in text.split(",") if part.strip())
    if tp is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got '{value}'")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _format(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def to_flat(config):
    flat = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in SECTIONS:
            for sub in fields(value):
                flat[f"{f.name}_{sub.name}"] = getattr(value, sub.name)
        else:
            flat[f.name] = value
    return flat


def from_flat(flat):
    """Build a RunConfig from flat (string or typed) values; all problems are reported together."""
    problems = []
    known = set(flat_keys())
    unknown = sorted(k for k in flat if k not in known)
    if unknown:
        problems.append("unknown keys: " + ", ".join(unknown))

    top_types = _field_types(RunConfig)
    kwargs = {}
    section_kwargs = {name: {} for name in SECTIONS}
    for key, value in flat.items():
        if key not in known:
            continue
        try:
            if key in top_types and key not in SECTIONS:
                kwargs[key] = _coerce(value, top_types[key], key)
                continue
            section, sub = key.split("_", 1)
            sub_types = _field_types(SECTIONS[section])
            section_kwargs[section][sub] = _coerce(value, sub_types[sub], key)
        except ValueError as e:
            problems.append(f"{key}: cannot parse '{value}' ({e})")
    if problems:
        raise ConfigError(problems)

    config = RunConfig(**kwargs)
    for section, values in section_kwargs.items():
        if values:
            setattr(config, section, replace(getattr(config, section), **values))
    return config.validate()


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    known = set(flat_keys())
    out = {}
    for name, value in environ.items():
        if not name.startswith(env_prefix):
            continue
        key = name[len(env_prefix):].lower()
        if key in known:
            out[key] = value
        elif key not in PROCESS_ENV_KEYS and not key.startswith(SCRIPT_ENV_PREFIX):
            write_log(f"ignoring {name}: not a run config key", level="WARNING")
    return out


def load_run_config(path=None, preset=None, desk=False, overrides=None, environ=None):
    overrides = dict(overrides or {})
    file_values = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        file_values = {k: v for k, v in dotenv_values(path).items() if v is not None}
    env_values = env_overrides(environ)

    preset_name = (overrides.get("preset") or preset or env_values.get("preset")
                   or file_values.get("preset") or "moco_v2")
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset '{preset_name}', expected one of {sorted(PRESETS)}")

    flat = {k: v for k, v in to_flat(RunConfig()).items()}
    flat.update(PRESETS[preset_name])
    if desk:
        flat.update({k: v for k, v in DESK_OVERRIDES.items() if k not in PRESETS[preset_name]})
    flat.update(file_values)
    flat.update(env_values)
    flat.update(overrides)
    flat["preset"] = preset_name
    if "strategy" not in file_values and "strategy" not in env_values and "strategy" not in overrides:
        flat["strategy"] = PRESETS[preset_name]["strategy"]
    return from_flat(flat)


def dump_config(config, path):
    with open(path, "w", encoding="utf-8") as fout:
        for key, value in to_flat(config).items():
            fout.write(f"{key}={_format(value)}\n")
    return path


def parse_assignments(pairs):
    """Turn ``["cld_k=16", "mix_p=0.5"]`` into a dict; malformed items are errors."""
    out = {}
    bad = []
    for pair in pairs or []:
        if "=" not in pair:
            bad.append(pair)
            continue
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    if bad:
        raise ConfigError("expected key=value, got: " + ", ".join(bad))
    return out


def flat_dict(config) -> Dict[str, str]:
    return {k: _format(v) for k, v in to_flat(config).items()}

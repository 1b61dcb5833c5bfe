from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from utils.agop_utils import AgopConfig
from utils.engine_utils import EngineConfig, StreamConfig
from utils.errors import ConfigError
from utils.loss_utils import LossConfig
from utils.stream_utils import DomainSpec, SourceConfig, shift_direction


SCHEMA: dict[str, dict[str, type | tuple[type, ...]]] = {
    "model": {"feature_dim": int, "activation": str, "affine_trainable": bool, "checkpoint": str},
    "source": {
        "n_classes": int,
        "input_dim": int,
        "samples_per_class": int,
        "mu_sep": float,
        "sigma_src": float,
        "features": str,
    },
    "pretrain": {"epochs": int, "lr": float},
    "agop": {"alpha": float, "tau": float, "t_eig": int, "rank": int},
    "loss": {
        "lambda_trg": float,
        "lambda_cont": float,
        "temperature": float,
        "lr": float,
        "optimizer": str,
        "adam_betas": list,
        "adam_eps": float,
        "sce_weights": list,
        "contrastive_confident_only": bool,
    },
    "teacher": {"momentum": float},
    "engine": {
        "seed": int,
        "subspace_mode": str,
        "carry_scale": bool,
        "post_step_eval": bool,
        "aug_sigma": float,
    },
    "stream": {
        "batches_per_domain": int,
        "batch_size": int,
        "repeat": int,
        "domains": list,
        "features": str,
    },
}

DOMAIN_KEYS = {"id", "rotation_angle", "scale", "shift", "noise_sigma"}

DEFAULT_TOML = """\
# Experiment configuration. Every key is optional; the values below are the defaults.

[model]
feature_dim = 128          # L, width of the frozen feature extractor
activation = "tanh"        # "tanh" or "identity"
affine_trainable = true    # adapt the per-feature gain/bias pair alongside s
# checkpoint = "model.json" # load a saved model instead of pretraining

[source]
n_classes = 10             # C
input_dim = 32
samples_per_class = 200
mu_sep = 0.8               # scale of the random class means
sigma_src = 1.0            # within-class noise
# features = "source.csv"  # labeled input rows instead of Gaussian blobs

[pretrain]
epochs = 500
lr = 0.05

[agop]
alpha = 0.1                # EMA rate of the AGOP matrix, in (0, 1]
tau = 0.8                  # confidence threshold, in [0, 1)
t_eig = 10                 # batches between eigendecompositions
# rank = 10                # subspace rank r; default min(64, n_classes)

[loss]
lambda_trg = 1.0
lambda_cont = 1.0
temperature = 0.1
lr = 0.01                  # Adam step on s and the affine pair
optimizer = "adam"         # "adam" or "sgd"
adam_betas = [0.9, 0.999]
adam_eps = 1e-8
sce_weights = [1.0, 1.0]
contrastive_confident_only = false

[teacher]
momentum = 0.999

[engine]
seed = 0
subspace_mode = "agop"     # "agop", "static" or "none"
carry_scale = false        # keep s across basis refreshes by projection
post_step_eval = false     # score predictions after the update step
aug_sigma = 0.05           # Gaussian input noise of the augmented view

[stream]
batches_per_domain = 50
batch_size = 64
repeat = 1                 # >1 replays the whole stream (long-term setting)
# features = "target.csv"  # input rows in file order as one domain; label -1 is not scored

# Without [[stream.domains]] entries the eight built-in shifts are used.
# A scalar shift is a magnitude along a seeded random direction.
# [[stream.domains]]
# id = 0
# rotation_angle = 0.0
# scale = 1.0
# shift = 2.0
# noise_sigma = 0.0
"""


def _check_type(where: str, value: Any, kind: type | tuple[type, ...]) -> Any:
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    if not isinstance(value, kind):
        raise ConfigError(f"{where} must be of type {getattr(kind, '__name__', kind)}, got {value!r}")
    return value


def _section(raw: dict, name: str) -> dict[str, Any]:
    table = raw[name]
    schema = SCHEMA[name]
    out: dict[str, Any] = {}
    for key, value in table.items():
        if key not in schema:
            raise ConfigError(f"unknown key {name}.{key}")
        out[key] = _check_type(f"{name}.{key}", value, schema[key])
    return out


def _pair(where: str, value: list) -> tuple[float, float]:
    if len(value) != 2:
        raise ConfigError(f"{where} must hold two numbers")
    return (_check_type(where, value[0], float), _check_type(where, value[1], float))


def _vector(where: str, value: Any, input_dim: int) -> np.ndarray | float:
    if isinstance(value, list):
        arr = np.asarray([_check_type(where, v, float) for v in value])
        if arr.shape != (input_dim,):
            raise ConfigError(f"{where} must have {input_dim} entries, got {arr.shape[0]}")
        return arr
    return _check_type(where, value, float)


def _path(value: str | None) -> Path | None:
    return Path(value) if value else None


def parse_domains(entries: list, input_dim: int, seed: int) -> tuple[DomainSpec, ...]:
    if not entries:
        raise ConfigError("stream.domains is empty")
    domains: list[DomainSpec] = []
    for index, entry in enumerate(entries):
        where = f"stream.domains[{index}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where} must be a table")
        unknown = set(entry) - DOMAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown key {where}.{sorted(unknown)[0]}")
        domain_id = _check_type(f"{where}.id", entry.get("id", index), int)
        shift = _vector(f"{where}.shift", entry.get("shift", 0.0), input_dim)
        if isinstance(shift, float) and shift != 0.0:
            shift = shift * shift_direction(seed, domain_id, input_dim)
        domain = DomainSpec(
            id=domain_id,
            rotation_angle=_check_type(f"{where}.rotation_angle", entry.get("rotation_angle", 0.0), float),
            scale=_vector(f"{where}.scale", entry.get("scale", 1.0), input_dim),
            shift=shift,
            noise_sigma=_check_type(f"{where}.noise_sigma", entry.get("noise_sigma", 0.0), float),
        )
        domain.validate(input_dim)
        domains.append(domain)
    return tuple(domains)


def config_from_dict(raw: dict[str, Any], overrides: dict[str, Any] | None = None) -> EngineConfig:
    """Build a validated EngineConfig from parsed TOML; ``overrides`` maps ``table.key`` to a value."""
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown table [{sorted(unknown)[0]}]")
    tables: dict[str, dict[str, Any]] = {}
    for name in SCHEMA:
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        tables[name] = dict(table)
    raw = tables
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        table, key = dotted.split(".", 1)
        raw[table][key] = value

    model = _section(raw, "model")
    source = _section(raw, "source")
    pretrain = _section(raw, "pretrain")
    agop = _section(raw, "agop")
    loss = _section(raw, "loss")
    teacher = _section(raw, "teacher")
    engine = _section(raw, "engine")
    stream = _section(raw, "stream")

    seed = engine.pop("seed", 0)
    if seed < 0:
        raise ConfigError(f"engine.seed must be non-negative, got {seed}")
    if "adam_betas" in loss:
        loss["adam_betas"] = _pair("loss.adam_betas", loss["adam_betas"])
    if "sce_weights" in loss:
        loss["sce_weights"] = _pair("loss.sce_weights", loss["sce_weights"])

    source_features = source.pop("features", None)
    stream_features = stream.pop("features", None)
    checkpoint = model.pop("checkpoint", None)
    source_cfg = SourceConfig(seed=seed, **source)
    domains = None
    if "domains" in stream:
        domains = parse_domains(stream.pop("domains"), source_cfg.input_dim, seed)

    config = EngineConfig(
        source=source_cfg,
        feature_dim=model.get("feature_dim", 128),
        activation=model.get("activation", "tanh"),
        affine_trainable=model.get("affine_trainable", True),
        pretrain_epochs=pretrain.get("epochs", 500),
        pretrain_lr=pretrain.get("lr", 0.05),
        agop=AgopConfig(**agop),
        loss=LossConfig(**loss),
        teacher_momentum=teacher.get("momentum", 0.999),
        stream=StreamConfig(domains=domains, **stream),
        model_path=_path(checkpoint),
        source_features=_path(source_features),
        stream_features=_path(stream_features),
        seed=seed,
        **engine,
    )
    config.validate()
    return config


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> EngineConfig:
    if path is None:
        return config_from_dict({}, overrides)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, overrides)


def with_metrics_path(config: EngineConfig, path: str | Path | None) -> EngineConfig:
    return replace(config, metrics_path=Path(path) if path is not None else None)

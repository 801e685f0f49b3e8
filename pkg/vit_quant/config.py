"""Run configuration: settings defaults, then a YAML/JSON file, then explicit overrides."""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml
from django.conf import settings

from .exceptions import ConfigError
from .serializers import RunConfigSerializer, ViTConfigSerializer
from .vit import ViTConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    seed: int = 0
    base_bits: int = 4
    mode: str = "greedy"
    ln_mode: str = "clipped_cw"
    n_sigma: float = 2.0
    percentile: float = 99.99
    calib_size: int = 32
    importance_samples: int = 256
    target: str = "label"
    boost_blocks: int = 2
    demote_per_block: int = 2
    demote_depth: int = 1
    train_per_class: int = 100
    eval_per_class: int = 200
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    ln_outliers: int = 2
    outlier_gain: float = 1024.0
    run_dir: str = "runs/default"

    def to_dict(self):
        data = asdict(self)
        data["vit"] = self.vit.to_dict()
        return data

    @classmethod
    def from_dict(cls, data):
        """Validate through the serializers; unknown keys are rejected."""
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError("unknown run config fields", fields=",".join(sorted(unknown)))
        vit_data = dict(data.get("vit") or {})
        unknown_vit = set(vit_data) - set(ViTConfigSerializer().fields)
        if unknown_vit:
            raise ConfigError("unknown ViT config fields", fields=",".join(sorted(unknown_vit)))
        merged = {**cls().to_dict(), **data}
        merged["vit"] = {**ViTConfig().to_dict(), **vit_data}
        serializer = RunConfigSerializer(data=merged)
        if not serializer.is_valid():
            raise ConfigError(f"invalid run config: {json.dumps(serializer.errors, sort_keys=True)}")
        values = dict(serializer.validated_data)
        values["vit"] = ViTConfig(**dict(values["vit"]))
        return cls(**values)

    def digest(self):
        """Hash of the settings that shape results; the run directory is left out."""
        data = self.to_dict()
        data.pop("run_dir")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, **overrides):
        return RunConfig.from_dict({**self.to_dict(), **overrides})

    def evolve(self, **changes):
        """Copy with already-validated changes (internal use by the ablation driver)."""
        return replace(self, **changes)

    @property
    def path(self):
        return Path(self.run_dir)


def settings_defaults():
    """The `VIT_QUANT` settings dict mapped onto RunConfig field names."""
    options = getattr(settings, "VIT_QUANT", {})
    mapping = {
        "SEED": "seed",
        "BASE_BITS": "base_bits",
        "MODE": "mode",
        "N_SIGMA": "n_sigma",
        "PERCENTILE": "percentile",
        "CALIB_SIZE": "calib_size",
        "IMPORTANCE_SAMPLES": "importance_samples",
        "RUN_DIR": "run_dir",
    }
    return {name: options[key] for key, name in mapping.items() if options.get(key) is not None}


def read_config_file(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", path=str(path)) from None
    try:
        # YAML is a superset of JSON, one parser serves both
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML/JSON: {exc}", path=str(path)) from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping", path=str(path))
    return data


def build_run_config(config_path=None, **overrides):
    data = settings_defaults()
    if config_path:
        data.update(read_config_file(config_path))
    data.update({key: value for key, value in overrides.items() if value is not None})
    config = RunConfig.from_dict(data)
    logger.info(f"Run config {config.digest()[:12]}: mode={config.mode} bits={config.base_bits} seed={config.seed}")
    return config

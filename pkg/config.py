"""
Module: config.py
Flat `key = value` configuration files, CLI flag overrides, and the
translation of the merged settings into validated pydantic models.

Example file:

    # desk-scale sweep
    seed = 7
    centers = 10
    admm-iterations = 50
    variance_threshold = 0.8
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import BaseModel, ValidationError

from confound_admm import AdmmConfig
from exceptions import ConfigError
from federation import PipelineConfig
from synthdata import SynthSpec, build_spec

logger = logging.getLogger(__name__)

# settings key -> model field
SYNTH_KEYS = {
    "seed": "seed",
    "subjects": "n_total",
    "features": "n_features",
    "covariates": "q",
    "centers": "n_centers",
    "noise_frac": "noise_frac",
    "folds": "folds",
    "intercept": "intercept",
    "groups": "n_groups",
    "group_effect": "group_effect",
}
ADMM_KEYS = {
    "rho": "rho",
    "admm_iterations": "iterations",
    "tolerance": "tolerance",
    "adaptive_rho": "adaptive_rho",
}
PIPELINE_KEYS = {
    "variance_threshold": "variance_threshold",
    "global_variance_threshold": "global_variance_threshold",
    "m_components": "m_components",
    "covariate_spec": "covariate_spec",
    "share_scores": "share_scores",
    "score_column_cap": "score_column_cap",
}
RUN_KEYS = {"transport", "out", "data", "exchange", "timeout", "center_counts", "workers"}

KNOWN_KEYS = set(SYNTH_KEYS) | set(ADMM_KEYS) | set(PIPELINE_KEYS) | RUN_KEYS


def normalize_key(key: str) -> str:
    """'--admm-iterations' and 'admm_iterations' name the same setting."""
    return key.strip().lstrip("-").replace("-", "_").lower()


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    settings: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{raw.strip()}'")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{number}: unknown setting '{key}'")
        if key in settings:
            logger.warning("%s:%d: '%s' set twice, keeping the last value", source, number, key)
        settings[key] = value.strip()
    return settings


def read_config_file(path) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text, str(path))


def merge_settings(file_values: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Flag values win over file values; flags left unset (None) do not."""
    merged = dict(file_values)
    for key, value in overrides.items():
        key = normalize_key(key)
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown setting '{key}'")
        if value is not None:
            merged[key] = value
    return merged


def _pick(settings: Mapping[str, Any], keys: Mapping[str, str]) -> Dict[str, Any]:
    return {field: settings[key] for key, field in keys.items() if key in settings}


def build_synth_spec(settings: Mapping[str, Any]) -> SynthSpec:
    return build_spec(**_pick(settings, SYNTH_KEYS))


def build_pipeline_config(settings: Mapping[str, Any]) -> PipelineConfig:
    try:
        admm = AdmmConfig(**_pick(settings, ADMM_KEYS))
        return PipelineConfig(admm=admm, **_pick(settings, PIPELINE_KEYS))
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_settings(config_path: Optional[str], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    file_values = read_config_file(config_path) if config_path else {}
    return merge_settings(file_values, overrides)


def config_hash(*models: BaseModel) -> str:
    """sha256 over the canonical JSON dump of the given models."""
    canonical = [json.loads(model.model_dump_json()) for model in models]
    return hashlib.sha256(json.dumps(canonical, sort_keys=True).encode("utf-8")).hexdigest()


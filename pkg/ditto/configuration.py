"""
Experiment configuration files.

A config is a JSON object that names a recipe and overrides some of its
keys. Loading resolves every default, rejects unknown keys and reports all
type and range problems together.

Environment:
  DITTO_SEED    overrides data, model and optimizer seeds
  DITTO_DEVICE  torch device for train/eval (default cpu)
"""

import json
import logging
import os
import typing
from dataclasses import MISSING, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from ditto.errors import ConfigError, SchemaVersionError
from ditto.recipes import DEFAULT_RECIPE, ExperimentRecipe, get_recipe
from ditto.schema import SCHEMA_VERSION, BundlingConfig, EmbeddingSpec

logger = logging.getLogger(__name__)

SECTIONS = ("pde", "model", "training", "optimizer", "loss", "data", "eval")
TOP_LEVEL_KEYS = set(SECTIONS) | {"schema_version", "recipe", "dataset_path", "output_dir"}
NESTED = {("model", "embedding"): EmbeddingSpec, ("training", "bundling"): BundlingConfig}


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a config file; an empty file is an empty override set."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not text.strip():
        return {}
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object, got {type(raw).__name__}")
    return raw


def _allows_none(annotation) -> bool:
    return type(None) in typing.get_args(annotation)


def _check_value(where: str, value: Any, current: Any, annotation, errors: List[str]) -> Any:
    """Type-check ``value`` against the field's current value and annotation."""
    if value is None:
        if current is None or _allows_none(annotation):
            return None
        errors.append(f"{where}: null is not allowed")
        return current
    if isinstance(current, bool) or annotation is bool:
        if not isinstance(value, bool):
            errors.append(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) or annotation in (int, Optional[int]):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float) or annotation in (float, Optional[float]):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{where}: expected a number, got {value!r}")
            return current
        return float(value)
    if isinstance(current, str) or annotation in (str, Optional[str]):
        if not isinstance(value, str):
            errors.append(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(current, tuple) or typing.get_origin(annotation) is tuple or \
            any(typing.get_origin(arg) is tuple for arg in typing.get_args(annotation)):
        if not isinstance(value, (list, tuple)):
            errors.append(f"{where}: expected a list, got {value!r}")
            return current
        return tuple(value)
    return value


def _apply_overrides(section: str, obj: Any, overrides: Any, errors: List[str]) -> Any:
    if not isinstance(overrides, dict):
        errors.append(f"{section}: expected an object, got {overrides!r}")
        return obj
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in overrides.items():
        where = f"{section}.{key}"
        if key not in known:
            errors.append(f"{where}: unknown key")
            continue
        current = getattr(obj, key)
        nested_type = NESTED.get((section.split(".")[0], key))
        if nested_type is not None and value is not None:
            if is_dataclass(current):
                changes[key] = _apply_overrides(where, current, value, errors)
            else:
                changes[key] = _build_nested(where, nested_type, value, errors)
            continue
        changes[key] = _check_value(where, value, current, known[key].type, errors)
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        errors.append(f"{section}: {exc}")
        return obj


def _build_nested(where: str, cls, value: Any, errors: List[str]) -> Any:
    """Construct a nested block that the recipe leaves unset (e.g. bundling)."""
    if not isinstance(value, dict):
        errors.append(f"{where}: expected an object, got {value!r}")
        return None
    known = {f.name: f for f in fields(cls)}
    for key in sorted(set(value) - set(known)):
        errors.append(f"{where}.{key}: unknown key")
    missing = [name for name, f in known.items()
               if f.default is MISSING and f.default_factory is MISSING and name not in value]
    for name in missing:
        errors.append(f"{where}.{name}: required")
    if missing or set(value) - set(known):
        return None
    checked = {}
    for key, item in value.items():
        current = known[key].default if known[key].default is not MISSING else None
        checked[key] = _check_value(f"{where}.{key}", item, current, known[key].type, errors)
    return cls(**checked)


def apply_environment(recipe: ExperimentRecipe) -> ExperimentRecipe:
    seed = os.getenv("DITTO_SEED")
    if seed is None:
        return recipe
    try:
        value = int(seed)
    except ValueError as exc:
        raise ConfigError(f"DITTO_SEED must be an integer, got {seed!r}") from exc
    logger.info("DITTO_SEED=%d overrides every configured seed", value)
    return replace(recipe, data=replace(recipe.data, seed=value), model=replace(recipe.model, seed=value),
                   optimizer=replace(recipe.optimizer, seed=value))


def device() -> str:
    return os.getenv("DITTO_DEVICE", "cpu")


def resolve_config(raw: Dict[str, Any], recipe_name: Optional[str] = None) -> ExperimentRecipe:
    """Apply ``raw`` on top of its recipe and validate; every problem is reported at once."""
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(version, SCHEMA_VERSION)
    errors = [f"{key}: unknown key" for key in sorted(set(raw) - TOP_LEVEL_KEYS)]
    name = raw.get("recipe") or recipe_name or DEFAULT_RECIPE
    recipe = get_recipe(name)
    for section in SECTIONS:
        if section in raw:
            recipe = replace(recipe, **{section: _apply_overrides(section, getattr(recipe, section),
                                                                  raw[section], errors)})
    for key in ("dataset_path", "output_dir"):
        if key in raw:
            if raw[key] is not None and not isinstance(raw[key], str):
                errors.append(f"{key}: expected a string path, got {raw[key]!r}")
            else:
                recipe = replace(recipe, **{key: raw[key]})
    if errors:
        raise ConfigError("invalid config", errors)
    recipe = apply_environment(recipe)
    recipe.validate()
    return recipe


def validate_config(path: Union[str, Path], recipe_name: Optional[str] = None) -> ExperimentRecipe:
    """Normalized experiment for the config file at ``path``."""
    return resolve_config(load_config_file(path), recipe_name)


def echo(recipe: ExperimentRecipe) -> str:
    """The fully resolved config as JSON, loadable again by validate_config."""
    props = recipe.to_manifest_properties()
    props["recipe"] = props.pop("name")
    props.pop("description")
    return json.dumps(props, sort_keys=True, indent=2) + "\n"

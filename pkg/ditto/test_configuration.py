"""
Config files: recipe resolution, unknown keys, aggregated errors, environment overrides.
"""

import json

import pytest

from ditto.configuration import apply_environment, device, echo, load_config_file, resolve_config, validate_config
from ditto.errors import ConfigError, SchemaVersionError
from ditto.recipes import DEFAULT_RECIPE, RECIPES, get_recipe


@pytest.fixture(autouse=True)
def _clean_environment(monkeypatch):
    monkeypatch.delenv("DITTO_SEED", raising=False)
    monkeypatch.delenv("DITTO_DEVICE", raising=False)


def _write(tmp_path, payload) -> str:
    path = tmp_path / "config.json"
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload))
    return str(path)


def test_empty_file_resolves_to_the_default_recipe(tmp_path):
    assert load_config_file(_write(tmp_path, "")) == {}
    recipe = validate_config(_write(tmp_path, "  \n"))
    assert recipe == get_recipe(DEFAULT_RECIPE)
    assert json.loads(echo(recipe))["recipe"] == DEFAULT_RECIPE
    print("✓ Empty config echoes the preset")


def test_echo_is_loadable_again(tmp_path):
    for name in RECIPES:
        recipe = get_recipe(name)
        text = echo(recipe)
        assert "description" not in json.loads(text)
        assert validate_config(_write(tmp_path, text)) == recipe, name
    print("✓ Every recipe survives an echo round trip")


def test_overrides_are_applied():
    recipe = resolve_config({"recipe": "ns-re20", "optimizer": {"epochs": 3, "lr0": 1}, "output_dir": "runs/x"})
    assert recipe.name == "ns-re20"
    assert recipe.optimizer.epochs == 3
    assert recipe.optimizer.lr0 == 1.0 and isinstance(recipe.optimizer.lr0, float)
    assert recipe.output_dir == "runs/x"
    assert recipe.pde == get_recipe("ns-re20").pde


def test_recipe_argument_is_the_fallback():
    assert resolve_config({}, "wave2d").name == "wave2d"
    assert resolve_config({"recipe": "wave3d"}, "wave2d").name == "wave3d"


def test_unknown_keys_are_listed():
    with pytest.raises(ConfigError) as excinfo:
        resolve_config({"bogus": 1, "model": {"widht": 3}})
    assert "bogus: unknown key" in excinfo.value.errors
    assert "model.widht: unknown key" in excinfo.value.errors
    assert "unknown key" in str(excinfo.value)


def test_type_errors_are_aggregated():
    with pytest.raises(ConfigError) as excinfo:
        resolve_config({"optimizer": {"epochs": "ten", "lr0": True}, "data": {"ratios": 0.5}})
    assert len(excinfo.value.errors) == 3
    assert any("optimizer.epochs: expected an integer" in e for e in excinfo.value.errors)
    assert any("optimizer.lr0: expected a number" in e for e in excinfo.value.errors)
    assert any("data.ratios: expected a list" in e for e in excinfo.value.errors)


def test_alpha_out_of_range_names_the_rule():
    with pytest.raises(ConfigError) as excinfo:
        resolve_config({"training": {"alpha": 1.5}})
    assert "for some alpha < 1" in str(excinfo.value)


def test_bundling_window_is_checked():
    with pytest.raises(ConfigError) as excinfo:
        resolve_config({"recipe": "extrap-ns-lf-sweep", "training": {"bundling": {"lf": 0}}})
    assert "1 <= lf <= nt" in str(excinfo.value)


def test_bundling_block_can_be_added_to_a_subsample_recipe():
    recipe = resolve_config({"training": {"strategy": "bundled", "bundling": {"lf": 5, "nt": 50}}})
    assert recipe.training.bundling.lf == 5
    assert recipe.training.bundling.sub_trajectory_count == 46
    with pytest.raises(ConfigError) as excinfo:
        resolve_config({"training": {"strategy": "bundled", "bundling": {"lf": 5}}})
    assert "training.bundling.nt: required" in excinfo.value.errors


def test_cross_section_mismatch_is_rejected():
    with pytest.raises(ConfigError):
        resolve_config({"model": {"grid_shape": [64]}})
    with pytest.raises(ConfigError):
        resolve_config({"eval": {"resolutions": [30]}})


def test_schema_version_mismatch():
    with pytest.raises(SchemaVersionError) as excinfo:
        resolve_config({"schema_version": 2, "bogus": 1})
    assert excinfo.value.found == 2


def test_invalid_json_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        validate_config(_write(tmp_path, "{not json"))
    with pytest.raises(ConfigError):
        validate_config(_write(tmp_path, "[1, 2]"))
    with pytest.raises(ConfigError):
        validate_config(tmp_path / "missing.json")


def test_seed_environment_override(monkeypatch):
    monkeypatch.setenv("DITTO_SEED", "5")
    recipe = resolve_config({})
    assert (recipe.data.seed, recipe.model.seed, recipe.optimizer.seed) == (5, 5, 5)
    monkeypatch.setenv("DITTO_SEED", "five")
    with pytest.raises(ConfigError):
        apply_environment(get_recipe(DEFAULT_RECIPE))


def test_device_environment(monkeypatch):
    assert device() == "cpu"
    monkeypatch.setenv("DITTO_DEVICE", "cuda:1")
    assert device() == "cuda:1"


def test_every_recipe_validates():
    for name in RECIPES:
        get_recipe(name).validate()
    with pytest.raises(ConfigError):
        get_recipe("no-such-recipe")
    print(f"✓ {len(RECIPES)} recipes validate")


def test_get_recipe_returns_independent_copies():
    recipe = get_recipe(DEFAULT_RECIPE)
    recipe.optimizer.epochs = 1
    recipe.model.embedding.d_emb = 4
    fresh = get_recipe(DEFAULT_RECIPE)
    assert fresh.optimizer.epochs == RECIPES[DEFAULT_RECIPE].optimizer.epochs
    assert fresh.model.embedding == RECIPES[DEFAULT_RECIPE].model.embedding


if __name__ == "__main__":
    print("Running configuration tests...\n")
    test_every_recipe_validates()
    test_overrides_are_applied()
    print("\n✅ Configuration tests passed")

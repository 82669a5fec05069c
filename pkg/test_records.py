# test_records.py
import json
from pathlib import Path

import numpy as np
import pytest

from config import default_config, load_config, parse_config, snapshot
from curation import SelectionConfig, curate
from errors import ConfigurationError, SchemaValidationError, SchemaVersionError
from records import load_curated, load_dataset, read_jsonl, save_curated, save_dataset

DEMO = Path(__file__).parent / "configs" / "demo.json"


def test_dataset_file_reloads(tmp_path, tpl, clean_entry):
    path = save_dataset(tmp_path / "d.jsonl", [clean_entry])
    [entry] = load_dataset(path, tpl)
    assert entry.scene.subject_id == clean_entry.scene.subject_id
    assert np.array_equal(entry.observation.positions, clean_entry.observation.positions)
    assert np.array_equal(entry.predictions["body"].translation, clean_entry.predictions["body"].translation)
    assert entry.predictions["face"].translation is None


def test_curated_file_reloads(tmp_path, tpl, clean_entry):
    samples, _ = curate([clean_entry], tpl, SelectionConfig())
    [sample] = load_curated(save_curated(tmp_path / "c.jsonl", samples), tpl)
    assert np.array_equal(sample.pseudo.body.pose, samples[0].pseudo.body.pose)
    assert sample.provenance["step3_rmse_cm"] == pytest.approx(samples[0].provenance["step3_rmse_cm"])


def test_raw_and_curated_files_do_not_mix(tmp_path, tpl, clean_entry):
    raw = save_dataset(tmp_path / "d.jsonl", [clean_entry])
    with pytest.raises(SchemaValidationError, match="curated record"):
        load_curated(raw, tpl)


def test_unknown_record_type(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text('\n{"schema_version": 1, "type": "mystery", "subject_id": "a"}\n', encoding="utf-8")
    with pytest.raises(SchemaValidationError) as exc:
        read_jsonl(path)
    assert exc.value.line == 2


def test_scene_without_observation(tmp_path, tpl, clean_entry):
    path = save_dataset(tmp_path / "d.jsonl", [clean_entry])
    lines = [line for line in path.read_text().splitlines() if '"type":"observation"' not in line]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(SchemaValidationError, match="no observation"):
        load_dataset(path, tpl)


# --- config ---
def test_demo_config_loads():
    cfg = load_config(DEMO)
    assert cfg.seeds.master == 7
    assert cfg.selection.rmse_gate_cm == 1.5
    assert cfg.model_dims() == default_config().model_dims()


def test_config_rejects_unknown_keys_and_versions():
    with pytest.raises(ConfigurationError):
        parse_config({"schema_version": 1, "colour": "blue"})
    with pytest.raises(ConfigurationError):
        parse_config({"selection": {}})
    with pytest.raises(SchemaVersionError):
        parse_config({"schema_version": 9})


def test_overrides_are_validated():
    cfg = default_config().with_overrides(seed=11, threads=2)
    assert (cfg.seeds.master, cfg.threads) == (11, 2)
    with pytest.raises(ConfigurationError):
        default_config().with_overrides(threads=0)


def test_snapshot_reloads(tmp_path):
    cfg = load_config(DEMO)
    path = snapshot(cfg, tmp_path)
    assert parse_config(json.loads(path.read_text())) == cfg


def test_preset_spellings_resolve_to_the_same_dims():
    full = parse_config({"schema_version": 1, "dims": {"preset": "full"}})
    alias = parse_config({"schema_version": 1, "dims": {"preset": "paper"}})
    assert alias.dims.preset == "full"
    assert alias.model_dims() == full.model_dims()
    with pytest.raises(ConfigurationError):
        parse_config({"schema_version": 1, "dims": {"preset": "huge"}})


def test_direction_spellings_resolve_to_the_same_direction():
    alias = parse_config({"schema_version": 1, "ema": {"direction": "paper-text"}})
    assert alias.ema.direction == "teacher-learns"
    assert parse_config({"schema_version": 1, "ema": {"direction": "conventional"}}).ema.direction == "conventional"
    with pytest.raises(ConfigurationError):
        parse_config({"schema_version": 1, "ema": {"direction": "sideways"}})

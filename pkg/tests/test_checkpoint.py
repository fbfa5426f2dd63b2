import json
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pytest

from modac.checkpoint import MANIFEST_NAME, CheckpointError, load_checkpoint, save_checkpoint
from modac.nets import init_params, manager_spec, option_termination_spec
from modac.utils import derive_rng


def _sets():
    manager = init_params(manager_spec(2, 4, (5, 5), torso="mlp", mlp_hidden=(4,)), derive_rng(0, "m"))
    terms = init_params(option_termination_spec(2, (5, 5), torso="mlp", mlp_hidden=(4,)), derive_rng(0, "b"))
    return {"manager": manager, "terminations": terms}


def test_save_and_load_preserves_parameters(tmp_path):
    sets = _sets()
    save_checkpoint(tmp_path / "ckpt", sets, {"kind": "modac", "frames": 1200})
    loaded, metadata = load_checkpoint(tmp_path / "ckpt")
    assert metadata == {"kind": "modac", "frames": 1200}
    for key, params in sets.items():
        assert loaded[key].digest() == params.digest()
        assert loaded[key].spec == params.spec


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_tampered_blob_detected(tmp_path):
    save_checkpoint(tmp_path, _sets())
    blob = tmp_path / "manager.bin"
    data = bytearray(blob.read_bytes())
    data[0] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_unknown_format_rejected(tmp_path):
    save_checkpoint(tmp_path, _sets())
    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    manifest["format"] = 99
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)

import json

import numpy as np
import pytest

from moegt import checkpoint
from moegt.data import fit_scaler, generate_synthetic
from moegt.data.batching import EncodedDataset
from moegt.errors import DataError
from moegt.models import ModelConfig, build_model


@pytest.fixture(scope="module")
def scaler_and_data():
    events = generate_synthetic(30, 30, seed=51)
    scaler = fit_scaler(events)
    return scaler, EncodedDataset(events, scaler)


@pytest.mark.parametrize("kind", ["mgt", "gt", "mlp", "gcn"])
def test_round_trip_is_byte_stable_and_exact(kind, scaler_and_data, tmp_path):
    scaler, ds = scaler_and_data
    model = build_model(ModelConfig(kind=kind, hidden=16, expert_size=8, ffn_size=16), 2)
    model.params["head.b"].data[:] = [0.1, 1 / 3]
    ckpt = checkpoint.Checkpoint(model, scaler, {"seed": 2})
    path = checkpoint.save(ckpt, tmp_path / "a.json")
    back = checkpoint.load(path)
    checkpoint.save(back, tmp_path / "b.json")
    assert path.read_bytes() == (tmp_path / "b.json").read_bytes()
    assert list(back.model.params) == list(model.params)
    for name, t in model.params.items():
        assert np.array_equal(back.model.params[name].data, t.data)
    assert back.model.config == model.config and back.lineage == {"seed": 2}
    batch = ds.batch(np.arange(len(ds)))
    np.testing.assert_array_equal(back.model.forward(batch).logits.data, model.forward(batch).logits.data)


def test_document_is_self_describing(scaler_and_data):
    scaler, _ = scaler_and_data
    doc = json.loads(checkpoint.dumps(checkpoint.Checkpoint(build_model(ModelConfig(kind="mlp"), 0), scaler)))
    assert doc["format"] == "moegt-checkpoint" and doc["version"] == 1
    assert doc["params"]["fc1.w"]["shape"] == [70, 80]
    assert len(doc["params"]["fc1.w"]["data"]) == 70 * 80
    assert doc["config"]["kind"] == "mlp"


def test_load_errors(tmp_path, scaler_and_data):
    with pytest.raises(DataError, match="no such checkpoint"):
        checkpoint.load(tmp_path / "missing.json")
    (tmp_path / "junk.json").write_text("{nope")
    with pytest.raises(DataError, match="unreadable"):
        checkpoint.load(tmp_path / "junk.json")
    (tmp_path / "other.json").write_text('{"format": "something"}')
    with pytest.raises(DataError, match="not a checkpoint"):
        checkpoint.load(tmp_path / "other.json")
    scaler, _ = scaler_and_data
    doc = checkpoint.Checkpoint(build_model(ModelConfig(kind="gcn"), 0), scaler).to_dict()
    doc["params"]["conv1.w"]["shape"] = [3, 3]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(DataError, match="malformed"):
        checkpoint.load(tmp_path / "bad.json")

import json

import numpy as np
import pytest

from core.errors import CheckpointError
from managers.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from managers.training import TrainConfig, train

CONFIG = TrainConfig(steps=6, batch_size=2, warmup=2, seed=2)


@pytest.fixture
def trained(make_config, tiny_docs, tiny_vocab):
    return train(make_config(), CONFIG, tiny_docs, tiny_vocab, stop_at=3, max_len=16).checkpoint


def test_round_trip_keeps_every_tensor(trained, tmp_path):
    path = save_checkpoint(tmp_path / "ckpt", trained)
    loaded = load_checkpoint(path)
    assert loaded.step == 3 and loaded.moments.t == 3
    assert loaded.model_config == trained.model_config
    assert loaded.train_config == trained.train_config
    assert loaded.tokenizer == trained.tokenizer
    for name, p in trained.encoder.params.items():
        np.testing.assert_array_equal(loaded.encoder.params[name].data, p.data)
        np.testing.assert_array_equal(loaded.moments.m[name], trained.moments.m[name])
        np.testing.assert_array_equal(loaded.moments.v[name], trained.moments.v[name])


def test_manifest_layout(trained, tmp_path):
    path = save_checkpoint(tmp_path / "ckpt", trained)
    manifest = read_manifest(path)
    names = [entry["name"] for entry in manifest["tensors"]]
    params = list(trained.encoder.params)
    assert names == params + [f"adam.m/{n}" for n in params] + [f"adam.v/{n}" for n in params]
    offset = 0
    for entry in manifest["tensors"]:
        assert entry["offset"] == offset and entry["dtype"] == "f32"
        assert entry["nbytes"] == 4 * int(np.prod(entry["shape"]))
        offset += entry["nbytes"]
    assert (path / "tensors.bin").stat().st_size == offset
    assert manifest["variant"] == "dstg"
    assert manifest["rng"] == {"generator": "philox", "seed": 2}


def test_save_is_byte_stable(trained, tmp_path):
    a = save_checkpoint(tmp_path / "a", trained)
    b = save_checkpoint(tmp_path / "b", trained)
    for name in ("manifest.json", "tensors.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_resume_from_disk_matches_uninterrupted_run(trained, make_config, tiny_docs, tiny_vocab, tmp_path):
    straight = train(make_config(), CONFIG, tiny_docs, tiny_vocab, max_len=16)
    resumed = train(None, CONFIG, tiny_docs, tiny_vocab, resume=load_checkpoint(save_checkpoint(tmp_path / "c", trained)))
    assert [row[0] for row in resumed.losses] == [4, 5, 6]
    assert resumed.losses == straight.losses[3:]
    for name, p in straight.checkpoint.encoder.params.items():
        np.testing.assert_array_equal(resumed.checkpoint.encoder.params[name].data, p.data)
    assert resumed.checkpoint.step == 6


def _manifest(path):
    return json.loads((path / "manifest.json").read_text(encoding="utf-8"))


def test_version_mismatch(trained, tmp_path):
    path = save_checkpoint(tmp_path / "ckpt", trained)
    manifest = _manifest(path)
    manifest["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    with pytest.raises(CheckpointError, match="format version 99"):
        load_checkpoint(path)


def test_corrupt_manifest_and_missing_files(trained, tmp_path):
    with pytest.raises(CheckpointError, match="no manifest.json"):
        load_checkpoint(tmp_path / "empty")

    path = save_checkpoint(tmp_path / "ckpt", trained)
    (path / "manifest.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(CheckpointError, match="corrupt manifest"):
        load_checkpoint(path)

    path = save_checkpoint(tmp_path / "nobin", trained)
    (path / "tensors.bin").unlink()
    with pytest.raises(CheckpointError, match="no tensors.bin"):
        load_checkpoint(path)


def test_truncated_tensors(trained, tmp_path):
    path = save_checkpoint(tmp_path / "ckpt", trained)
    blob = (path / "tensors.bin").read_bytes()
    (path / "tensors.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path)


def test_shape_disagreeing_with_config(trained, tmp_path):
    path = save_checkpoint(tmp_path / "ckpt", trained)
    manifest = _manifest(path)
    manifest["model_config"]["d_sem"] = 16
    (path / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

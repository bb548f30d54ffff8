import json

import numpy as np
import pytest

from epamnet import EPAMNet
from epamnet.checkpoint import fnv1a64, load_checkpoint, read_manifest, save_checkpoint
from epamnet.errors import ContractError, ParseError
from epamnet.model import tiny_model_config


def test_fnv1a64_reference_vectors():
    assert f"{fnv1a64(b''):016x}" == "cbf29ce484222325"
    assert f"{fnv1a64(b'a'):016x}" == "af63dc4c8601ec8c"
    assert f"{fnv1a64(b'foobar'):016x}" == "85944171f73967e8"
    assert fnv1a64(b"bar", fnv1a64(b"foo")) == fnv1a64(b"foobar")


@pytest.fixture()
def model():
    m = EPAMNet(tiny_model_config(3), 0)
    for _, buf in m.named_buffers():
        buf[...] = np.random.default_rng(1).uniform(0.5, 1.5, buf.shape)
    return m


def test_round_trip_restores_params_and_buffers(model, tmp_path):
    checksum = save_checkpoint(model, tmp_path)
    manifest = read_manifest(tmp_path)
    assert manifest["checksum_fnv1a64"] == checksum and len(checksum) == 16
    kinds = {t["kind"] for t in manifest["tensors"]}
    assert kinds == {"param", "buffer"}
    other = EPAMNet(tiny_model_config(3), 7)
    assert load_checkpoint(other, tmp_path) == checksum
    for (n1, a), (n2, b) in zip(model.named_parameters(), other.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(a.data, b.data)
    for (_, a), (_, b) in zip(model.named_buffers(), other.named_buffers()):
        np.testing.assert_array_equal(a, b)
    # saving again gives the same checksum
    assert save_checkpoint(other, tmp_path / "again") == checksum


def test_tampered_blob_is_detected(model, tmp_path):
    save_checkpoint(model, tmp_path)
    blob = bytearray((tmp_path / "0003.btf").read_bytes())
    blob[-1] ^= 0x01
    (tmp_path / "0003.btf").write_bytes(bytes(blob))
    target = EPAMNet(tiny_model_config(3), 7)
    before = [p.data.copy() for p in target.parameters()]
    with pytest.raises(ParseError, match="checksum"):
        load_checkpoint(target, tmp_path)
    # nothing was copied
    for b, p in zip(before, target.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_architecture_mismatch(model, tmp_path):
    save_checkpoint(model, tmp_path)
    with pytest.raises(ContractError):
        load_checkpoint(EPAMNet(tiny_model_config(3, "alternative"), 0), tmp_path)
    with pytest.raises(ContractError, match="shape"):
        load_checkpoint(EPAMNet(tiny_model_config(4), 0), tmp_path)


def test_missing_or_broken_manifest(tmp_path, model):
    with pytest.raises(ParseError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{")
    with pytest.raises(ParseError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"tensors": []}))
    with pytest.raises(ParseError):
        load_checkpoint(model, tmp_path)

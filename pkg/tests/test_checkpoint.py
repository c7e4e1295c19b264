import struct
import zlib

import numpy as np
import pytest

from bpt import autodiff as ad
from bpt import checkpoint as ck
from bpt.model import BINARY, CLASSIFIER, DESCRIPTOR, FULL_PRECISION, ModelConfig, PointTransformer
from bpt.pointops import EmbedConfig, StageConfig


def tiny(head=DESCRIPTOR, twin=BINARY):
    embed = EmbedConfig((8,), (StageConfig(0.5, 4, 16),))
    return ModelConfig(twin=twin, head=head, d_model=16, num_classes=3, out_dim=32 if head == DESCRIPTOR else 24,
                       descriptor_dim=32, head_hidden=(8,), embed=embed, attention_threshold="median")


def trained_ish(head=DESCRIPTOR, twin=BINARY, seed=1):
    m = PointTransformer(tiny(head, twin), seed=seed)
    m.train()
    with ad.no_grad():
        m(np.random.default_rng(seed).normal(size=(4, 32, 3)))
    return m.eval()


def forward(m, x):
    with ad.no_grad():
        return m(x).data


X = np.random.default_rng(9).normal(size=(3, 32, 3))


@pytest.mark.parametrize("head", [CLASSIFIER, DESCRIPTOR])
@pytest.mark.parametrize("twin", [BINARY, FULL_PRECISION])
def test_training_roundtrip_is_byte_identical(tmp_path, head, twin):
    m = trained_ish(head, twin)
    first = ck.save(tmp_path / "a.bptc", m, meta={"epochs": 3})
    loaded, c = ck.load(tmp_path / "a.bptc")
    assert c.kind == ck.TRAINING and c.meta == {"epochs": 3}
    second = ck.save(tmp_path / "b.bptc", loaded, meta={"epochs": 3})
    assert first == second
    assert np.array_equal(forward(m, X), forward(loaded, X))


def test_deploy_roundtrip_and_equivalence(tmp_path):
    m = trained_ish()
    train_bytes = ck.save(tmp_path / "t.bptc", m)
    m.set_packed(True)
    expected = forward(m, X)
    deploy_bytes = ck.save(tmp_path / "d.bptc", m, deploy=True)
    assert len(deploy_bytes) < len(train_bytes)
    loaded, c = ck.load(tmp_path / "d.bptc")
    assert c.kind == ck.DEPLOY
    assert all(layer.weight is None and layer.use_packed for _, layer in loaded.binary_layers())
    assert np.array_equal(forward(loaded, X), expected)
    assert ck.save(tmp_path / "d2.bptc", loaded, deploy=True) == deploy_bytes
    with pytest.raises(ck.CheckpointError):
        ck.save(tmp_path / "t2.bptc", loaded)


def test_same_seed_same_bytes():
    a = ck.encode(ck.from_model(trained_ish(seed=4)))
    b = ck.encode(ck.from_model(trained_ish(seed=4)))
    c = ck.encode(ck.from_model(trained_ish(seed=5)))
    assert a == b and a != c


def _recrc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_corruption_is_detected():
    data = ck.encode(ck.from_model(trained_ish()))
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.decode(b"XXXX" + data[4:])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(ck.CheckpointError, match="checksum"):
        ck.decode(bytes(flipped))
    with pytest.raises(ck.CheckpointError):
        ck.decode(data[:-10])
    body = data[:-4]
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.decode(_recrc(body[:4] + struct.pack("<H", 9) + body[6:]))
    with pytest.raises(ck.CheckpointError, match="kind"):
        ck.decode(_recrc(body[:6] + b"\x07" + body[7:]))
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.decode(_recrc(body + b"\x00"))
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.decode(_recrc(body[:-3]))


def test_config_mismatch_is_rejected():
    c = ck.from_model(trained_ish())
    c.config["d_model"] = 32
    with pytest.raises(ck.CheckpointError):
        ck.to_model(c)
    c = ck.from_model(trained_ish())
    name = next(iter(c.tensors))
    del c.tensors[name]
    with pytest.raises(ck.CheckpointError):
        ck.to_model(c)
    c = ck.from_model(trained_ish())
    c.config["bogus"] = 1
    with pytest.raises(ck.CheckpointError):
        ck.to_model(c)


def test_missing_file(tmp_path):
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path / "none.bptc")

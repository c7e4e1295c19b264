import numpy as np
import pytest

from bpt import autodiff as ad
from bpt.autodiff import Tensor
from bpt.model import (
    BINARY,
    CLASSIFIER,
    DESCRIPTOR,
    FULL_PRECISION,
    ConfigError,
    ModelConfig,
    OffsetAttention,
    PointTransformer,
    desk_config,
    paper_config,
)
from bpt.nn import BinaryLinear, Linear
from bpt.pointops import EmbedConfig, StageConfig


def tiny(head=DESCRIPTOR, twin=BINARY, **kw):
    embed = EmbedConfig((8,), (StageConfig(0.5, 4, 16), StageConfig(0.5, 4, 16)))
    base = dict(twin=twin, head=head, d_model=16, num_classes=3, out_dim=32 if head == DESCRIPTOR else 24,
                descriptor_dim=32, head_hidden=(8,), embed=embed)
    base.update(kw)
    return ModelConfig(**base)


def clouds(n, pts=32, seed=0):
    return np.random.default_rng(seed).normal(size=(n, pts, 3))


def rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def warm(model, x):
    """One training-mode pass so BN running stats are not trivial."""
    model.train()
    with ad.no_grad():
        model(x)
    return model.eval()


# -- configuration ----------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(n_blocks=3)
    with pytest.raises(ConfigError):
        ModelConfig(head=DESCRIPTOR, out_dim=128)
    with pytest.raises(ConfigError):
        ModelConfig(twin="ternary")
    with pytest.raises(ConfigError):
        ModelConfig(attention_threshold="mean")
    with pytest.raises(ConfigError):
        ModelConfig(lane_width=16)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_config_roundtrip():
    cfg = desk_config(DESCRIPTOR, BINARY, attention_threshold="median")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_paper_config_defaults():
    cfg = paper_config(DESCRIPTOR)
    assert cfg.descriptor_dim == 256 and cfg.out_dim == 256
    assert cfg.d_model == 256 and cfg.n_blocks == 4
    assert paper_config(CLASSIFIER).out_dim == 1024


# -- structure -----------------------------------------------------------------------------


def test_concat_width():
    m = PointTransformer(desk_config(CLASSIFIER, BINARY))
    assert m.transformer.output_block.linear.in_dim == 4 * 64


def test_binarization_scope():
    b = PointTransformer(tiny(CLASSIFIER, BINARY), seed=5)
    f = PointTransformer(tiny(CLASSIFIER, FULL_PRECISION), seed=5)
    names = [n for n, _ in b.binary_layers()]
    assert names and all(n.startswith("transformer.") for n in names)
    # every linear inside the transformer module is binary in the binary twin
    for n, mod in b.named_modules():
        if n.startswith("transformer.") and isinstance(mod, Linear):
            pytest.fail(f"{n} is full precision in the binary twin")
    assert not f.binary_layers()
    bp, fp = dict(b.named_parameters()), dict(f.named_parameters())
    for n, p in fp.items():
        if not n.startswith("transformer."):
            assert np.array_equal(p.data, bp[n].data), n


def test_attention_projection_widths():
    m = PointTransformer(tiny(), seed=0)
    blk = m.transformer.blocks[0]
    assert (blk.q.out_dim, blk.k.out_dim, blk.v.out_dim) == (4, 4, 16)
    assert isinstance(blk.q, BinaryLinear)


# -- forward contracts ----------------------------------------------------------------------


def test_classify_shape_and_determinism():
    m = warm(PointTransformer(tiny(CLASSIFIER, BINARY)), clouds(4))
    x = clouds(1, seed=9)[0]
    a, b = m.classify_forward(x), m.classify_forward(x)
    assert a.shape == (3,)
    assert np.array_equal(a, b)
    with pytest.raises(ConfigError):
        m.describe_forward(x)


def test_descriptor_unit_norm_and_identical_inputs():
    m = warm(PointTransformer(tiny(DESCRIPTOR, BINARY)), clouds(4))
    x = clouds(1, seed=3)[0]
    d1, d2 = m.describe_forward(x), m.describe_forward(x.copy())
    assert d1.shape == (32,)
    assert abs(np.linalg.norm(d1) - 1) <= 1e-9
    assert np.array_equal(d1, d2)


@pytest.mark.parametrize("twin", [BINARY, FULL_PRECISION])
@pytest.mark.parametrize("head", [CLASSIFIER, DESCRIPTOR])
def test_permutation_robust_at_fixed_sampling(twin, head):
    x = clouds(1, seed=11)[0]
    perm = np.random.default_rng(0).permutation(len(x))
    base = warm(PointTransformer(tiny(head, twin), seed=2), clouds(4))
    # the FPS seed moves with the point it referred to
    moved = PointTransformer(tiny(head, twin, seed_index=int(np.argmax(perm == 0))), seed=2)
    for (_, a), (_, b) in zip(base.named_parameters(), moved.named_parameters()):
        b.data[...] = a.data
    for (_, a), (_, b) in zip(base.named_buffers(), moved.named_buffers()):
        b[...] = a
    moved.eval()
    out_a = base.describe_forward(x) if head == DESCRIPTOR else base.classify_forward(x)
    out_b = moved.describe_forward(x[perm]) if head == DESCRIPTOR else moved.classify_forward(x[perm])
    assert np.abs(out_a - out_b).max() <= 1e-6


# -- two-path equivalence --------------------------------------------------------------------


@pytest.mark.parametrize("opts", [
    {},
    {"attention_threshold": "median"},
    {"lane_width": 32, "alpha_granularity": "tensor"},
    {"attention_threshold": 0.05},
])
def test_packed_equals_dense_expansion(opts):
    m = warm(PointTransformer(tiny(DESCRIPTOR, BINARY, **opts), seed=1), clouds(6))
    x = clouds(5, seed=4)
    m.set_packed(False)
    with ad.no_grad():
        dense = m(x).data
    m.set_packed(True)
    with ad.no_grad():
        packed = m(x).data
    assert rel(packed, dense) <= 1e-6


def test_freeze_packs_every_binary_layer():
    m = PointTransformer(tiny(CLASSIFIER, BINARY), seed=1).freeze()
    assert not m.training
    assert all(layer.packed is not None and layer.use_packed for _, layer in m.binary_layers())


def test_training_mode_uses_dense_path_with_gradients():
    m = PointTransformer(tiny(CLASSIFIER, BINARY), seed=1)
    m.set_packed(True)
    m.train()
    out = m(clouds(3))
    ad.backward(ad.sum_(ad.square(out)))
    grads = [layer.weight.grad for _, layer in m.binary_layers()]
    assert all(g is not None for g in grads)


# -- transformer internals --------------------------------------------------------------------


def test_single_point_attention_is_identity_weighting():
    rng = np.random.default_rng(0)
    blk = OffsetAttention(8, rng, binary=False).eval()
    x = Tensor(rng.uniform(0, 1, size=(2, 1, 8)))
    att, v = blk.attention(x)
    assert np.allclose(att.data, 1.0)
    expected = ad.add(x, blk.trans(ad.sub(x, v)))
    assert np.allclose(blk(x).data, expected.data)


def test_fixed_half_threshold_zeroes_binary_attention():
    """Entries along the L1-normalised axis average 1/M, so 0.5 keeps none."""
    rng = np.random.default_rng(1)
    blk = OffsetAttention(16, rng, binary=True, attention_threshold=0.5).eval()
    x = Tensor(rng.uniform(0, 1, size=(2, 8, 16)))
    att, _ = blk.attention(x)
    assert att.data.max() < 0.5
    assert np.allclose(blk(x).data, ad.add(x, blk.trans(x)).data)
    med = OffsetAttention(16, np.random.default_rng(1), binary=True, attention_threshold="median").eval()
    assert not np.allclose(med(x).data, ad.add(x, med.trans(x)).data)


def _np_lbr(x, lbr):
    y = x @ lbr.linear.weight.data.T
    bn = lbr.bn
    y = (y - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.gamma.data + bn.beta.data
    return np.maximum(y, 0)


def test_full_precision_module_matches_hand_composition():
    rng = np.random.default_rng(1)
    m = warm(PointTransformer(tiny(DESCRIPTOR, FULL_PRECISION), seed=3), clouds(4))
    t = m.transformer
    x = rng.normal(size=(2, 8, 16))
    h = _np_lbr(_np_lbr(x, t.input_block[0]), t.input_block[1])
    outs = []
    for blk in t.blocks:
        q = h @ blk.q.weight.data.T
        k = h @ blk.k.weight.data.T
        v = h @ blk.v.weight.data.T
        e = q @ np.swapaxes(k, 1, 2)
        a = np.exp(e - e.max(-1, keepdims=True))
        a = a / a.sum(-1, keepdims=True)
        a = a / (1e-9 + a.sum(1, keepdims=True))
        xr = np.swapaxes(a, 1, 2) @ v
        h = h + _np_lbr(h - xr, blk.trans)
        outs.append(h)
    ref = _np_lbr(np.concatenate(outs, -1), t.output_block)
    with ad.no_grad():
        got = t(Tensor(x)).data
    assert np.allclose(got, ref, rtol=1e-10, atol=1e-12)

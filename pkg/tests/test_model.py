import numpy as np
import pytest

from banet import autograd as ad
from banet import backbone as B
from banet import fusion as FU
from banet.config import FUSION_MODES, BackboneConfig, preset
from banet.model import BANet, infer_config
from banet.tensor import DEFAULT_EPS, InvalidArgument
from banet.texture import texture_forward
from banet.weights import Scope, WeightStore

import oracles


def run(fn, *inputs, store=None, seed=0, hooks=None, dtype=np.float64):
    """Evaluate `fn(scope, *nodes)` in inference mode, creating missing weights."""
    store = WeightStore(dtype=dtype) if store is None else store
    sc = Scope(store, rng=np.random.default_rng(seed), hooks=hooks)
    with ad.no_grad():
        out = fn(sc, *[ad.constant(np.asarray(x, dtype)) for x in inputs])
    return out, store


def randomize(store, rng, scale=0.5):
    for name in store:
        if not name.endswith(("running_mean", "running_var")):
            store[name] = rng.normal(scale=scale, size=store[name].shape)


NEUTRAL_VAR = 1.0 - DEFAULT_EPS   # BN eval with this running var is the identity


# --------------------------------------------------------------------------- dependency path

def test_stem_shapes_and_zero_input():
    y, _ = run(lambda sc, x: B.stem(x, sc), np.zeros((1, 3, 64, 64)))
    assert y.shape == (1, 64, 16, 16)
    assert (y.value == 0).all()


def test_stem_indivisible():
    with pytest.raises(InvalidArgument):
        run(lambda sc, x: B.stem(x, sc), np.zeros((1, 3, 30, 30)))


def _embed_oracle(x, store):
    xp = oracles.conv2d(x, store["conv.weight"], None, 2, 1)[0]
    rm, rv = store["bn.running_mean"], store["bn.running_var"]
    xp = ((xp - rm[:, None, None]) / np.sqrt(rv[:, None, None] + DEFAULT_EPS)
          * store["bn.weight"][:, None, None] + store["bn.bias"][:, None, None])
    gate = oracles.conv2d(xp[None], store["gate.weight"], store["gate.bias"], 1, 1, groups=xp.shape[0])[0]
    return xp, 1.0 / (1.0 + np.exp(-gate))


def test_patch_embed_shape_and_half_gate():
    rng = np.random.default_rng(0)
    y, store = run(lambda sc, x: B.patch_embed(x, sc), np.zeros((1, 64, 32, 32)))
    assert y.shape == (1, 128, 16, 16)
    x = rng.normal(size=(1, 4, 8, 8))
    _, store = run(lambda sc, x: B.patch_embed(x, sc), x)
    store["gate.weight"] = np.zeros_like(store["gate.weight"])
    store["gate.bias"] = np.zeros_like(store["gate.bias"])
    y, _ = run(lambda sc, x: B.patch_embed(x, sc), x, store=store)
    xp, _ = _embed_oracle(x, store)
    np.testing.assert_allclose(y.value[0], 0.5 * xp, atol=1e-10)


def test_patch_embed_matches_oracle_composition():
    rng = np.random.default_rng(1)
    for _ in range(3):
        x = rng.normal(size=(1, 3, 6, 6))
        _, store = run(lambda sc, x: B.patch_embed(x, sc), x)
        randomize(store, rng)
        store["bn.running_mean"] = rng.normal(size=6)
        store["bn.running_var"] = rng.uniform(0.5, 2, size=6)
        y, _ = run(lambda sc, x: B.patch_embed(x, sc), x, store=store)
        xp, gate = _embed_oracle(x, store)
        np.testing.assert_allclose(y.value[0], gate * xp, atol=1e-5)


def test_emsa_single_token_is_projected_zero():
    rng = np.random.default_rng(2)
    fn = lambda sc, t: B.emsa(t, (1, 1), 1, 1, sc)
    t = rng.normal(size=(1, 1, 4))
    _, store = run(fn, t)
    randomize(store, rng)
    y, _ = run(fn, t, store=store)
    # softmax over one key is 1, and instance norm of a 1x1 map is 0
    np.testing.assert_allclose(y.value[0, 0], store["proj.bias"], atol=1e-12)


def test_emsa_shapes_and_row_stochastic_softmax():
    maps = []
    fn = lambda sc, t: B.emsa(t, (16, 16), 4, 2, sc)
    t = np.random.default_rng(3).normal(size=(1, 256, 64))
    y, _ = run(fn, t, hooks={"attention": lambda prefix, a: maps.append(a)})
    assert y.shape == (1, 256, 64)
    assert len(maps) == 1 and maps[0].shape == (1, 4, 256, 64)
    np.testing.assert_allclose(maps[0].sum(axis=-1), 1.0, atol=1e-6)


def test_emsa_orders_differ_and_both_normalize():
    rng = np.random.default_rng(4)
    t = rng.normal(size=(2, 16, 8))
    _, store = run(lambda sc, t: B.emsa(t, (4, 4), 2, 2, sc), t)
    randomize(store, rng)
    outs = {}
    for order in ("literal", "norm_first"):
        maps = []
        y, _ = run(lambda sc, t: B.emsa(t, (4, 4), 2, 2, sc, order), t, store=store,
                   hooks={"attention": lambda p, a: maps.append(a)})
        np.testing.assert_allclose(maps[0].sum(axis=-1), 1.0, atol=1e-6)
        outs[order] = y.value
    assert not np.allclose(outs["literal"], outs["norm_first"])


def test_emsa_rejects_bad_grid():
    with pytest.raises(InvalidArgument, match="grid"):
        run(lambda sc, t: B.emsa(t, (3, 5), 1, 1, sc), np.zeros((1, 16, 4)))


def test_block_identity_with_zeroed_output_layers():
    rng = np.random.default_rng(5)
    t = rng.normal(size=(1, 64, 32))
    fn = lambda sc, t: B.transformer_block(t, (8, 8), sc, 2, 2)
    y, store = run(fn, t)
    assert y.shape == (1, 64, 32)
    randomize(store, rng)
    for name in ("emsa.proj.weight", "emsa.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias"):
        store[name] = np.zeros_like(store[name])
    y, _ = run(fn, t, store=store)
    np.testing.assert_array_equal(y.value, t)


def test_backbone_toy_shapes_and_determinism():
    cfg = preset("toy").backbone
    x = np.random.default_rng(6).normal(size=(1, 3, 64, 64))
    feats, store = run(lambda sc, x: B.backbone_forward(x, sc, cfg), x, dtype=np.float32)
    assert feats.ldf3.shape == (1, 64, 4, 4) and feats.ldf4.shape == (1, 128, 2, 2)
    for i, s in enumerate(feats.stages):
        assert s.shape == (1, cfg.stage_dims[i], 64 // (4 * 2 ** i), 64 // (4 * 2 ** i))
    again, _ = run(lambda sc, x: B.backbone_forward(x, sc, cfg), x, store=store, dtype=np.float32)
    np.testing.assert_array_equal(again.ldf4.value, feats.ldf4.value)


def test_backbone_requires_multiple_of_32():
    with pytest.raises(InvalidArgument):
        run(lambda sc, x: B.backbone_forward(x, sc, BackboneConfig()), np.zeros((1, 3, 48, 48)))


# --------------------------------------------------------------------------- texture path

def test_texture_shape_and_nonnegative():
    x = np.random.default_rng(7).normal(size=(1, 3, 64, 64))
    y, _ = run(lambda sc, x: texture_forward(x, sc), x)
    assert y.shape == (1, 128, 8, 8) and (y.value >= 0).all()
    with pytest.raises(InvalidArgument):
        run(lambda sc, x: texture_forward(x, sc), np.zeros((1, 3, 20, 20)))


# --------------------------------------------------------------------------- linear attention

def _qkv(x, store):
    c = lambda n: oracles.conv2d(x, store[f"{n}.weight"], store[f"{n}.bias"])[0].reshape(-1, x.shape[2] * x.shape[3])
    return c("q"), c("k"), c("v")


def test_linear_attention_single_position_returns_v():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 8, 1, 1))
    _, store = run(lambda sc, x: FU.linear_attention(x, sc), x)
    randomize(store, rng)
    y, _ = run(lambda sc, x: FU.linear_attention(x, sc), x, store=store)
    np.testing.assert_allclose(y.value.reshape(8, 1), _qkv(x, store)[2], rtol=1e-12)


def test_linear_attention_orthogonal_query_gives_mean():
    rng = np.random.default_rng(9)
    q = np.zeros((1, 3, 5))
    q[0, 0] = rng.uniform(0.5, 2, 5)
    k = np.concatenate([np.zeros((1, 1, 5)), rng.normal(size=(1, 2, 5))], axis=1)
    v = rng.normal(size=(1, 4, 5))
    out = FU.linear_attention_factored(q, k, v)
    np.testing.assert_allclose(out, np.repeat(v.mean(axis=2, keepdims=True), 5, axis=2), atol=1e-12)


def test_linear_attention_module_matches_quadratic_oracle():
    rng = np.random.default_rng(10)
    for _ in range(5):
        x = rng.normal(size=(1, 4, 3, 3))
        _, store = run(lambda sc, x: FU.linear_attention(x, sc, 2), x)
        randomize(store, rng)
        y, _ = run(lambda sc, x: FU.linear_attention(x, sc, 2), x, store=store)
        expect, _ = oracles.linear_attention(*_qkv(x, store))
        np.testing.assert_allclose(y.value.reshape(4, 9), expect, atol=1e-5)


def test_linear_attention_is_convex_combination():
    rng = np.random.default_rng(11)
    for _ in range(20):
        length = int(rng.integers(1, 65))
        q, k = rng.normal(size=(2, 1, 3, length))
        v = rng.normal(size=(1, 5, length))
        w = FU.linear_attention_weights(q, k)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=2), 1.0, atol=1e-5)
        out = FU.linear_attention_factored(q, k, v)
        assert (out >= v.min(axis=2, keepdims=True) - 1e-9).all()
        assert (out <= v.max(axis=2, keepdims=True) + 1e-9).all()


def test_linear_attention_zero_input_is_finite():
    y, _ = run(lambda sc, x: FU.linear_attention(x, sc), np.zeros((1, 8, 2, 2)))
    assert np.isfinite(y.value).all()


# --------------------------------------------------------------------------- LAM / AEM / FAM

def _neutral_bn(store, prefix, c):
    store[f"{prefix}bn.weight"] = np.ones(c)
    store[f"{prefix}bn.bias"] = np.zeros(c)
    store[f"{prefix}bn.running_mean"] = np.zeros(c)
    store[f"{prefix}bn.running_var"] = np.full(c, NEUTRAL_VAR)


def test_lam_identity_conv_is_relu_of_la():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 8, 3, 3))
    _, store = run(lambda sc, x: FU.lam(x, 8, sc), x)
    randomize(store, rng)
    store["conv.weight"] = np.eye(8).reshape(8, 8, 1, 1)
    _neutral_bn(store, "", 8)
    y, _ = run(lambda sc, x: FU.lam(x, 8, sc), x, store=store)
    la, _ = run(lambda sc, x: FU.linear_attention(x, sc / "la"), x, store=store)
    np.testing.assert_allclose(y.value, np.maximum(la.value, 0), atol=1e-12)


def test_lam_shape_and_sign():
    x = np.random.default_rng(13).normal(size=(1, 512, 16, 16))
    y, _ = run(lambda sc, x: FU.lam(x, 256, sc), x, dtype=np.float32)
    assert y.shape == (1, 256, 16, 16) and (y.value >= 0).all()


def _gate_constant(store, prefix, c, value):
    store[f"{prefix}conv.weight"] = np.zeros_like(store[f"{prefix}conv.weight"])
    _neutral_bn(store, prefix, c)
    store[f"{prefix}bn.bias"] = np.full(c, value)


@pytest.mark.parametrize("value, factor", [(0.0, 1.0), (1.0, 2.0)])
def test_aem_gate_identities(value, factor):
    rng = np.random.default_rng(14)
    ldf3, ldf4 = rng.normal(size=(1, 8, 4, 4)), rng.normal(size=(1, 16, 2, 2))
    fn = lambda sc, a, b: FU.aem(a, b, sc)
    _, store = run(fn, ldf3, ldf4)
    randomize(store, rng)
    _gate_constant(store, "lam.", 8, value)
    y, _ = run(fn, ldf3, ldf4, store=store)
    np.testing.assert_array_equal(y.value, factor * ldf3)


def test_aem_default_shapes():
    rng = np.random.default_rng(15)
    y, _ = run(lambda sc, a, b: FU.aem(a, b, sc), rng.normal(size=(1, 256, 32, 32)),
               rng.normal(size=(1, 512, 16, 16)), dtype=np.float32)
    assert y.shape == (1, 256, 32, 32)


def _fam_inputs(rng):
    return rng.normal(size=(1, 6, 8, 8)), rng.normal(size=(1, 4, 4, 4)), rng.normal(size=(1, 8, 2, 2))


def test_fam_unit_gate_returns_af():
    rng = np.random.default_rng(16)
    ins = _fam_inputs(rng)
    fn = lambda sc, t, a, b: FU.fam(t, a, b, sc, 2)
    _, store = run(fn, *ins)
    randomize(store, rng)
    _gate_constant(store, "lam.", 10, 1.0)
    seen = {}
    y, _ = run(fn, *ins, store=store, hooks={"af": lambda p, v: seen.setdefault("af", v)})
    assert seen["af"].shape == (1, 10, 8, 8)
    np.testing.assert_array_equal(y.value, seen["af"])


def test_fam_matches_module_composition():
    rng = np.random.default_rng(17)
    tf, ldf3, ldf4 = _fam_inputs(rng)
    fn = lambda sc, t, a, b: FU.fam(t, a, b, sc, 2)
    _, store = run(fn, tf, ldf3, ldf4)
    randomize(store, rng)
    y, _ = run(fn, tf, ldf3, ldf4, store=store)
    merged, _ = run(lambda sc, a, b: FU.aem(a, b, sc / "aem", 2), ldf3, ldf4, store=store)
    up = np.stack([oracles.bilinear_up(ch, 2) for ch in merged.value[0]])
    af = np.concatenate([up, tf[0]])[None]
    gate, _ = run(lambda sc, a: FU.lam(a, 10, sc / "lam", 2), af, store=store)
    np.testing.assert_allclose(y.value, af * gate.value, atol=1e-5)


# --------------------------------------------------------------------------- head and network

def test_seg_head_shape():
    x = np.random.default_rng(18).normal(size=(1, 384, 64, 64))
    y, _ = run(lambda sc, x: FU.seg_head(x, 6, sc), x, dtype=np.float32)
    assert y.shape == (1, 6, 512, 512)


def test_predict_ties_go_to_lowest_index():
    model = BANet.initialize(preset("micro"), seed=0)
    model.weights["head.cls.weight"] = np.zeros_like(model.weights["head.cls.weight"])
    model.weights["head.cls.bias"] = np.array([0.0, 0.0, 0.0])
    x = np.random.default_rng(0).normal(size=(1, 3, 32, 32))
    assert (model.predict(x) == 0).all()
    model.weights["head.cls.bias"] = np.array([0.0, 2.0, 2.0])
    assert (model.predict(x) == 1).all()


@pytest.fixture(scope="module")
def toy_models():
    return {m: BANet.initialize(preset("toy").replace(fusion={"fusion_mode": m}), seed=0)
            for m in FUSION_MODES}


def test_all_modes_full_resolution_and_distinct(toy_models):
    x = np.random.default_rng(19).normal(size=(2, 3, 64, 64)).astype(np.float32)
    logits = {m: model.predict_logits(x) for m, model in toy_models.items()}
    for m, z in logits.items():
        assert z.shape == (2, 4, 64, 64), m
    modes = list(logits)
    for i, a in enumerate(modes):
        for b in modes[i + 1:]:
            assert not np.allclose(logits[a], logits[b]), (a, b)


def test_batch_permutation_equivariance(toy_models):
    rng = np.random.default_rng(20)
    x = rng.normal(size=(3, 3, 32, 32)).astype(np.float32)
    perm = np.array([2, 0, 1])
    model = toy_models["fam"]
    np.testing.assert_allclose(model.predict_logits(x[perm]), model.predict_logits(x)[perm],
                               rtol=1e-5, atol=1e-5)


def test_infer_config_round_trip(toy_models):
    for mode, model in toy_models.items():
        assert infer_config(model.weights) == model.config, mode
    micro = preset("micro")
    assert infer_config(BANet.initialize(micro).weights) == micro


def test_infer_config_rejects_foreign_store():
    with pytest.raises(InvalidArgument):
        infer_config(WeightStore([("x.weight", np.zeros(2))]))

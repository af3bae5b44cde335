import numpy as np
import pytest

from a2fpn.aam_head import (
    A2FPN,
    AttentionAggregation,
    ClassifierHead,
    ModelVariant,
    a2fpn_forward,
    aam_forward,
    ablation_forward,
    build_model,
    classifier_head,
)
from a2fpn.autodiff import Adam, Tape, Tensor, finite_difference_check, no_grad
from a2fpn.autodiff import functional as F
from a2fpn.autodiff.init import make_rng
from a2fpn.backbone_fpn import (
    Backbone,
    BackboneConfig,
    FeaturePyramid,
    backbone_forward,
    lateral_project,
    scale_to_finest,
    smooth_3x3,
    topdown_merge,
)
from a2fpn.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from a2fpn.data.synth import SceneSpec, generate_scene
from a2fpn.errors import ConfigurationError, DimensionError, FormatError
from a2fpn.layers import Conv2d, ConvBNReLU
from a2fpn.selftest import tiny_variant

SMALL = BackboneConfig(stem_channels=8, stage_channels=(8, 8, 16, 16), blocks_per_stage=1, pyramid_channels=8)


def image(b=1, h=64, w=64, seed=0):
    return Tensor(make_rng(seed).standard_normal((b, 3, h, w)))


# ---------------------------------------------------------------- backbone


def test_backbone_extents_at_64():
    feats = backbone_forward(image(), Backbone(make_rng(0), BackboneConfig()))
    assert [f.shape[2:] for f in feats] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert [f.shape[1] for f in feats] == [16, 32, 64, 128]


def test_backbone_zero_input_is_finite():
    with no_grad():
        feats = backbone_forward(Tensor(np.zeros((2, 3, 64, 64))), Backbone(make_rng(0), SMALL))
    assert all(np.isfinite(f.data).all() for f in feats)


def test_backbone_doubling_height_doubles_maps():
    bb = Backbone(make_rng(0), SMALL)
    short = backbone_forward(image(h=64, w=32), bb)
    tall = backbone_forward(image(h=128, w=32), bb)
    for a, b in zip(short, tall):
        assert b.shape[2] == 2 * a.shape[2] and b.shape[3] == a.shape[3]


def test_backbone_rejects_indivisible_extent():
    with pytest.raises(ConfigurationError):
        backbone_forward(image(h=48, w=64), Backbone(make_rng(0), SMALL))


def test_backbone_config_validation():
    with pytest.raises(ConfigurationError):
        BackboneConfig(stage_channels=(8, 8, 8))


# ---------------------------------------------------------------- pyramid ops


def test_lateral_project_channels_and_matmul_oracle():
    conv = Conv2d(make_rng(1), 6, 4, 1)
    c = Tensor(make_rng(2).standard_normal((1, 6, 3, 5)))
    out = lateral_project(c, conv).data
    assert out.shape == (1, 4, 3, 5)
    w, b = conv.weight.data[:, :, 0, 0], conv.bias.data
    expected = np.einsum("oc,bchw->bohw", w, c.data) + b[None, :, None, None]
    np.testing.assert_allclose(out, expected, rtol=1e-13)


def test_topdown_merge_identities():
    upper = Tensor(make_rng(3).standard_normal((1, 2, 2, 2)))
    lateral = Tensor(make_rng(4).standard_normal((1, 2, 4, 4)))
    np.testing.assert_array_equal(topdown_merge(Tensor(np.zeros((1, 2, 2, 2))), lateral).data, lateral.data)
    np.testing.assert_array_equal(
        topdown_merge(upper, Tensor(np.zeros((1, 2, 4, 4)))).data, F.upsample_nearest2x(upper).data
    )


def test_topdown_merge_block_replication_oracle():
    upper = make_rng(5).standard_normal((2, 2))
    lateral = make_rng(6).standard_normal((4, 4))
    expected = np.array([[upper[i // 2, j // 2] + lateral[i, j] for j in range(4)] for i in range(4)])
    got = topdown_merge(Tensor(upper.reshape(1, 1, 2, 2)), Tensor(lateral.reshape(1, 1, 4, 4))).data[0, 0]
    np.testing.assert_array_equal(got, expected)


def test_topdown_merge_mismatch():
    with pytest.raises(DimensionError):
        topdown_merge(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 5, 4))))


@pytest.mark.parametrize("hw", [(1, 1), (3, 7), (16, 16)])
def test_smooth_preserves_shape(hw):
    conv = Conv2d(make_rng(7), 4, 4, 3)
    assert smooth_3x3(Tensor(np.ones((1, 4) + hw)), conv).shape == (1, 4) + hw


def test_smooth_zero_weights():
    conv = Conv2d(make_rng(7), 4, 4, 3)
    conv.weight.data[:] = 0
    out = smooth_3x3(Tensor(make_rng(8).standard_normal((1, 4, 5, 5))), conv)
    assert not out.data.any()


def test_smooth_direct_loop_oracle():
    conv = Conv2d(make_rng(9), 2, 3, 3)
    conv.bias.data[:] = make_rng(10).standard_normal(3)
    x = make_rng(11).standard_normal((1, 2, 4, 4))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                expected[0, o, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * conv.weight.data[o]) + conv.bias.data[o]
    np.testing.assert_allclose(smooth_3x3(Tensor(x), conv).data, expected, rtol=1e-12)


def test_scale_to_finest_extent_and_channels():
    block = ConvBNReLU(make_rng(12), 8, 8, 3).eval()
    s5 = scale_to_finest(Tensor(make_rng(13).standard_normal((1, 8, 2, 2))), 5, block)
    assert s5.shape == (1, 8, 16, 16)
    with pytest.raises(ConfigurationError):
        scale_to_finest(Tensor(np.zeros((1, 8, 2, 2))), 6, block)


def test_scale_to_finest_constant_propagation():
    block = ConvBNReLU(make_rng(14), 3, 3, 3).eval()
    block.bn.state.running_mean[:] = [0.1, -0.2, 0.0]
    p = Tensor(np.full((1, 3, 4, 4), 0.7))
    out = scale_to_finest(p, 3, block).data
    # interior pixels see a full 3x3 window of the constant, so they equal the affine map of it
    w = block.conv.weight.data.sum(axis=(2, 3)) @ np.full(3, 0.7)
    bn = block.bn
    expected = np.maximum(
        bn.gamma.data * (w - bn.state.running_mean) / np.sqrt(bn.state.running_var + 1e-5) + bn.beta.data, 0.0
    )
    interior = out[0, :, 2:6, 2:6]
    np.testing.assert_allclose(interior, np.broadcast_to(expected[:, None, None], interior.shape), rtol=1e-12, atol=1e-15)


def test_pyramid_invariants():
    cfg = SMALL
    feats = backbone_forward(image(), Backbone(make_rng(0), cfg))
    maps = FeaturePyramid(make_rng(1), cfg)(feats)
    maps.validate(cfg.pyramid_channels)
    assert len(maps.S) == 4
    for c, p in zip(maps.C, maps.P):
        assert c.shape[2:] == p.shape[2:] and p.shape[1] == 8
    for s in maps.S:
        assert s.shape == (1, 8, 16, 16)


def test_gradient_reaches_every_backbone_and_pyramid_weight():
    rng = make_rng(0)
    bb, fp = Backbone(rng, SMALL), FeaturePyramid(rng, SMALL)
    x = image(b=2, seed=1)
    proj = [Tensor(make_rng(10 + i).standard_normal((2, 8, 16, 16))) for i in range(4)]
    params = bb.parameters() + fp.parameters()
    with Tape() as tape:
        maps = fp(backbone_forward(x, bb))
        loss = F.sum(F.concat_channels([F.mul(s, p) for s, p in zip(maps.S, proj)]))
    grads = tape.backward(loss, params=params)
    named = [n for n, _ in bb.named_parameters()] + [n for n, _ in fp.named_parameters()]
    dead = [n for n, g in zip(named, grads) if not np.any(g)]
    assert dead == []


# ---------------------------------------------------------------- attention aggregation and head


def s_maps(d_p=4, hw=4, seed=0):
    rng = make_rng(seed)
    return [Tensor(rng.standard_normal((1, d_p, hw, hw))) for _ in range(4)]


def test_aam_output_shape():
    aam = AttentionAggregation(make_rng(0), 4)
    assert aam_forward(s_maps(), aam).shape == (1, 16, 4, 4)


def test_aam_zero_value_projection_gives_residual_identity():
    aam = AttentionAggregation(make_rng(0), 4)
    aam.fuse.weight.data[:] = 0
    aam.lam.value.weight.data[:] = 0
    aam.lam.value.bias.data[:] = 0
    maps = s_maps()
    np.testing.assert_array_equal(aam_forward(maps, aam).data, F.concat_channels(maps).data)


def test_aam_mismatched_maps():
    maps = s_maps()
    maps[2] = Tensor(np.zeros((1, 4, 2, 2)))
    with pytest.raises(DimensionError):
        aam_forward(maps, AttentionAggregation(make_rng(0), 4))


def test_aam_gradient_nonzero_for_each_map_and_matches_fd():
    aam = AttentionAggregation(make_rng(1), 2)
    maps = s_maps(d_p=2, hw=3, seed=2)
    proj = Tensor(make_rng(3).standard_normal((1, 8, 3, 3)))
    for m in maps:
        m.requires_grad = True
    with Tape() as tape:
        loss = F.sum(F.mul(aam_forward(maps, aam), proj))
    tape.backward(loss)
    assert all(np.any(m.grad) for m in maps)
    err = finite_difference_check(lambda *ms: F.sum(F.mul(aam_forward(list(ms), aam), proj)), maps)
    assert err < 1e-4


def test_classifier_head_shapes_and_shift_invariance():
    head = ClassifierHead(make_rng(0), 8, 1)
    x = Tensor(make_rng(1).standard_normal((2, 8, 4, 4)))
    assert classifier_head(x, head).shape == (2, 1, 16, 16)
    head3 = ClassifierHead(make_rng(0), 8, 3)
    logits = classifier_head(x, head3).data
    np.testing.assert_array_equal(np.argmax(logits, axis=1), np.argmax(logits + 12.5, axis=1))


# ---------------------------------------------------------------- full models


def test_a2fpn_shape_chain_and_determinism():
    variant = ModelVariant("a2fpn", 4, 8, SMALL)
    x = image(b=2)
    with no_grad():
        a = build_model(variant, 3).eval()(x).data
        b = build_model(variant, 3).eval()(x).data
    assert a.shape == (2, 4, 64, 64)
    np.testing.assert_array_equal(a, b)


def test_variants_share_output_shape():
    x = image()
    shapes = set()
    for kind in ("baseline", "fpn", "a2fpn"):
        with no_grad():
            shapes.add(ablation_forward(x, build_model(ModelVariant(kind, 5, 8, SMALL), 0).eval()).shape)
    assert shapes == {(1, 5, 64, 64)}


def test_parameter_count_ordering_default_config():
    counts = [build_model(ModelVariant(kind), 0).num_parameters() for kind in ("baseline", "fpn", "a2fpn")]
    assert counts[0] < counts[1] < counts[2]
    # attention branch: query/key (C -> C/2 each) and value (C -> C) 1x1 convs with biases, C = 4 d_p
    c = 4 * 64
    assert counts[2] - counts[1] == 2 * (c * c // 2 + c // 2) + (c * c + c)


def test_weight_surgery_fpn_equals_a2fpn_without_attention():
    a2 = build_model(ModelVariant("a2fpn", 3, 8, SMALL), 5).eval()
    fpn = build_model(ModelVariant("fpn", 3, 8, SMALL), 9).eval()
    state = {k.replace("aam.fuse", "fuse"): v for k, v in a2.state_dict().items() if not k.startswith("aam.lam")}
    fpn.load_state_dict(state)
    x = image(seed=4)
    with no_grad():
        maps = a2.pyramid(backbone_forward(x, a2.backbone))
        excised = classifier_head(a2.aam.fuse(F.concat_channels(maps.S)), a2.head).data
        np.testing.assert_array_equal(fpn(x).data, excised)


def test_a2fpn_loss_gradcheck_tiny():
    model = build_model(tiny_variant("a2fpn", 3), 0)
    x = image(b=2, h=32, w=32, seed=6)
    labels = make_rng(7).integers(0, 3, (2, 32, 32))
    params = model.parameters()
    err = finite_difference_check(lambda *ps: F.cross_entropy_loss(a2fpn_forward(x, model), labels), params, n_coords=20)
    assert err < 1e-4


def test_logits_finite_after_100_steps():
    scenes = [generate_scene(SceneSpec(seed=s)) for s in range(8)]
    xs = np.stack([s[0] for s in scenes])
    ys = np.stack([s[1] for s in scenes])
    model = build_model(ModelVariant("a2fpn", 4, 8, SMALL), 0)
    opt = Adam(model.parameters(), lr=3e-4)
    for step in range(100):
        idx = [(2 * step) % 8, (2 * step + 1) % 8]
        opt.zero_grad()
        with Tape() as tape:
            loss = F.cross_entropy_loss(model(Tensor(xs[idx])), ys[idx])
        tape.backward(loss)
        opt.step()
    model.eval()
    with no_grad():
        assert np.isfinite(model(Tensor(xs)).data).all()


def test_variant_validation():
    with pytest.raises(ConfigurationError):
        ModelVariant("unet")
    with pytest.raises(ConfigurationError):
        ModelVariant("fpn", 4, 16, SMALL)


# ---------------------------------------------------------------- modules and checkpoints


def test_state_dict_includes_running_stats_and_round_trips(tmp_path):
    model = build_model(ModelVariant("a2fpn", 3, 8, SMALL), 1)
    with Tape() as tape:
        loss = F.sum(model(image()))
    del tape, loss
    state = model.state_dict()
    assert any(k.endswith("running_var") for k in state)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, extra={"note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta["kind"] == "a2fpn" and meta["note"] == "x"
    for k, v in loaded.state_dict().items():
        np.testing.assert_array_equal(v, state[k])
    model.eval()
    with no_grad():
        np.testing.assert_array_equal(loaded(image(seed=3)).data, model(image(seed=3)).data)


def test_checkpoint_header_layout():
    buf = encode_checkpoint({"b": np.array([1.0, 2.0]), "a": np.zeros((2, 1))}, {"k": 1})
    n = int.from_bytes(buf[:8], "little")
    assert b'"version": "a2fpn-ckpt-v1"' in buf[8 : 8 + n]
    assert len(buf) == 8 + n + 4 * 8
    state, meta = decode_checkpoint(buf)
    np.testing.assert_array_equal(state["b"], [1.0, 2.0])
    assert meta == {"k": 1}


def test_checkpoint_corruption_reports_offset():
    buf = encode_checkpoint({"a": np.ones(4)}, {})
    with pytest.raises(FormatError) as info:
        decode_checkpoint(buf[:-8])
    assert info.value.offset > 8
    with pytest.raises(FormatError):
        decode_checkpoint(b"\x01")


def test_checkpoint_mismatch_is_configuration_error(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_model(ModelVariant("fpn", 3, 8, SMALL), 0))
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, expect_classes=4)
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, expect_d_p=64)


def test_load_state_dict_strict():
    model = build_model(tiny_variant("fpn"), 0)
    state = model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(ConfigurationError):
        model.load_state_dict(state)


def test_a2fpn_class_is_built_for_a2fpn_kind():
    assert isinstance(build_model(tiny_variant("a2fpn"), 0), A2FPN)

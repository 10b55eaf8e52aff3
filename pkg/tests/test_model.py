import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from glimpsefas.model import (
    ConfigurationError,
    Fusion,
    GlimpseEncoder,
    GlimpseNet,
    GRUCell,
    ModelConfig,
    ShapeError,
    classify,
    crop_patch,
    fuse,
    paper_preset,
    window_start,
)
from glimpsefas.policy import DETERMINISTIC, STOCHASTIC


def zero_all(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def rows_cols(loc, side, p):
    fmap = torch.arange(side * side, dtype=torch.float64).reshape(1, side, side)
    patch = crop_patch(fmap, torch.tensor(loc), p)[0]
    r0, c0 = divmod(int(patch[0, 0]), side)
    return (r0, r0 + p - 1), (c0, c0 + p - 1)


def test_crop_examples():
    assert rows_cols((0.0, 0.0), 32, 8) == ((12, 19), (12, 19))
    assert rows_cols((1.0, 1.0), 32, 8) == ((24, 31), (24, 31))
    assert rows_cols((-1.0, -1.0), 32, 8) == ((0, 7), (0, 7))
    # l_x moves columns, l_y moves rows
    assert rows_cols((1.0, -1.0), 32, 8) == ((0, 7), (24, 31))


def test_crop_is_a_pure_slice():
    fmap = torch.randn(2, 3, 8, 8)
    loc = torch.tensor([[0.3, -0.6], [-1.0, 1.0]])
    patch = crop_patch(fmap, loc, 4)
    for b in range(2):
        c0 = int(window_start(loc[b, 0], 8, 4))
        r0 = int(window_start(loc[b, 1], 8, 4))
        assert torch.equal(patch[b], fmap[b, :, r0 : r0 + 4, c0 : c0 + 4])


def test_crop_rejects_oversized_patch():
    with pytest.raises(ConfigurationError):
        crop_patch(torch.zeros(1, 4, 4), torch.zeros(2), 5)


def test_crop_totality_10k_locations():
    g = torch.Generator().manual_seed(0)
    locs = torch.rand(10_000, 2, generator=g) * 2 - 1
    corners = torch.tensor([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0], [0.0, 0.0]])
    locs = torch.cat([locs, corners])
    for side, p in [(8, 4), (8, 8), (32, 8), (5, 2), (2, 2), (7, 1)]:
        r = window_start(locs[:, 1], side, p)
        c = window_start(locs[:, 0], side, p)
        assert int(r.min()) >= 0 and int(r.max()) + p <= side
        assert int(c.min()) >= 0 and int(c.max()) + p <= side


def test_backbone_shapes_and_zero_input():
    cfg = ModelConfig()
    net = GlimpseNet(cfg).eval()
    fmap = net.backbone_embed(torch.rand(2, 3, 64, 64))
    assert fmap.shape == (2, cfg.feature_channels, 8, 8)
    zero_all(net.backbone)
    # zeroing also resets the normalisation scales; restore unit running variance
    for m in net.backbone.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_var.fill_(1.0)
            m.running_mean.zero_()
    assert torch.count_nonzero(net.backbone_embed(torch.zeros(1, 3, 64, 64))) == 0
    with pytest.raises(ShapeError):
        net.backbone_embed(torch.zeros(1, 3, 32, 32))


@pytest.mark.slow
def test_paper_scale_shapes():
    net = GlimpseNet(paper_preset()).eval()
    with torch.no_grad():
        fmap = net.backbone_embed(torch.rand(1, 3, 256, 256))
        assert fmap.shape == (1, 128, 32, 32)
        assert net.global_branch(fmap).shape == (1, 512)
        patch = crop_patch(fmap, torch.zeros(1, 2), 8)
        assert net.glimpse(patch, torch.zeros(1, 2)).shape == (1, 512)
        phi = torch.relu(net.glimpse.l21(patch)).mean(dim=(2, 3))
        assert phi.shape == (1, 256)
    assert net.classifier.in_features == 1024


def test_global_branch_zero_and_nonnegative():
    net = GlimpseNet(ModelConfig()).eval()
    f_g = net.global_branch(torch.randn(3, 32, 8, 8))
    assert f_g.shape == (3, 64) and bool((f_g >= 0).all())
    act = net.branch1.activation_map(torch.randn(1, 32, 8, 8))
    assert act.shape == (1, 64, 8, 8)


def test_global_branch_zero_map_zero_biases():
    net = GlimpseNet(ModelConfig()).eval()
    for m in net.branch1.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            with torch.no_grad():
                m.bias.zero_()
            m.running_mean.zero_()
    assert torch.count_nonzero(net.global_branch(torch.zeros(1, 32, 8, 8))) == 0


def test_gap_of_constant_map():
    const = torch.full((1, 5, 4, 4), 0.7)
    assert torch.allclose(const.mean(dim=(2, 3)), torch.full((1, 5), 0.7))


def test_glimpse_encoder():
    enc = GlimpseEncoder(channels=6, dim=8, patch_size=3)
    with torch.no_grad():
        for layer in (enc.l21, enc.l22, enc.l23, enc.l24, enc.l25):
            layer.bias.zero_()
    out = enc(torch.zeros(1, 6, 3, 3), torch.zeros(1, 2))
    assert torch.count_nonzero(out) == 0
    torch.manual_seed(3)
    enc = GlimpseEncoder(channels=6, dim=8, patch_size=3)
    patch = torch.randn(1, 6, 3, 3)
    a = enc(patch, torch.tensor([[0.7, -0.2]]))
    b = enc(patch, torch.tensor([[-0.2, 0.7]]))
    assert not torch.allclose(a, b)
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 6, 4, 4), torch.zeros(1, 2))


def test_gru_zero_parameters_halves_state():
    cell = GRUCell(5).double()
    zero_all(cell)
    h = torch.randn(3, 5, dtype=torch.float64)
    assert torch.equal(cell(torch.randn(3, 5, dtype=torch.float64), h), 0.5 * h)


def test_gru_update_gate_saturation():
    cell = GRUCell(4).double()
    with torch.no_grad():
        cell.b_z.fill_(60.0)
    h = torch.randn(2, 4, dtype=torch.float64)
    assert torch.allclose(cell(torch.randn(2, 4, dtype=torch.float64), h), h, atol=1e-12)


def test_gru_matches_manual_formula():
    torch.manual_seed(0)
    cell = GRUCell(3).double()
    f, h = torch.randn(3, dtype=torch.float64), torch.randn(3, dtype=torch.float64)
    sig = torch.sigmoid
    z = sig(cell.W_z @ f + cell.U_z @ h + cell.b_z)
    q = sig(cell.W_q @ f + cell.U_q @ h + cell.b_q)
    hh = torch.tanh(cell.W_h @ f + cell.U_h @ (q * h) + cell.b_h)
    assert torch.allclose(cell(f, h), z * h + (1 - z) * hh)
    with pytest.raises(ShapeError):
        cell(torch.zeros(4), torch.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
def test_gru_gate_range_and_contraction(dim, seed, scale):
    torch.manual_seed(seed)
    cell = GRUCell(dim).double()
    with torch.no_grad():
        for p in cell.parameters():
            p.normal_(0, scale / math.sqrt(dim))
    f = torch.randn(4, dim, dtype=torch.float64) * 2
    h = torch.randn(4, dim, dtype=torch.float64) * 2
    z, q, _ = cell.gates(f, h)
    assert bool(((z > 0) & (z < 1) & (q > 0) & (q < 1)).all())
    bound = torch.maximum(h.abs(), torch.ones_like(h))
    assert bool((cell(f, h).abs() <= bound).all())


def test_fusion_variants():
    a, b = torch.randn(2, 4), torch.randn(2, 4)
    cat = fuse(a, b, "concat")
    assert cat.shape == (2, 8)
    assert torch.equal(cat[:, :4], a) and torch.equal(cat[:, 4:], b)
    assert torch.equal(fuse(a, a, "average"), a)
    assert torch.equal(fuse(a, b, "weighted_average", torch.tensor([1.0, 0.0])), a)
    with pytest.raises(ShapeError):
        fuse(a, torch.randn(2, 5), "average")
    wa = Fusion("weighted_average", 4)
    assert abs(float(wa.weights().detach().sum()) - 1.0) < 1e-7
    assert Fusion("concat", 512).out_dim == 1024


def test_classify_softmax():
    assert torch.allclose(classify(torch.zeros(2))[1], torch.tensor([0.5, 0.5]))
    for a in (-30.0, 0.0, 12.5):
        assert torch.allclose(classify(torch.tensor([a, a]))[1], torch.tensor([0.5, 0.5]))
    _, probs = classify(torch.tensor([math.log(3.0), 0.0], dtype=torch.float64))
    assert torch.allclose(probs, torch.tensor([0.75, 0.25], dtype=torch.float64))
    lin = torch.nn.Linear(6, 2)
    zero_all(lin)
    assert torch.equal(classify(lin(torch.randn(6)))[1], torch.tensor([0.5, 0.5]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.floats(-100, 100))
def test_softmax_shift_invariance(logits, shift):
    x = torch.tensor(logits, dtype=torch.float64)
    p1, p2 = classify(x)[1], classify(x + shift)[1]
    assert torch.allclose(p1, p2, atol=1e-12)
    assert abs(float(p1.sum()) - 1.0) <= 1e-6


def small_model(**kw):
    cfg = ModelConfig(input_size=32, backbone_channels=[3, 4, 4, 8], feature_dim=8, patch_size=2, steps=3)
    for k, v in kw.items():
        setattr(cfg, k, v)
    torch.manual_seed(0)
    return GlimpseNet(cfg).eval()


def test_episode_shapes_and_confidences():
    net = small_model()
    x = torch.rand(2, 3, 32, 32)
    out = net.run_episode(x, STOCHASTIC, torch.Generator().manual_seed(1), labels=torch.tensor([0, 1]))
    assert out.trajectory.actions.shape == (2, 3, 2)
    assert len(out.trajectory) == 3 and len(out.trajectory.states) == 3
    assert out.step_confidences.shape == (2, 3)
    assert torch.allclose(out.probs.sum(-1), torch.ones(2), atol=1e-6)
    assert torch.equal(out.step_confidences[:, -1], out.probs[:, 0].detach())
    assert torch.equal(out.rewards[:, :2], torch.zeros(2, 2))
    assert torch.allclose(out.R, torch.log(out.probs.gather(1, torch.tensor([[0], [1]])).squeeze(1)))


def test_single_step_episode_unrolls_once():
    net = small_model(steps=1)
    x = torch.rand(1, 3, 32, 32)
    out = net.run_episode(x, DETERMINISTIC)
    assert len(out.trajectory) == 1
    fmap = net.backbone_embed(x)
    f_g = net.global_branch(fmap)
    loc = torch.zeros(1, 2)
    f1 = net.glimpse(crop_patch(fmap, loc, 2), loc)
    assert torch.allclose(out.h_final, net.gru(f1, f_g))


def test_deterministic_episode_is_repeatable():
    net = small_model()
    x = torch.rand(2, 3, 32, 32)
    a, b = net.run_episode(x, DETERMINISTIC), net.run_episode(x, DETERMINISTIC)
    assert torch.equal(a.logits, b.logits)
    assert torch.equal(a.trajectory.actions, b.trajectory.actions)
    assert torch.equal(a.step_confidences, b.step_confidences)
    assert torch.equal(a.trajectory.actions[:, 0], torch.zeros(2, 2))


def test_batching_matches_single_episodes():
    net = small_model()
    x = torch.rand(3, 3, 32, 32)
    batched = net.run_episode(x, DETERMINISTIC).probs
    single = torch.cat([net.forward_episode(x[i]).probs for i in range(3)])
    assert torch.allclose(batched, single, atol=1e-6)


def test_ablations_bypass_branches():
    net = small_model()
    x = torch.rand(2, 3, 32, 32)
    net.ablation = "global_only"
    out = net.run_episode(x, DETERMINISTIC)
    f_g = net.global_branch(net.backbone_embed(x))
    expected = net.classifier(torch.cat([f_g, torch.zeros_like(f_g)], -1))
    assert torch.allclose(out.logits, expected)
    net.ablation = "local_only"
    with torch.no_grad():
        net.branch1.stage4[1].conv2.weight.mul_(3.0)
    a = net.run_episode(x, DETERMINISTIC).logits
    with torch.no_grad():
        net.branch1.stage4[1].conv2.weight.mul_(-5.0)
    assert torch.allclose(a, net.run_episode(x, DETERMINISTIC).logits)


def test_frozen_locations_override_policy():
    net = small_model()
    x = torch.rand(2, 3, 32, 32)
    locs = torch.tensor([[[0.5, 0.5], [-1, -1], [1, 1]], [[0, 0], [0, 0], [0, 0]]], dtype=torch.float32)
    out = net.run_episode(x, STOCHASTIC, torch.Generator().manual_seed(0), locations=locs)
    assert torch.equal(out.trajectory.actions, locs)
    with pytest.raises(ShapeError):
        net.run_episode(x, locations=locs[:, :2])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        GlimpseNet(ModelConfig(patch_size=9))
    with pytest.raises(ConfigurationError):
        GlimpseNet(ModelConfig(feature_dim=63))
    with pytest.raises(ConfigurationError):
        GlimpseNet(ModelConfig(steps=0))

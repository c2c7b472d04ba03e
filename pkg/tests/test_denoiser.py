import numpy as np
import pytest
import torch

from impervia.denoiser import (
    ConditioningStack,
    Denoiser,
    DenoiserConfig,
    cond_group_norm,
    fuse_conditions,
    load_parameter_arrays,
    loss_gradients,
    parameter_arrays,
    sinusoidal_embedding,
)
from impervia.diffusion import denoise_loss, make_schedule, q_sample
from impervia.errors import ConfigError, DivergenceError, ShapeMismatchError
from oracles import (
    clear_relu_kinks,
    conv2d_oracle,
    depth1_forward_oracle,
    finite_difference_gradients,
    group_norm_oracle,
    nearest_resize,
    relative_group_error,
    relu,
    sinusoidal_oracle,
)

TINY = DenoiserConfig(depth=1, base_channels=2, gn_groups=2, embed_dim=8,
                      n_cond=3, input_side=8)
# two channels per normalization group so conv biases keep live gradients
# (1-channel groups make GN exactly shift-invariant to them)
GRAD_CFG = DenoiserConfig(depth=1, base_channels=4, gn_groups=2, embed_dim=8,
                          n_cond=3, input_side=8)


def randomized_model(cfg=TINY, seed=0, dtype=torch.float64):
    """Model with every branch live (zero-initialized heads re-randomized)."""
    torch.manual_seed(seed)
    model = Denoiser(cfg)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "to_gamma" in name or "to_beta" in name or "out_conv" in name:
                p.copy_(0.3 * torch.randn(p.shape, generator=gen))
    return model.to(dtype)


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(base_channels=6, gn_groups=4)
    with pytest.raises(ConfigError):
        DenoiserConfig(embed_dim=9)
    with pytest.raises(ConfigError):
        DenoiserConfig(depth=3, input_side=30)
    assert DenoiserConfig().widths() == [8, 16, 32]


# ---------------------------------------------------------------------------
# fuse_conditions

def test_fuse_projection_weight():
    cond = torch.randn(2, 6, 4, 4)
    weight = torch.tensor([[[[1.0]], [[0.0]]]])
    fused = fuse_conditions(cond, weight, torch.zeros(1))
    for k in range(3):
        assert torch.equal(fused[:, k], cond[:, 2 * k])


def test_fuse_constant_bias():
    cond = torch.randn(1, 4, 3, 3)
    fused = fuse_conditions(cond, torch.zeros(1, 2, 1, 1), torch.tensor([2.5]))
    assert torch.allclose(fused, torch.full((1, 2, 3, 3), 2.5))


def test_fuse_matches_affine_oracle():
    rng = np.random.default_rng(8)
    cond = rng.normal(size=(1, 6, 5, 5))
    w = rng.normal(size=2)
    b = rng.normal()
    fused = fuse_conditions(
        torch.from_numpy(cond),
        torch.tensor([[[[w[0]]], [[w[1]]]]], dtype=torch.float64),
        torch.tensor([b], dtype=torch.float64),
    ).numpy()
    for k in range(3):
        for i in range(5):
            for j in range(5):
                expected = w[0] * cond[0, 2 * k, i, j] + w[1] * cond[0, 2 * k + 1, i, j] + b
                assert fused[0, k, i, j] == pytest.approx(expected, rel=1e-12)


def test_fuse_weight_sharing_across_pairs():
    model = Denoiser(TINY)
    cond = torch.randn(1, 6, 8, 8)
    fused = model.fuse_stack(cond)
    # each pair goes through the same kernel: feeding pair k alone matches
    for k in range(3):
        single = model.fuse_stack(cond[:, 2 * k:2 * k + 2])
        assert torch.allclose(fused[:, k:k + 1], single)


def test_fuse_channel_permutation_invariance():
    cond = torch.randn(1, 6, 4, 4, dtype=torch.float64)
    w = torch.randn(1, 2, 1, 1, dtype=torch.float64)
    b = torch.randn(1, dtype=torch.float64)
    swapped = cond.clone()
    for k in range(3):
        swapped[:, 2 * k] = cond[:, 2 * k + 1]
        swapped[:, 2 * k + 1] = cond[:, 2 * k]
    w_swapped = w.flip(1)
    assert torch.allclose(fuse_conditions(cond, w, b),
                          fuse_conditions(swapped, w_swapped, b))


# ---------------------------------------------------------------------------
# spade modulation

def test_spade_zero_init_yields_zero_maps():
    model = Denoiser(TINY)
    site = model.down_blocks[0].site1
    fused = torch.randn(1, 3, 8, 8)
    gamma, beta = site.modulation(fused, (8, 8))
    assert torch.equal(gamma, torch.zeros_like(gamma))
    assert torch.equal(beta, torch.zeros_like(beta))


def test_spade_bias_only_gamma():
    model = Denoiser(TINY)
    site = model.down_blocks[0].site1
    with torch.no_grad():
        site.trunk.weight.zero_()
        site.trunk.bias.zero_()
        site.to_gamma.bias.fill_(0.5)
    gamma, beta = site.modulation(torch.randn(1, 3, 8, 8), (8, 8))
    assert torch.allclose(gamma, torch.full_like(gamma, 0.5))
    assert torch.equal(beta, torch.zeros_like(beta))


def test_spade_matches_conv_oracle_with_resampling():
    model = randomized_model(seed=3)
    site = model.down_blocks[0].site1
    rng = np.random.default_rng(5)
    fused = rng.normal(size=(3, 8, 8))
    gamma, beta = site.modulation(torch.from_numpy(fused).unsqueeze(0), (4, 4))
    params = {name: p.detach().numpy() for name, p in site.named_parameters()}
    z = relu(conv2d_oracle(fused, params["trunk.weight"], params["trunk.bias"], pad=1))
    g_full = conv2d_oracle(z, params["to_gamma.weight"], params["to_gamma.bias"], pad=1)
    b_full = conv2d_oracle(z, params["to_beta.weight"], params["to_beta.bias"], pad=1)
    np.testing.assert_allclose(gamma.detach().squeeze(0).numpy(),
                               nearest_resize(g_full, (4, 4)),
                               rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(beta.detach().squeeze(0).numpy(),
                               nearest_resize(b_full, (4, 4)),
                               rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# conditioned group norm

def test_cond_group_norm_identity_modulation_matches_torch_gn():
    h = torch.randn(2, 8, 5, 5, dtype=torch.float64)
    zero = torch.zeros(2, 8, 5, 5, dtype=torch.float64)
    ours = cond_group_norm(h, zero, zero, groups=4)
    ref = torch.nn.functional.group_norm(h, 4)
    assert torch.allclose(ours, ref, atol=1e-10)


def test_cond_group_norm_constant_input_returns_beta():
    h = torch.full((1, 4, 3, 3), 7.0, dtype=torch.float64)
    gamma = torch.zeros_like(h)
    beta = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    out = cond_group_norm(h, gamma, beta, groups=2)
    assert torch.allclose(out, beta, atol=1e-6)


def test_cond_group_norm_matches_stats_oracle():
    rng = np.random.default_rng(12)
    h = rng.normal(size=(4, 6, 6))
    gamma = rng.normal(size=(4, 6, 6))
    beta = rng.normal(size=(4, 6, 6))
    out = cond_group_norm(torch.from_numpy(h).unsqueeze(0),
                          torch.from_numpy(gamma).unsqueeze(0),
                          torch.from_numpy(beta).unsqueeze(0), groups=2)
    expected = group_norm_oracle(h, 2) * (1.0 + gamma) + beta
    np.testing.assert_allclose(out.squeeze(0).numpy(), expected, rtol=1e-10)


def test_cond_group_norm_divisibility():
    h = torch.randn(1, 6, 2, 2)
    with pytest.raises(ShapeMismatchError):
        cond_group_norm(h, torch.zeros_like(h), torch.zeros_like(h), groups=4)


# ---------------------------------------------------------------------------
# forward

def test_forward_all_zero_parameters_gives_zero():
    model = Denoiser(TINY)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    out = model(torch.randn(2, 1, 8, 8), torch.tensor([3, 7]),
                torch.randn(2, 6, 8, 8))
    assert torch.equal(out, torch.zeros_like(out))


@pytest.mark.parametrize("side", [16, 32, 64])
def test_forward_shape_preserved(side):
    cfg = DenoiserConfig(depth=3, base_channels=8, gn_groups=4, embed_dim=16,
                         n_cond=3, input_side=side)
    torch.manual_seed(0)
    model = Denoiser(cfg)
    out = model(torch.randn(2, 1, side, side), torch.tensor([1, 5]),
                torch.randn(2, 6, side, side))
    assert out.shape == (2, 1, side, side)


def test_forward_matches_straight_line_oracle():
    model = randomized_model(seed=9)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 8, 8))
    cond = rng.normal(size=(6, 8, 8))
    t = 17
    got = model(torch.from_numpy(x).unsqueeze(0), torch.tensor([t]),
                torch.from_numpy(cond).unsqueeze(0))
    expected = depth1_forward_oracle(model, x, t, cond)
    np.testing.assert_allclose(got.squeeze(0).detach().numpy(), expected,
                               rtol=1e-9, atol=1e-11)


def test_forward_deterministic():
    model = randomized_model(seed=4)
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    cond = torch.randn(1, 6, 8, 8, dtype=torch.float64)
    a = model(x, torch.tensor([5]), cond)
    b = model(x, torch.tensor([5]), cond)
    assert torch.equal(a, b)


def test_forward_rejects_bad_shapes():
    model = Denoiser(TINY)
    with pytest.raises(ShapeMismatchError):
        model(torch.randn(1, 2, 8, 8), torch.tensor([1]), torch.randn(1, 6, 8, 8))
    with pytest.raises(ShapeMismatchError):
        model(torch.randn(1, 1, 8, 8), torch.tensor([1]), torch.randn(1, 4, 8, 8))


def test_zero_init_conditioning_is_inert_then_active():
    torch.manual_seed(21)
    model = Denoiser(TINY).double()
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    t = torch.tensor([9])
    out_a = model(x, t, torch.randn(1, 6, 8, 8, dtype=torch.float64))
    out_b = model(x, t, torch.randn(1, 6, 8, 8, dtype=torch.float64))
    # zero-initialized gamma/beta heads: conditioning cannot reach the output
    assert torch.allclose(out_a, out_b, atol=1e-12)
    live = randomized_model(seed=21)
    out_c = live(x, t, torch.randn(1, 6, 8, 8, dtype=torch.float64))
    out_d = live(x, t, torch.randn(1, 6, 8, 8, dtype=torch.float64))
    assert not torch.allclose(out_c, out_d)


def test_sinusoidal_embedding_matches_oracle():
    emb = sinusoidal_embedding(torch.tensor([1, 250, 999]), 16).numpy()
    for row, t in zip(emb, (1, 250, 999)):
        np.testing.assert_allclose(row, sinusoidal_oracle(t, 16), rtol=1e-12)


# ---------------------------------------------------------------------------
# conditioning stack

def test_conditioning_stack_tensor_layout():
    imp = [np.full((4, 4), -0.5, np.float32), np.full((4, 4), 0.5, np.float32)]
    lam = [np.full((4, 4), 0.1, np.float32), np.full((4, 4), 0.9, np.float32)]
    stack = ConditioningStack(imp, lam, years=[2004, 2008])
    t = stack.tensor()
    assert t.shape == (4, 4, 4)
    assert float(t[0, 0, 0]) == pytest.approx(-0.5)
    assert float(t[1, 0, 0]) == pytest.approx(0.1)
    assert float(t[2, 0, 0]) == pytest.approx(0.5)
    assert float(t[3, 0, 0]) == pytest.approx(0.9)


def test_conditioning_stack_validation():
    a = np.zeros((4, 4), np.float32)
    with pytest.raises(ShapeMismatchError):
        ConditioningStack([a], [a, a])
    with pytest.raises(ShapeMismatchError):
        ConditioningStack([a], [np.zeros((3, 3), np.float32)])


# ---------------------------------------------------------------------------
# gradients

def _grad_setup(model, seed=0):
    cfg = model.cfg
    sched = make_schedule(40)
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.randn((2, 1, cfg.input_side, cfg.input_side), generator=gen,
                     dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    cond = torch.randn((2, 2 * cfg.n_cond, cfg.input_side, cfg.input_side),
                       generator=gen, dtype=torch.float64)
    t = torch.tensor([13, 29])
    xt = q_sample(x0, 13, eps, sched)  # fixed jump; any valid mix works
    return xt, t, cond, eps


def test_gradients_match_finite_differences_depth1():
    model = randomized_model(GRAD_CFG, seed=1)
    xt, t, cond, eps = _grad_setup(model, seed=2)
    clear_relu_kinks(model, cond)
    analytic = loss_gradients(model, xt, t, cond, eps)
    fd = finite_difference_gradients(
        model, lambda: denoise_loss(model(xt, t, cond), eps))
    for name in fd:
        err = relative_group_error(analytic[name].numpy(), fd[name])
        assert err < 1e-4, f"{name}: relative error {err:.2e}"


def test_gradients_dead_branch_is_zero():
    torch.manual_seed(6)
    model = Denoiser(TINY).double()  # gamma/beta heads still zero
    xt, t, cond, eps = _grad_setup(model, seed=3)
    grads = loss_gradients(model, xt, t, cond, eps)
    # with zero gamma/beta weights the spade trunks cannot affect the loss
    for name, g in grads.items():
        if ".trunk." in name or "fuse." in name:
            assert torch.equal(g, torch.zeros_like(g)), name


def test_gradients_scale_linearly():
    model = randomized_model(seed=2)
    xt, t, cond, eps = _grad_setup(model, seed=4)
    base = loss_gradients(model, xt, t, cond, eps)
    model.zero_grad(set_to_none=True)
    loss = 2.0 * denoise_loss(model(xt, t, cond), eps)
    loss.backward()
    for name, p in model.named_parameters():
        assert torch.allclose(p.grad, 2.0 * base[name], rtol=1e-10)


def test_gradients_nan_reports_tensor_name():
    model = randomized_model(seed=3)
    xt, t, cond, eps = _grad_setup(model, seed=5)
    xt[0, 0, 0, 0] = float("nan")
    with pytest.raises(DivergenceError):
        loss_gradients(model, xt, t, cond, eps)


def test_gradients_fd_depth2_with_up_down_path():
    cfg = DenoiserConfig(depth=2, base_channels=4, gn_groups=2, embed_dim=8,
                         n_cond=2, input_side=8)
    model = randomized_model(cfg, seed=5)
    sched = make_schedule(40)
    gen = torch.Generator().manual_seed(6)
    xt = torch.randn((1, 1, 8, 8), generator=gen, dtype=torch.float64)
    eps = torch.randn(xt.shape, generator=gen, dtype=torch.float64)
    cond = torch.randn((1, 4, 8, 8), generator=gen, dtype=torch.float64)
    t = torch.tensor([20])
    clear_relu_kinks(model, cond)
    analytic = loss_gradients(model, xt, t, cond, eps)
    fd = finite_difference_gradients(
        model, lambda: denoise_loss(model(xt, t, cond), eps))
    for name in fd:
        err = relative_group_error(analytic[name].numpy(), fd[name])
        assert err < 1e-4, f"{name}: relative error {err:.2e}"


# ---------------------------------------------------------------------------
# parameter snapshots

def test_parameter_array_roundtrip():
    torch.manual_seed(8)
    model = Denoiser(TINY)
    arrays = parameter_arrays(model)
    torch.manual_seed(99)
    other = Denoiser(TINY)
    load_parameter_arrays(other, arrays)
    for (_, a), (_, b) in zip(model.named_parameters(), other.named_parameters()):
        assert torch.equal(a, b)
    bad = dict(arrays)
    bad.pop(next(iter(bad)))
    with pytest.raises(ShapeMismatchError):
        load_parameter_arrays(other, bad)

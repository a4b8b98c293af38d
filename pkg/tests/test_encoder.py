import numpy as np
import pytest
import torch

from beliefrl.config import ModelConfig, SimConfig
from beliefrl.data import episodes_to_batch
from beliefrl.encoder import StructuredEncoder, mnar_features
from beliefrl.simulator import compute_normalization_stats, compute_summaries, generate_cohort

from conftest import finite_difference_gradients, relative_gradient_error


def small_encoder(D=2, d_h=3, psi_mode="mlp", seed=0, mnar=True):
    cfg = ModelConfig(
        n_structured=D, hidden_dim=d_h, psi_embed_dim=4, attn_dim=4, attn_heads=2,
        text_embed_dim=2, dropout=0.0, psi_embedding=psi_mode, mnar_features=mnar,
    ).validate()
    torch.manual_seed(seed)
    return StructuredEncoder(cfg)


def randomize_(module, scale=0.5, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64))
    return module


# ---------------------------------------------------------------- decay


def test_decay_zero_params_is_one():
    enc = small_encoder()
    delta = torch.tensor([[0.0, 5.0], [100.0, 3.0]], dtype=torch.float64)
    xi_phi, xi_y = enc.decay_factors(delta)
    assert torch.all(xi_phi == 1.0)
    assert torch.all(xi_y == 1.0)


def test_decay_monotone_to_zero():
    enc = small_encoder()
    with torch.no_grad():
        enc.w_phi_decay.fill_(0.3)
        enc.w_y_decay.fill_(0.3)
    deltas = torch.linspace(0, 400, 50, dtype=torch.float64).unsqueeze(-1).expand(50, 2)
    xi_phi, xi_y = enc.decay_factors(deltas)
    assert torch.all(xi_phi[1:] <= xi_phi[:-1])
    assert xi_phi[-1] < 1e-10
    assert torch.all(xi_y > 0)


def test_decay_matches_scalar_rederivation():
    enc = randomize_(small_encoder(D=3))
    delta = torch.rand(7, 3, dtype=torch.float64) * 10
    xi_phi, xi_y = enc.decay_factors(delta)
    w_phi = enc.w_phi_decay.item()
    b_phi = enc.b_phi_decay.item()
    w_y = enc.w_y_decay.detach().numpy()
    b_y = enc.b_y_decay.detach().numpy()
    d = delta.numpy()
    ref_phi = np.exp(-np.maximum(0.0, w_phi * d.mean(axis=1, keepdims=True) + b_phi))
    ref_y = np.exp(-np.maximum(0.0, w_y * d + b_y))
    assert np.allclose(xi_phi.detach().numpy(), ref_phi, atol=1e-12)
    assert np.allclose(xi_y.detach().numpy(), ref_y, atol=1e-12)


def test_decay_range_property():
    enc = randomize_(small_encoder(D=4), scale=2.0)
    delta = torch.rand(100000 // 4, 4, dtype=torch.float64) * 200
    xi_phi, xi_y = enc.decay_factors(delta)
    for xi in (xi_phi, xi_y):
        assert torch.all(xi > 0.0)
        assert torch.all(xi <= 1.0)


# ---------------------------------------------------------------- imputation


def test_impute_cases():
    y = torch.tensor([[2.0, -1.0]], dtype=torch.float64)
    last = torch.tensor([[5.0, 7.0]], dtype=torch.float64)
    mu = torch.tensor([[0.5, 0.25]], dtype=torch.float64)
    ones = torch.ones_like(y)
    out = StructuredEncoder.impute(y, ones, last, torch.zeros_like(y), mu)
    assert torch.equal(out, y)  # observed passes through regardless of decay
    out = StructuredEncoder.impute(y, torch.zeros_like(y), last, torch.ones_like(y), mu)
    assert torch.equal(out, last)  # xi = 1 holds the last observation
    out = StructuredEncoder.impute(y, torch.zeros_like(y), last, torch.zeros_like(y), mu)
    assert torch.equal(out, mu)  # xi = 0 falls back to the mean


# ---------------------------------------------------------------- psi features


def test_mnar_features_first_substep_all_observed():
    mask = np.ones((1, 3))
    s = compute_summaries(mask, np.zeros((1, 1), dtype=int), 6, 6.0, 1.0, 4.0, 72.0)
    psi = mnar_features(s.delta, s.cum_counts, s.miss_rates, s.window_freq)
    assert psi.shape == (1, 12)
    np.testing.assert_array_equal(psi[0, 0:3], 0.0)  # delta
    np.testing.assert_array_equal(psi[0, 3:6], 1.0)  # counts
    np.testing.assert_array_equal(psi[0, 6:9], 0.0)  # missing rate


def test_mnar_features_never_observed():
    mask = np.zeros((4, 2))
    s = compute_summaries(mask, np.zeros((1, 1), dtype=int), 6, 6.0, 1.0, 4.0, 72.0)
    psi = mnar_features(s.delta, s.cum_counts, s.miss_rates, s.window_freq)
    np.testing.assert_array_equal(psi[:, 2:4], 0.0)  # counts stay 0
    np.testing.assert_array_equal(psi[:, 4:6], 1.0)  # missing rate stays 1


def test_mnar_features_window_toy():
    mask = np.array([[1.0], [0.0], [1.0]])
    s = compute_summaries(mask, np.zeros((1, 1), dtype=int), 6, 6.0, 1.0, 4.0, 72.0)
    psi = mnar_features(s.delta, s.cum_counts, s.miss_rates, s.window_freq)
    assert psi[2, 3] == pytest.approx(2.0 / 6.0)


# ---------------------------------------------------------------- gate algebra


def test_gate_algebra_limits():
    enc = randomize_(small_encoder(D=2, d_h=3))
    h_prev = torch.randn(4, 3, dtype=torch.float64)
    y_hat = torch.randn(4, 2, dtype=torch.float64)
    psi_emb = torch.randn(4, enc.psi_dim, dtype=torch.float64)
    xi_phi = torch.full((4, 1), 0.7, dtype=torch.float64)

    with torch.no_grad():
        enc.update_y.weight.zero_()
        enc.update_h.weight.zero_()
        enc.update_psi.weight.zero_()
        enc.update_bias.fill_(-40.0)
    out = enc.step(h_prev, y_hat, psi_emb, xi_phi)
    assert torch.allclose(out, xi_phi * h_prev, atol=1e-12)

    with torch.no_grad():
        enc.update_bias.fill_(40.0)
    out = enc.step(h_prev, y_hat, psi_emb, xi_phi)
    h_dec = xi_phi * h_prev
    r = torch.sigmoid(enc.reset_y(y_hat) + enc.reset_h(h_dec) + enc.reset_psi(psi_emb) + enc.reset_bias)
    cand = torch.tanh(enc.cand_y(y_hat) + enc.cand_h(r * h_dec) + enc.cand_psi(psi_emb) + enc.cand_bias)
    assert torch.allclose(out, cand, atol=1e-12)


def _reference_step(enc: StructuredEncoder, h_prev, y_hat, psi_emb, xi_phi):
    """Straight-line numpy re-implementation of the gate equations."""
    pd = {k: v.detach().numpy() for k, v in enc.state_dict().items()}
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    h_dec = xi_phi * h_prev
    r = sig(y_hat @ pd["reset_y.weight"].T + h_dec @ pd["reset_h.weight"].T + psi_emb @ pd["reset_psi.weight"].T + pd["reset_bias"])
    eta = sig(y_hat @ pd["update_y.weight"].T + h_dec @ pd["update_h.weight"].T + psi_emb @ pd["update_psi.weight"].T + pd["update_bias"])
    cand = np.tanh(y_hat @ pd["cand_y.weight"].T + (r * h_dec) @ pd["cand_h.weight"].T + psi_emb @ pd["cand_psi.weight"].T + pd["cand_bias"])
    return (1 - eta) * h_dec + eta * cand


def test_step_matches_reference():
    enc = randomize_(small_encoder(D=2, d_h=3))
    h_prev = torch.randn(5, 3, dtype=torch.float64)
    y_hat = torch.randn(5, 2, dtype=torch.float64)
    psi_emb = torch.randn(5, enc.psi_dim, dtype=torch.float64)
    xi_phi = torch.rand(5, 1, dtype=torch.float64)
    out = enc.step(h_prev, y_hat, psi_emb, xi_phi).detach().numpy()
    ref = _reference_step(enc, h_prev.numpy(), y_hat.numpy(), psi_emb.numpy(), xi_phi.numpy())
    assert np.allclose(out, ref, atol=1e-10)


def test_step_rejects_non_finite():
    enc = small_encoder()
    bad = torch.full((1, 3), float("nan"), dtype=torch.float64)
    with pytest.raises(ValueError):
        enc.step(bad, torch.zeros(1, 2, dtype=torch.float64), torch.zeros(1, enc.psi_dim, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64))


# ---------------------------------------------------------------- full encoding


def _encode(enc, batch, n_sub):
    return enc(batch["values"], batch["mask"], batch["delta"], batch["psi"], batch["sub_valid"], n_sub)


def _tiny_batch(sim_seed=0, n_episodes=3, horizon=5):
    sim = SimConfig(n_episodes=n_episodes, horizon=horizon, sub_steps_per_decision=2,
                    n_structured=4, text_embed_dim=3, seed=sim_seed).validate()
    eps = generate_cohort(sim)
    stats = compute_normalization_stats(eps)
    return episodes_to_batch(eps, stats, sim), sim, eps


def test_encode_shapes_and_single_step():
    batch, sim, eps = _tiny_batch()
    enc = randomize_(small_encoder(D=4, d_h=6))
    phi_bar, h_seq, imputed = _encode(enc, batch, sim.sub_steps_per_decision)
    assert phi_bar.shape == (3, sim.horizon, 6)
    assert h_seq.shape == (3, sim.horizon * 2, 6)
    assert imputed.shape == (3, sim.horizon * 2, 4)
    # a single-step prefix run yields one embedding
    one = {k: (v[:, :2] if v.dim() >= 2 and v.shape[1] == sim.horizon * 2 else v) for k, v in batch.items()}
    one["sub_valid"] = batch["sub_valid"][:, :2]
    phi_one, _, _ = _encode(enc, {**one, "values": batch["values"][:, :2], "mask": batch["mask"][:, :2],
                                  "delta": batch["delta"][:, :2], "psi": batch["psi"][:, :2]}, sim.sub_steps_per_decision)
    assert phi_one.shape[1] == 1


def test_prefix_property_and_future_perturbation():
    batch, sim, _ = _tiny_batch()
    enc = randomize_(small_encoder(D=4, d_h=6))
    enc.eval()
    phi_full, _, _ = _encode(enc, batch, sim.sub_steps_per_decision)

    # truncated episode reproduces the prefix exactly
    cut = 3 * sim.sub_steps_per_decision
    trunc = dict(batch)
    for key in ("values", "mask", "delta", "psi", "sub_valid"):
        trunc[key] = batch[key][:, :cut]
    phi_trunc, _, _ = _encode(enc, trunc, sim.sub_steps_per_decision)
    assert torch.equal(phi_trunc, phi_full[:, :3])

    # perturbing a future sub-step leaves earlier embeddings bit-identical
    pert = {k: v.clone() for k, v in batch.items()}
    pert["values"][:, cut + 1] += 10.0
    pert["mask"][:, cut + 1] = 1.0
    phi_pert, _, _ = _encode(enc, pert, sim.sub_steps_per_decision)
    assert torch.equal(phi_pert[:, :3], phi_full[:, :3])
    assert not torch.equal(phi_pert[:, 3:], phi_full[:, 3:])


def test_mnar_flag_routes_zeros():
    batch, sim, _ = _tiny_batch()
    torch.manual_seed(4)
    enc_on = randomize_(small_encoder(D=4, d_h=6, mnar=True))
    enc_off = small_encoder(D=4, d_h=6, mnar=False)
    enc_off.load_state_dict(enc_on.state_dict())
    phi_off, _, _ = _encode(enc_off, batch, sim.sub_steps_per_decision)
    pert = dict(batch)
    pert["psi"] = batch["psi"] * 3.14 + 1.0
    phi_off2, _, _ = _encode(enc_off, pert, sim.sub_steps_per_decision)
    assert torch.equal(phi_off, phi_off2)  # psi has no pathway when ablated
    phi_on, _, _ = _encode(enc_on, batch, sim.sub_steps_per_decision)
    assert not torch.equal(phi_on, phi_off)


def test_linear_psi_mode():
    enc = randomize_(small_encoder(D=2, d_h=3, psi_mode="linear"))
    assert enc.psi_mlp is None
    psi = torch.rand(4, 8, dtype=torch.float64)
    emb = enc.embed_psi(psi)
    assert emb.shape == (4, 8)


def test_gradient_check_one_step():
    enc = randomize_(small_encoder(D=2, d_h=3))
    enc.eval()
    h_prev = torch.randn(2, 3, dtype=torch.float64)
    y = torch.randn(2, 2, dtype=torch.float64)
    mask = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    delta = torch.rand(2, 2, dtype=torch.float64) * 5
    psi = torch.rand(2, 8, dtype=torch.float64)
    last = torch.randn(2, 2, dtype=torch.float64)
    mean = torch.zeros(2, 2, dtype=torch.float64)
    target = torch.randn(2, 3, dtype=torch.float64)

    def loss_fn():
        xi_phi, xi_y = enc.decay_factors(delta)
        y_hat = enc.impute(y, mask, last, xi_y, mean)
        out = enc.step(h_prev, y_hat, enc.embed_psi(psi), xi_phi)
        return ((out - target) ** 2).sum()

    params = [p for p in enc.parameters() if p.requires_grad]
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    numeric = finite_difference_gradients(loss_fn, params)
    assert relative_gradient_error(analytic, numeric) < 1e-4

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import directional_check
from vmail.adversary import Discriminator
from vmail.agent import STD_MAX, STD_MIN, ActorCritic, Policy, ValueFunction, expansion_targets, value_expansion_return
from vmail.models import RSSM

LN2 = math.log(2.0)


def tiny_setup(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    model = RSSM(2, deter_dim=3, stoch_dim=3, hidden_dim=5, cnn_depth=2).to(dtype)
    disc = Discriminator(6, 2, 6).to(dtype)
    pol = Policy(6, 2, hidden_dim=6).to(dtype)
    val = ValueFunction(6, 6).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    start = model.initial(4).map(lambda t: t + 0.3 * torch.randn(t.shape, generator=gen, dtype=dtype))
    return model, disc, pol, val, start, gen


def zeroed(module):
    with torch.no_grad():
        module.net[-1].weight.zero_()
        module.net[-1].bias.zero_()
    return module


# -- policy -----------------------------------------------------------------


def test_mean_mode_deterministic():
    pol = Policy(5, 2)
    f = torch.randn(3, 5)
    assert torch.equal(pol.act(f, mode="mean"), pol.act(f, mode="mean"))


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(0.0, 50.0), seed=st.integers(0, 1000))
def test_actions_in_open_interval_and_std_bounded(scale, seed):
    gen = torch.Generator().manual_seed(seed)
    pol = Policy(4, 3)
    f = scale * torch.randn(64, 4, generator=gen)
    a = pol.act(f, torch.randn(64, 3, generator=gen))
    assert torch.all(a.abs() <= 1.0)
    _, std = pol.dist_params(f)
    assert torch.all(std >= STD_MIN) and torch.all(std <= STD_MAX)


def test_actions_strictly_inside_for_moderate_inputs():
    pol = Policy(4, 2).double()
    a = pol.act(torch.randn(1000, 4, dtype=torch.float64), torch.randn(1000, 2, dtype=torch.float64))
    assert torch.all(a.abs() < 1.0)


def test_max_std_covers_both_signs():
    pol = Policy(4, 2)
    with torch.no_grad():
        pol.net[-1].weight.zero_()
        pol.net[-1].bias.zero_()
        pol.net[-1].bias[2:] = 50.0  # saturate the std map
    f = torch.zeros(10_000, 4)
    _, std = pol.dist_params(f)
    assert torch.allclose(std, torch.full_like(std, STD_MAX))
    a = pol.act(f, torch.randn(10_000, 2, generator=torch.Generator().manual_seed(0)))
    for d in range(2):
        pos = int((a[:, d] > 0).sum())
        assert 4500 < pos < 5500


def test_initial_std():
    pol = Policy(4, 1, init_std=0.5)
    zeroed(pol)
    _, std = pol.dist_params(torch.zeros(1, 4))
    assert std.item() == pytest.approx(0.5, abs=1e-6)


# -- value expansion --------------------------------------------------------


def test_expansion_targets_hand_values():
    r = torch.tensor([[1.0], [2.0], [3.0]])
    v = torch.tensor([[10.0], [20.0], [30.0], [40.0]])
    g = 0.5
    out = expansion_targets(r, v, 2, g)
    assert out[:, 0].tolist() == pytest.approx([1 + 0.5 * 2 + 0.25 * 30, 2 + 0.5 * 3 + 0.25 * 40])
    assert expansion_targets(r, v, 1, g)[:, 0].tolist() == pytest.approx([1 + 10, 2 + 15, 3 + 20])
    with pytest.raises(ValueError):
        expansion_targets(r, v, 4, g)


def test_k1_base_case():
    model, disc, pol, val, start, gen = tiny_setup()
    an = torch.randn(1, 4, 2, generator=gen, dtype=torch.float64)
    zn = torch.randn(1, 4, 3, generator=gen, dtype=torch.float64)
    ret = value_expansion_return(model, disc, pol, val, start, 1, an, zn, gamma=0.9)
    a = pol(start.features, an[0])
    nxt = model.prior_step(start, a, zn[0])
    expected = torch.nn.functional.logsigmoid(disc.logit(start.features, a)) + 0.9 * val(nxt.features)
    torch.testing.assert_close(ret, expected)


@pytest.mark.parametrize("K", [1, 3, 5])
def test_constant_half_discriminator_geometric_sum(K):
    model, disc, pol, val, start, gen = tiny_setup()
    zeroed(disc), zeroed(val)
    an = torch.randn(K, 4, 2, generator=gen, dtype=torch.float64)
    zn = torch.randn(K, 4, 3, generator=gen, dtype=torch.float64)
    ret = value_expansion_return(model, disc, pol, val, start, K, an, zn, gamma=0.99)
    expected = -LN2 * (1 - 0.99 ** K) / (1 - 0.99)
    torch.testing.assert_close(ret, torch.full_like(ret, expected), rtol=0, atol=1e-12)


def test_value_expansion_policy_gradient_finite_difference():
    model, disc, pol, val, start, gen = tiny_setup(seed=2)
    an = torch.randn(5, 4, 2, generator=gen, dtype=torch.float64)
    zn = torch.randn(5, 4, 3, generator=gen, dtype=torch.float64)
    directional_check(lambda: value_expansion_return(model, disc, pol, val, start, 5, an, zn).mean(),
                      list(pol.parameters()), 1e-3, directions=6)


def test_gradient_flows_through_transition_inputs():
    model, disc, pol, val, start, gen = tiny_setup()
    start = start.map(lambda t: t.detach().requires_grad_(True))
    an = torch.randn(5, 4, 2, generator=gen, dtype=torch.float64)
    zn = torch.randn(5, 4, 3, generator=gen, dtype=torch.float64)
    ac = ActorCritic(6, 2, 6)
    ac.policy, ac.value = pol, val
    states, actions = ac.imagine(model, start, 5, an, zn)
    targets, _ = ac.returns(disc, states, actions)
    targets.mean().backward()
    assert start.h.grad is not None and start.h.grad.abs().sum() > 0
    assert all(p.grad is None for p in model.parameters())
    assert all(p.grad is None for p in disc.parameters())
    assert all(p.grad is None for p in val.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in pol.parameters())


def _actor_critic(seed=0, **kw):
    model, disc, pol, val, start, gen = tiny_setup(seed)
    ac = ActorCritic(6, 2, 6, **kw)
    ac.policy, ac.value = pol, val
    ac.actor_opt = torch.optim.Adam(pol.parameters(), lr=kw.get("actor_lr", 8e-5))
    ac.critic_opt = torch.optim.Adam(val.parameters(), lr=kw.get("critic_lr", 8e-5))
    return model, disc, ac, start, gen


def test_policy_step_ascends_on_frozen_batch():
    model, disc, ac, start, gen = _actor_critic(actor_lr=1e-4)
    an = torch.randn(15, 4, 2, generator=gen, dtype=torch.float64)
    zn = torch.randn(15, 4, 3, generator=gen, dtype=torch.float64)

    def objective():
        states, actions = ac.imagine(model, start, 15, an, zn)
        return ac.returns(disc, states, actions)[0].mean()

    before = objective().item()
    states, actions = ac.imagine(model, start, 15, an, zn)
    version = ac.version
    ac.policy_update(disc, states, actions)
    assert ac.version == version + 1
    assert objective().item() > before


def test_constant_discriminator_gives_no_policy_gradient():
    model, disc, ac, start, gen = _actor_critic()
    zeroed(disc), zeroed(ac.value)
    an = torch.randn(15, 4, 2, generator=gen, dtype=torch.float64)
    zn = torch.randn(15, 4, 3, generator=gen, dtype=torch.float64)
    states, actions = ac.imagine(model, start, 15, an, zn)
    stats = ac.policy_update(disc, states, actions)
    assert stats["policy_grad_norm"] <= 1e-6


def test_value_update_does_not_touch_policy():
    model, disc, ac, start, gen = _actor_critic()
    an = torch.randn(15, 4, 2, generator=gen, dtype=torch.float64)
    zn = torch.randn(15, 4, 3, generator=gen, dtype=torch.float64)
    states, actions = ac.imagine(model, start, 15, an, zn)
    targets, _ = ac.returns(disc, states, actions)
    ac.policy.zero_grad(set_to_none=True)
    ac.value_update(states, targets)
    assert all(p.grad is None or torch.all(p.grad == 0) for p in ac.policy.parameters())


def test_value_regression_on_fixed_targets_converges():
    torch.manual_seed(0)
    ac = ActorCritic(6, 2, 32, critic_lr=3e-3)
    gen = torch.Generator().manual_seed(0)
    feats = torch.randn(11, 8, 6, generator=gen)
    targets = torch.sin(feats[:, :, 0]) + 0.5 * feats[:, :, 1]

    class States:
        features = feats

    for _ in range(2000):
        loss = ac.value_update(States, targets)["value_loss"]
    assert 2 * loss < 1e-3


def test_target_network_option():
    ac = ActorCritic(6, 2, 8, target_value=True, target_every=2)
    assert ac.bootstrap_value() is ac.target
    ac2 = ActorCritic(6, 2, 8)
    assert ac2.bootstrap_value() is ac2.value

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_differences, relative_errors, support_coords
from seea import env as E
from seea import optim as O
from seea.env import EOS, ConfigError, EnvConfig
from seea.policy import AgentState, Policy

CFG = EnvConfig()
POLICY = Policy.for_env(CFG)


def test_group_advantage_examples():
    assert np.allclose(O.group_advantages([1, 0]), [1.0, -1.0])
    assert np.allclose(O.group_advantages([1, 0, 0]), [1.41421, -0.70711, -0.70711], atol=1e-4)
    with pytest.raises(O.InvalidGroupError):
        O.group_advantages([0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=12))
def test_group_advantages_standardised(pr):
    if not O.is_valid_group(pr):
        return
    a = O.group_advantages(pr)
    assert abs(a.mean()) < 1e-9
    if np.std(pr) > 1e-6:  # below this the float rounding of the mean dominates
        assert abs(a.std() - 1.0) < 1e-6


def test_validity_filter():
    assert O.is_valid_group([1, 0, 0])
    assert not O.is_valid_group([0, 0, 0])
    assert not O.is_valid_group([0.3, 0.3 + 1e-15])


def test_importance_ratio_examples():
    assert O.importance_ratio(0.2, 0.2) == 1.0
    assert O.importance_ratio(0.1, 0.0) == pytest.approx(1.10517, abs=1e-5)
    assert O.importance_ratio(-0.1, 0.0) == pytest.approx(0.90484, abs=1e-5)


def test_clipped_objective_examples():
    assert O.clipped_token_objective(1.5, 1.0, 0.2, 0.28) == pytest.approx(1.28)
    assert O.clipped_token_objective(0.5, -1.0, 0.2, 0.28) == pytest.approx(-0.8)
    for rho in np.linspace(0.8, 1.28, 25):
        for adv in (-2.0, -0.3, 0.0, 0.7, 3.0):
            assert O.clipped_token_objective(rho, adv, 0.2, 0.28) == rho * adv


def test_k3_examples():
    assert O.k3_kl(-1.3, -1.3) == 0.0
    # r = pi_ref / pi = 2
    assert O.k3_kl(math.log(0.25), math.log(0.5)) == pytest.approx(2 - math.log(2) - 1, abs=1e-5)


def test_k3_nonnegative():
    rng = np.random.default_rng(0)
    cur, ref = rng.uniform(-30, 0, size=(2, 10_000))
    assert O.k3_kl(cur, ref).min() >= -1e-12


def _state(seed=3, steps=2):
    world, obs = E.reset(seed, CFG)
    agent = AgentState(obs)
    for action in E.oracle_plan(world)[:steps]:
        world, o, _, _ = E.step(world, action)
        agent = agent.append(action, o)
    return agent


ACTIONS = [("go", "to", "fridge1", EOS), ("open", "drawer1", EOS), ("take", "apple", EOS), ("put", "mug", EOS)]


def _group(params, state, actions, pr, shift=None):
    old = [POLICY.logprob(params, state, a) for a in actions]
    if shift is not None:
        old = [lp + s for lp, s in zip(old, shift)]
    return O.ExperienceGroup(state, list(actions), list(pr), old)


def test_on_policy_loss_is_zero():
    params = POLICY.init_params(0)
    state = _state()
    # equal action lengths, so the token-weighted mean advantage vanishes
    acts = [("open", r, EOS) for r in ("drawer1", "fridge1", "cabinet1")]
    batch = [_group(params, state, acts, [1.0, 0.0, 0.5]), _group(params, _state(5), acts, [0.0, 0.2, 0.0])]
    loss, _, stats = O.tree_grpo_loss_and_grad(batch, params, params, O.OptimConfig(), POLICY)
    assert abs(loss) < 1e-9
    assert stats.mean_ratio == pytest.approx(1.0) and stats.clip_frac == 0.0


def test_on_policy_loss_general_lengths():
    params = POLICY.init_params(0)
    g = _group(params, _state(), ACTIONS, [1.0, 0.0, 0.25, 0.0])
    loss, _, _ = O.tree_grpo_loss_and_grad([g], params, params, O.OptimConfig(), POLICY)
    adv = O.group_advantages(g.pr)
    lengths = np.array([len(a) for a in ACTIONS])
    assert loss == pytest.approx(-(lengths @ adv) / lengths.sum(), abs=1e-12)


def _fd_check_loss(config, shifts, seed):
    rng = np.random.default_rng(seed)
    params = POLICY.init_params(seed)
    params = params.with_values(params.values * 8)
    ref = params.with_values(params.values + rng.normal(0, 0.05, size=params.values.size))
    batch = [
        _group(params, _state(s), ACTIONS, rng.uniform(0, 1, size=len(ACTIONS)), shifts(rng))
        for s in (1, 2)
    ]

    def f(x):
        return O.tree_grpo_loss_and_grad(batch, params.with_values(x), ref, config, POLICY)[0]

    _, grad, stats = O.tree_grpo_loss_and_grad(batch, params, ref, config, POLICY)
    coords = support_coords(grad, 50, rng)
    return relative_errors(grad[coords], central_differences(f, params.values, coords)), stats


@pytest.mark.parametrize("beta", [0.0, 0.1])
def test_loss_gradient_matches_finite_differences(beta):
    # ratios well inside or well outside the clip band, never near a kink
    def shifts(rng):
        return [rng.choice([-0.05, 0.05, -1.0, 1.0], size=len(a)) for a in ACTIONS]

    err, stats = _fd_check_loss(O.OptimConfig(beta=beta), shifts, seed=4)
    assert err.max() < 1e-4
    assert 0 < stats.clip_frac < 1


def test_clipped_tokens_have_zero_gradient():
    params = POLICY.init_params(1)
    state = _state()
    acts = ACTIONS[:2]
    # action 0: positive advantage, rho = e > 1 + eps_high on every token (clipped)
    # action 1: negative advantage, rho = 1 (unclipped)
    shift = [np.full(len(acts[0]), -1.0), np.zeros(len(acts[1]))]
    g = _group(params, state, acts, [1.0, 0.0], shift=shift)
    _, grad, stats = O.tree_grpo_loss_and_grad([g], params, params, O.OptimConfig(beta=0.0), POLICY)
    n_tok = sum(len(a) for a in acts)
    only_unclipped = -POLICY.grad_logprob(params, state, acts[1], np.full(len(acts[1]), -1.0) / n_tok)
    assert np.allclose(grad, only_unclipped, rtol=0, atol=1e-14)
    assert stats.clip_frac == len(acts[0]) / n_tok


def test_invalid_group_in_batch():
    params = POLICY.init_params(0)
    g = _group(params, _state(), ACTIONS[:2], [0.5, 0.5])
    with pytest.raises(O.InvalidGroupError):
        O.tree_grpo_loss_and_grad([g], params, params, O.OptimConfig(), POLICY)
    with pytest.raises(O.InvalidGroupError):
        O.tree_grpo_loss_and_grad([], params, params, O.OptimConfig(), POLICY)


def test_experience_group_shape_checks():
    with pytest.raises(O.InvalidGroupError):
        O.ExperienceGroup(None, [("a",)], [1.0], [np.zeros(1)])
    with pytest.raises(O.InvalidGroupError):
        O.ExperienceGroup(None, [("a",), ("b",)], [1.0], [np.zeros(1)] * 2)


def test_cosine_schedule():
    total, lr0 = 100, 0.5
    assert O.cosine_lr(0, total, lr0, 0.05) == 0.0
    assert O.cosine_lr(5, total, lr0, 0.05) == lr0
    assert abs(O.cosine_lr(total, total, lr0, 0.05)) < 1e-12
    values = [O.cosine_lr(s, total, lr0, 0.05) for s in range(5, total + 1)]
    assert all(a >= b for a, b in zip(values, values[1:]))


class _Scalar:
    def __init__(self, values):
        self.values = values

    def with_values(self, values):
        return _Scalar(values)


def test_sgd_step():
    p = POLICY.init_params(0)
    assert np.array_equal(O.sgd_step(p, np.ones_like(p.values), 0.0).values, p.values)
    assert np.array_equal(O.sgd_step(p, np.zeros_like(p.values), 0.3).values, p.values)
    one = _Scalar(np.array([1.0]))
    assert O.sgd_step(one, np.array([2.0]), 0.1).values == pytest.approx([0.8])
    grad = np.zeros_like(p.values)
    grad[7] = np.nan
    with pytest.raises(O.NumericError, match="index 7"):
        O.sgd_step(p, grad, 0.1)


def test_adam_state_round_trip():
    p = POLICY.init_params(0)
    rng = np.random.default_rng(0)
    a, b = O.Adam(), O.Adam()
    grads = [rng.normal(size=p.values.size) for _ in range(4)]
    x = p
    for g in grads[:2]:
        x = a.step(x, g, 0.01)
    b.load_state_dict(a.state_dict())
    y = x
    for g in grads[2:]:
        x = a.step(x, g, 0.01)
        y = b.step(y, g, 0.01)
    assert np.array_equal(x.values, y.values)


def test_optimizer_schedules():
    opt = O.Optimizer(O.OptimConfig(lr0=0.1), total_steps=20)
    assert opt.lr() == 0.0
    opt = O.Optimizer(O.OptimConfig(lr0=0.1, schedule="constant", optimizer="adam"), total_steps=20)
    assert opt.lr() == 0.1
    _, lr = opt.step(POLICY.init_params(0), np.ones(POLICY.dims.size))
    assert lr == 0.1 and opt.step_count == 1


@pytest.mark.parametrize(
    "bad",
    [{"eps_low": 0.3, "eps_high": 0.2}, {"beta": -1}, {"lr0": 0}, {"batch_size": 0}, {"optimizer": "rmsprop"}, {"schedule": "step"}],
)
def test_optim_config_validation(bad):
    with pytest.raises(ConfigError):
        O.OptimConfig(**bad).validate()


class _Fixed:
    """Scorer with a fixed per-label log-prob table, independent of params."""

    def __init__(self, table):
        self.table = table

    def logprob(self, params, state, action):
        return np.array([self.table[action[0]]])

    def grad_logprob(self, params, state, action, w):
        return np.zeros_like(params.values)


def test_scalar_reward_advantages_seven_of_ten():
    rewards = [1.0] * 7 + [0.0] * 3
    adv = O.group_advantages(rewards)
    std = math.sqrt(0.21)
    assert np.allclose(adv, [(r - 0.7) / std for r in rewards])


def test_scalar_reward_update_filters_uniform_groups():
    params = POLICY.init_params(0)
    scorer = _Fixed({"x": -0.1})
    g = O.ExperienceGroup(None, [("x",)] * 10, [1.0] * 10, [np.array([-0.1])] * 10, O.GroupSource.REWARD_MODEL)
    with pytest.raises(O.InvalidGroupError):
        O.grpo_scalar_reward_update([g], params, O.OptimConfig(), scorer, 0.1)

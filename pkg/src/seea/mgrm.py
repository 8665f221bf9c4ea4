"""Outcome reward model: a three-way classifier over interaction histories.

The classifier reuses the policy's bag-of-embeddings encoder with a 3-unit
head ordered (Success, Continue, Failure). It can be trained two ways:

* supervised, with cross-entropy against simulator labels;
* self-supervised (TTRL): K rollouts per task are labelled by the model, the
  majority label becomes pseudo ground truth, and the model is rewarded
  +1/0 for reproducing it, optimized with the GRPO machinery in ``optim``.

When it stands in for the environment reward inside MCTS, the predicted
label of a rollout's final history is mapped to a scalar by
:class:`LabelMapping`.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from seea import env as E
from seea.env import ELAPSED_BUCKETS, ELAPSED_TOKENS, OUTCOMES, Outcome
from seea.optim import ExperienceGroup, GroupSource, OptimConfig, grpo_scalar_reward_update, is_valid_group, sgd_step
from seea.policy import AgentState, BagNetwork, Dims, InputError, ParamVector, Vocabulary, init_params, log_softmax

log = logging.getLogger(__name__)

# reward-model head order
HEAD = {label: i for i, label in enumerate(OUTCOMES)}


@dataclass(frozen=True)
class LabelMapping:
    success_reward: float = 1.0
    continue_reward: float = 0.0
    failure_reward: float = -1.0

    def validate(self) -> None:
        if not all(np.isfinite([self.success_reward, self.continue_reward, self.failure_reward])):
            raise E.ConfigError("label rewards must be finite")


def label_to_reward(label: Outcome, mapping: LabelMapping = LabelMapping()) -> float:
    return {
        Outcome.SUCCESS: mapping.success_reward,
        Outcome.CONTINUE: mapping.continue_reward,
        Outcome.FAILURE: mapping.failure_reward,
    }[Outcome(label)]


def _pick(scores) -> Outcome:
    """Unique top scorer, otherwise Continue: an undecided vote keeps the episode open."""
    best = max(scores)
    top = [lab for lab in OUTCOMES if scores[HEAD[lab]] == best]
    return top[0] if len(top) == 1 else Outcome.CONTINUE


def majority_vote(labels) -> Outcome:
    if not labels:
        raise InputError("majority_vote needs at least one label")
    counts = Counter(Outcome(lab) for lab in labels)
    return _pick([counts.get(lab, 0) for lab in OUTCOMES])


class RewardModel:
    """Scores AgentStates; also acts as the scorer for label-token GRPO.

    The encoder sees the policy's context window plus one elapsed-step
    marker, since a fixed window alone cannot tell how long the episode ran.
    """

    def __init__(self, vocab: Vocabulary, *, embed: int = 16, hidden: int = 32, window: int = 32, horizon: int = 30):
        self.vocab = vocab
        self.dims = Dims(len(vocab), embed, hidden, len(OUTCOMES))
        self.net = BagNetwork(vocab, self.dims, window)
        self.horizon = horizon
        self._elapsed = vocab.ids(ELAPSED_TOKENS)

    @classmethod
    def for_env(cls, env_config: E.EnvConfig, *, vocab_size=64, embed=16, hidden=32, window=32) -> "RewardModel":
        vocab = Vocabulary.for_env(env_config, vocab_size)
        return cls(vocab, embed=embed, hidden=hidden, window=window, horizon=env_config.max_episode_steps)

    def init_params(self, seed: int) -> ParamVector:
        return init_params(seed, self.dims)

    def context_ids(self, state: AgentState) -> list[int]:
        bucket = min(len(state.history) * ELAPSED_BUCKETS // self.horizon, ELAPSED_BUCKETS)
        return self.net.context_ids(state) + [self._elapsed[bucket]]

    def _forward(self, params, states):
        rows = [self.context_ids(s) for s in states]
        feats = np.stack([self.net.encode_ids(params, r) for r in rows])
        hidden, logits = self.net.forward(params, feats)
        return rows, feats, hidden, logits

    def logits(self, params: ParamVector, state: AgentState) -> np.ndarray:
        return self._forward(params, [state])[3][0]

    def distribution(self, params: ParamVector, state: AgentState) -> np.ndarray:
        return np.exp(log_softmax(self.logits(params, state)))

    def predict(self, params: ParamVector, state: AgentState, temperature: float = 0.0, rng=None):
        """(label, log-prob of label, 3-way distribution at temperature 1)."""
        if temperature < 0:
            raise InputError("temperature must be >= 0")
        z = self.logits(params, state)
        lp = log_softmax(z)
        if temperature == 0.0:
            label = _pick(z)
        else:
            q = np.exp(log_softmax(z / temperature))
            label = OUTCOMES[min(int(np.searchsorted(np.cumsum(q), rng.random(), side="right")), 2)]
        return label, float(lp[HEAD[label]]), np.exp(lp)

    # scorer protocol used by optim: an "action" is a one-token label tuple
    def logprob(self, params: ParamVector, state: AgentState, action) -> np.ndarray:
        (label,) = action
        return np.array([log_softmax(self.logits(params, state))[HEAD[Outcome(label)]]])

    def grad_logprob(self, params: ParamVector, state: AgentState, action, token_weights) -> np.ndarray:
        (label,) = action
        w = float(np.asarray(token_weights, dtype=np.float64).reshape(-1)[0])
        rows, feats, hidden, logits = self._forward(params, [state])
        p = np.exp(log_softmax(logits[0]))
        dlogits = -w * p
        dlogits[HEAD[Outcome(label)]] += w
        return self.net.backward(params, rows, feats, hidden, dlogits[None, :])

    def ce_loss_and_grad(self, params: ParamVector, batch) -> tuple[float, np.ndarray]:
        """Mean cross-entropy over (state, label) pairs and its gradient."""
        if not batch:
            raise InputError("empty batch")
        states = [s for s, _ in batch]
        targets = np.array([HEAD[Outcome(lab)] for _, lab in batch])
        rows, feats, hidden, logits = self._forward(params, states)
        lp = log_softmax(logits)
        n = len(batch)
        loss = -float(lp[np.arange(n), targets].mean())
        dlogits = np.exp(lp)
        dlogits[np.arange(n), targets] -= 1.0
        return loss, self.net.backward(params, rows, feats, hidden, dlogits / n)


def supervised_update(rm: RewardModel, params: ParamVector, batch, lr: float) -> tuple[ParamVector, float]:
    """One SGD step on mean cross-entropy. Returns (new params, loss before the step)."""
    loss, grad = rm.ce_loss_and_grad(params, batch)
    return sgd_step(params, grad, lr), loss


def fit_supervised(rm: RewardModel, params: ParamVector, data, *, steps: int, lr: float, batch_size: int, rng, optimizer=None):
    """Minibatch cross-entropy training; ``optimizer`` (an ``optim.Adam``) replaces plain SGD when given."""
    data = list(data)
    if not data:
        return params
    for _ in range(steps):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        _, grad = rm.ce_loss_and_grad(params, [data[i] for i in idx])
        params = optimizer.step(params, grad, lr) if optimizer is not None else sgd_step(params, grad, lr)
    return params


def rollout(policy, params, world, agent: AgentState, rng, temperature: float = 1.0):
    """Play to the end of the episode. Returns (final world, final agent state)."""
    done = world.goal_reached or world.step_count >= world.max_episode_steps
    while not done:
        action, _ = policy.sample_action(params, agent, temperature, rng)
        world, obs, _, done = E.step(world, action)
        agent = agent.append(action, obs)
    return world, agent


@dataclass
class PseudoLabelDiagnostics:
    votes: dict
    pseudo: Outcome
    gt_labels: list  # simulator outcomes, kept for reporting only


def ttrl_generate_pseudo_gt(policy, policy_params, rm: RewardModel, rm_params, env_config, task_seed: int, K: int = 10, rng=None):
    """K temperature-1 rollouts from one task; every final history gets the majority label."""
    if K < 3:
        raise E.ConfigError("TTRL needs K >= 3 rollouts per task")
    finals, votes, gt = [], [], []
    world0, obs0 = E.reset(task_seed, env_config)
    for _ in range(K):
        world, agent = rollout(policy, policy_params, world0, AgentState(obs0), rng)
        finals.append(agent)
        votes.append(rm.predict(rm_params, agent, 0.0)[0])
        gt.append(E.gt_outcome(world))
    pseudo = majority_vote(votes)
    diag = PseudoLabelDiagnostics(dict(Counter(v.value for v in votes)), pseudo, gt)
    return [(agent, pseudo) for agent in finals], diag


@dataclass
class TTRLStats:
    groups: int = 0
    kept: int = 0
    agreement: float = 0.0
    skipped: bool = False


def ttrl_update(rm: RewardModel, params: ParamVector, records, config: OptimConfig, lr: float, rng, group_size: int = 10):
    """Sample ``group_size`` labels per record, reward matches with 1, apply one GRPO step.

    Returns (new params, TTRLStats). Degenerate batches leave the parameters as they were.
    """
    if not records:
        raise InputError("ttrl_update needs at least one record")
    groups, hits = [], 0
    for state, pseudo in records:
        sampled = [rm.predict(params, state, 1.0, rng)[0] for _ in range(group_size)]
        rewards = [1.0 if s == pseudo else 0.0 for s in sampled]
        hits += sum(rewards)
        actions = [(s.value,) for s in sampled]
        groups.append(
            ExperienceGroup(
                state=state,
                actions=actions,
                pr=rewards,
                old_logprobs=[rm.logprob(params, state, a) for a in actions],
                source=GroupSource.REWARD_MODEL,
            )
        )
    stats = TTRLStats(groups=len(groups), agreement=hits / (len(groups) * group_size))
    stats.kept = sum(is_valid_group(g.pr) for g in groups)
    if stats.kept == 0:
        log.warning("ttrl_update: all %d groups have identical rewards; skipping", len(groups))
        stats.skipped = True
        return params, stats
    new, _ = grpo_scalar_reward_update(groups, params, config, rm, lr)
    return new, stats


class MGRMReward:
    """MCTS reward source backed by the classifier: zero per step, mapped label at the end."""

    def __init__(self, rm: RewardModel, params: ParamVector, mapping: LabelMapping = LabelMapping()):
        self.rm, self.params, self.mapping = rm, params, mapping

    def step(self, env_reward: float) -> float:
        return 0.0

    def final(self, agent_state: AgentState) -> float:
        return label_to_reward(self.rm.predict(self.params, agent_state, 0.0)[0], self.mapping)


@dataclass
class AccuracyReport:
    correct: dict
    total: dict

    def percent(self, label=None) -> float:
        c = sum(self.correct.values()) if label is None else self.correct[label]
        t = sum(self.total.values()) if label is None else self.total[label]
        return 100.0 * c / t if t else 0.0

    @property
    def overall(self) -> float:
        return self.percent() / 100.0

    def rows(self) -> list[tuple[str, int, int, float]]:
        out = [(lab.value, self.correct[lab], self.total[lab], round(self.percent(lab), 2)) for lab in OUTCOMES]
        out.append(("Overall", sum(self.correct.values()), sum(self.total.values()), round(self.percent(), 2)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "correct", "total", "percent"])
        for name, c, t, pct in self.rows():
            w.writerow([name, c, t, f"{pct:.2f}"])
        return buf.getvalue()


def accuracy_from_predictions(pairs) -> AccuracyReport:
    """Report from (predicted, gt) label pairs."""
    pairs = list(pairs)
    if not pairs:
        raise InputError("accuracy needs a non-empty labeled set")
    correct = {lab: 0 for lab in OUTCOMES}
    total = {lab: 0 for lab in OUTCOMES}
    for pred, gt in pairs:
        gt = Outcome(gt)
        total[gt] += 1
        correct[gt] += Outcome(pred) == gt
    return AccuracyReport(correct, total)


def eval_accuracy(rm: RewardModel, params: ParamVector, labeled) -> AccuracyReport:
    return accuracy_from_predictions((rm.predict(params, s, 0.0)[0], gt) for s, gt in labeled)


def labeled_states(policy, policy_params, env_config, seeds, rng, *, per_episode: int = 3, temperature: float = 1.0):
    """GT-labelled states from policy rollouts: the final history plus
    ``per_episode - 1`` uniformly drawn intermediate prefixes per episode."""
    out = []
    for seed in seeds:
        world, obs = E.reset(int(seed), env_config)
        agent = AgentState(obs)
        worlds, agents = [world], [agent]
        world, agent = _play(policy, policy_params, world, agent, rng, temperature, worlds, agents)
        out.append((agents[-1], E.gt_outcome(worlds[-1])))
        if per_episode > 1 and len(agents) > 1:
            picks = rng.choice(len(agents) - 1, size=min(per_episode - 1, len(agents) - 1), replace=False)
            out.extend((agents[i], E.gt_outcome(worlds[i])) for i in sorted(picks))
    return out


def _play(policy, params, world, agent, rng, temperature, worlds, agents):
    done = False
    while not done:
        action, _ = policy.sample_action(params, agent, temperature, rng)
        world, obs, _, done = E.step(world, action)
        agent = agent.append(action, obs)
        worlds.append(world)
        agents.append(agent)
    return world, agent


def labeled_to_json(state: AgentState, label: Outcome) -> dict:
    return {"state": state.to_json(), "label": Outcome(label).value}


def labeled_from_json(data: dict) -> tuple[AgentState, Outcome]:
    return AgentState.from_json(data["state"]), Outcome(data["label"])

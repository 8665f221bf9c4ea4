"""Shared oracles: central finite differences and hand-built MDPs with
enumerable actions for checking the search against brute force."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from seea.env import EOS, Outcome
from seea.mgrm import LabelMapping, label_to_reward
from seea.policy import AgentState


def central_differences(f, x: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[j] = (f(xp) - f(xm)) / (2 * h)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor only matters where both vanish."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def support_coords(grad: np.ndarray, k: int, rng) -> np.ndarray:
    """k coordinates, drawn from where the analytic gradient is non-zero when possible."""
    nz = np.flatnonzero(grad)
    pool = nz if len(nz) >= k else np.arange(len(grad))
    return rng.choice(pool, size=min(k, len(pool)), replace=False)


@dataclass(frozen=True)
class ToyWorld:
    path: tuple[str, ...] = ()


class TreeMDP:
    """Deterministic MDP over action words with ``depth`` steps per episode.

    ``rewards[path]`` is the reward for arriving at ``path``; the episode
    ends at ``depth`` or on reaching a path listed in ``goals``.
    """

    def __init__(self, words, depth: int, rewards: dict, goals=frozenset()):
        self.words = tuple(words)
        self.actions = tuple((w, EOS) for w in self.words)
        self.depth = depth
        self.rewards = rewards
        self.goals = frozenset(goals)

    def clone(self, world: ToyWorld) -> ToyWorld:
        return world

    def step(self, world: ToyWorld, action):
        nxt = ToyWorld(world.path + (action[0],))
        reward = self.rewards.get(nxt.path, 0.0)
        done = len(nxt.path) >= self.depth or nxt.path in self.goals
        return nxt, self.observe(nxt), reward, done

    def gt_outcome(self, world: ToyWorld) -> Outcome:
        if world.path in self.goals:
            return Outcome.SUCCESS
        if len(world.path) >= self.depth:
            return Outcome.FAILURE
        return Outcome.CONTINUE

    def observe(self, world: ToyWorld) -> tuple[str, ...]:
        return ("at", *world.path, self.gt_outcome(world).value)

    def replay_rewards(self, words) -> list[float]:
        world, out = ToyWorld(), []
        for w in words:
            world, _, r, _ = self.step(world, (w, EOS))
            out.append(r)
        return out

    def root(self) -> tuple[AgentState, ToyWorld]:
        return AgentState(("start",)), ToyWorld()


class UniformPolicy:
    """Samples uniformly among a fixed action list; the log-probs are exact."""

    def __init__(self, actions):
        self.actions = tuple(actions)

    def sample_action(self, params, state, temperature, rng):
        a = self.actions[int(rng.integers(len(self.actions)))]
        return a, self.logprob(params, state, a)

    def logprob(self, params, state, action):
        return np.array([-math.log(len(self.actions)), 0.0])


class LabelReward:
    """Terminal reward from the outcome label carried in the last observation."""

    def __init__(self, mapping: LabelMapping = LabelMapping()):
        self.mapping = mapping

    def step(self, env_reward: float) -> float:
        return 0.0

    def final(self, agent_state: AgentState) -> float:
        return label_to_reward(Outcome(agent_state.history[-1][1][-1]), self.mapping)


class TraversalLog:
    """Patches ``mcts.simulate`` and ``mcts.backup`` to record, for every
    backup, the full word sequence from the root: path actions then rollout."""

    def __init__(self):
        self.sequences: list[tuple[int, tuple[str, ...]]] = []  # (path length, words)
        self._pending: list[tuple[str, ...]] = []

    def __enter__(self):
        from unittest import mock

        from seea import mcts as M

        real_sim, real_backup = M.simulate, M.backup

        def simulate(tree, node_id, *args, **kw):
            actions, label, rewards = real_sim(tree, node_id, *args, **kw)
            self._pending.append(tuple(a[0] for a in actions))
            return actions, label, rewards

        def backup(tree, path, rewards):
            words = tuple(tree.nodes[n].children[e].action[0] for n, e in path)
            rollout = self._pending.pop() if self._pending else ()
            self.sequences.append((len(path), words + rollout))
            return real_backup(tree, path, rewards)

        self._patches = [mock.patch.object(M, "simulate", simulate), mock.patch.object(M, "backup", backup)]
        for p in self._patches:
            p.start()
        return self

    def __exit__(self, *exc):
        for p in self._patches:
            p.stop()
        return False


def brute_force_q(mdp: TreeMDP, log: TraversalLog, gamma: float) -> dict:
    """Edge (keyed by its word path from the root) -> mean discounted return
    over the recorded traversals, recomputed by replaying them in the MDP."""
    returns: dict[tuple[str, ...], list[float]] = {}
    for depth, words in log.sequences:
        rewards = mdp.replay_rewards(words)
        for t in range(depth):
            value = sum(gamma**k * r for k, r in enumerate(rewards[t:]))
            returns.setdefault(words[: t + 1], []).append(value)
    return {k: sum(v) / len(v) for k, v in returns.items()}


def tree_edges(tree):
    """(word path, EdgeStat) for every candidate edge in the tree."""
    for node in tree.nodes:
        prefix = tuple(a[0] for a, _ in node.agent_state.history)
        for edge in node.children:
            yield prefix + (edge.action[0],), edge


def random_two_level_mdp(rng, n_actions: int = 3) -> TreeMDP:
    words = tuple(f"a{i}" for i in range(n_actions))
    rewards = {}
    for w1 in words:
        rewards[(w1,)] = float(rng.choice([0.0, 0.0, 0.5, -0.25]))
        for w2 in words:
            rewards[(w1, w2)] = float(rng.choice([0.0, 1.0, -1.0]))
    return TreeMDP(words, 2, rewards)


# A world small enough for a self-evolution iteration to finish in about a second.
TINY_SETTINGS = {
    "run": {"iterations": 2, "eval_episodes": 5, "expected_groups_per_episode": 0.5},
    "env": {"n_receptacles": 2, "n_openable": 1, "n_objects": 1, "max_episode_steps": 8},
    "search": {"iterations": 16, "max_depth": 8, "G": 4},
    "optim": {
        "valid_samples_per_iteration": 8,
        "batch_size": 4,
        "steps_per_iter": 2,
        "optimizer": "adam",
        "lr0": 0.05,
        "schedule": "constant",
    },
    "model": {"embed": 8, "hidden": 8, "window": 16},
    "rm": {
        "votes": 3,
        "ttrl_tasks": 2,
        "sft_episodes": 10,
        "sft_steps": 10,
        "eval_episodes": 12,
        "calib_every": 5,
        "calib_episodes": 3,
        "calib_steps": 3,
        "seed_sft_episodes": 5,
    },
}


def tiny_config(**run):
    """RunConfig for TINY_SETTINGS, with top-level run fields overridden."""
    from seea import evolve as V

    data = {k: dict(v) for k, v in TINY_SETTINGS.items() if k != "run"}
    return V.RunConfig.from_dict({**TINY_SETTINGS["run"], **data, **run})


def tiny_set_flags() -> list[str]:
    """The same settings as repeated ``--set SECTION.KEY=VALUE`` CLI flags."""
    flags = []
    for section, values in TINY_SETTINGS.items():
        for key, value in values.items():
            flags += ["--set", f"{section}.{key}={value}"]
    return flags

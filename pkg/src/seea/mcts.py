"""Monte Carlo tree search over MiniHouse episodes.

Each iteration runs select -> expand -> simulate -> backup. Edge values
Q(s, a) are empirical means of discounted returns and later serve as
process rewards for Tree-GRPO.

Pruning: a newly created node receives the full set of G candidate actions
with probability ``p_expand_all`` as long as fewer than ``path_budget``
full expansions already sit on its root path; otherwise it gets one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from seea import env as E
from seea.env import ConfigError, Outcome
from seea.optim import ExperienceGroup, GroupSource
from seea.policy import AgentState


@dataclass(frozen=True)
class SearchConfig:
    iterations: int = 30
    max_depth: int = 30
    G: int = 5
    c: float = 1.41421356
    gamma: float = 0.99
    p_expand_all: float = 0.5
    path_budget: float = 5.0  # math.inf disables the budget
    expand_temperature: float = 1.0
    rollout_temperature: float = 1.0
    rollouts_per_expansion: int = 1

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("search.iterations must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("search.max_depth must be >= 1")
        if self.G < 2:
            raise ConfigError("search.G must be >= 2")
        if not 0 < self.gamma <= 1:
            raise ConfigError("search.gamma must be in (0, 1]")
        if not 0 <= self.p_expand_all <= 1:
            raise ConfigError("search.p_expand_all must be in [0, 1]")
        if self.path_budget < 1:
            raise ConfigError("search.path_budget must be >= 1")
        if self.rollouts_per_expansion < 1:
            raise ConfigError("search.rollouts_per_expansion must be >= 1")


@dataclass
class EdgeStat:
    action: tuple[str, ...]
    N: int = 0
    R_sum: float = 0.0
    child: int | None = None

    @property
    def Q(self) -> float:
        return self.R_sum / self.N if self.N > 0 else 0.0


@dataclass
class SearchNode:
    node_id: int
    parent_id: int | None
    parent_edge: int | None
    depth: int
    agent_state: AgentState
    world_state: E.WorldState
    reward_in: float = 0.0
    children: list[EdgeStat] = field(default_factory=list)
    fully_expanded: bool = False
    terminal: Outcome | None = None

    @property
    def inbound_action(self):
        return self.agent_state.history[-1][0] if self.agent_state.history else None


class GroundTruthReward:
    """Environment reward; nothing extra at trajectory end."""

    def step(self, env_reward: float) -> float:
        return env_reward

    def final(self, agent_state: AgentState) -> float:
        return 0.0


@dataclass
class SearchTree:
    """``dynamics`` supplies ``step``, ``gt_outcome`` and ``clone`` with the
    MiniHouse signatures; the env module itself by default."""

    config: SearchConfig
    nodes: list[SearchNode] = field(default_factory=list)
    root_id: int = 0
    dynamics: object = E

    @property
    def root(self) -> SearchNode:
        return self.nodes[self.root_id]

    def full_expansions_on_path(self, node_id: int | None) -> int:
        count = 0
        while node_id is not None:
            node = self.nodes[node_id]
            count += node.fully_expanded
            node_id = node.parent_id
        return count

    def parent_visits(self, node: SearchNode) -> int:
        if node.parent_id is None:
            return max(1, sum(e.N for e in node.children))
        return max(1, self.nodes[node.parent_id].children[node.parent_edge].N)

    def dump_jsonl(self) -> str:
        lines = []
        for n in self.nodes:
            lines.append(
                json.dumps(
                    {
                        "id": n.node_id,
                        "parent": n.parent_id,
                        "depth": n.depth,
                        "action_tokens": list(n.inbound_action) if n.inbound_action else [],
                        "fully_expanded": n.fully_expanded,
                        "terminal": n.terminal.value if n.terminal else None,
                        "edges": [
                            {"action_tokens": list(e.action), "N": e.N, "Q": e.Q, "R_sum": e.R_sum, "child": e.child}
                            for e in n.children
                        ],
                    }
                )
            )
        return "\n".join(lines) + "\n"


def uct_score(edge: EdgeStat, parent_visits: int, c: float) -> float:
    return edge.Q + c * math.sqrt(math.log(parent_visits) / (1 + edge.N))


def discounted_return(rewards, gamma: float) -> float:
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


def select(tree: SearchTree, from_id: int | None = None) -> list[tuple[int, int]]:
    """Descend by max UCT (lowest index on ties) until an edge without a
    child, or whose child is terminal."""
    node = tree.nodes[tree.root_id if from_id is None else from_id]
    path: list[tuple[int, int]] = []
    while True:
        pv = tree.parent_visits(node)
        scores = [uct_score(e, pv, tree.config.c) for e in node.children]
        best = int(np.argmax(scores))
        path.append((node.node_id, best))
        child = node.children[best].child
        if child is None or tree.nodes[child].terminal is not None:
            return path
        node = tree.nodes[child]


def _sample_candidates(tree, node, policy, params, rng, *, full: bool):
    cfg = tree.config
    target = cfg.G if full else 1
    attempts = 3 * cfg.G if full else 1
    found: list[tuple[str, ...]] = []
    for _ in range(attempts):
        action, _ = policy.sample_action(params, node.agent_state, cfg.expand_temperature, rng)
        if action not in found:
            found.append(action)
        if len(found) == target:
            break
    node.children = [EdgeStat(a) for a in found]
    node.fully_expanded = full


def _populate(tree, node, policy, params, rng) -> None:
    cfg = tree.config
    coin = rng.random()
    budget_left = tree.full_expansions_on_path(node.parent_id) < cfg.path_budget
    _sample_candidates(tree, node, policy, params, rng, full=coin < cfg.p_expand_all and budget_left)


def new_tree(root_agent: AgentState, root_world, policy, params, config: SearchConfig, rng, dynamics=E) -> SearchTree:
    tree = SearchTree(config, dynamics=dynamics)
    root = SearchNode(0, None, None, 0, root_agent, dynamics.clone(root_world))
    tree.nodes.append(root)
    _populate(tree, root, policy, params, rng)
    return tree


def expand(tree: SearchTree, leaf_path, policy, params, rng, reward_source) -> int:
    parent_id, edge_idx = leaf_path[-1]
    parent = tree.nodes[parent_id]
    edge = parent.children[edge_idx]
    if edge.child is not None:
        raise ValueError("selected edge already has a child")
    world, obs, env_reward, done = tree.dynamics.step(parent.world_state, edge.action)
    agent = parent.agent_state.append(edge.action, obs)
    node = SearchNode(len(tree.nodes), parent_id, edge_idx, parent.depth + 1, agent, world)
    node.reward_in = reward_source.step(env_reward)
    tree.nodes.append(node)
    edge.child = node.node_id
    if done or node.depth >= tree.config.max_depth:
        node.terminal = tree.dynamics.gt_outcome(world)
        node.reward_in += reward_source.final(agent)
    else:
        _populate(tree, node, policy, params, rng)
    return node.node_id


def simulate(tree: SearchTree, node_id: int, policy, params, rng, reward_source):
    """Roll out from a node; returns (actions, final label, per-step rewards)."""
    node = tree.nodes[node_id]
    world, agent, depth = node.world_state, node.agent_state, node.depth
    actions: list[tuple[str, ...]] = []
    rewards: list[float] = []
    done = node.terminal is not None
    while not done and depth < tree.config.max_depth:
        action, _ = policy.sample_action(params, agent, tree.config.rollout_temperature, rng)
        world, obs, env_reward, done = tree.dynamics.step(world, action)
        agent = agent.append(action, obs)
        actions.append(action)
        rewards.append(reward_source.step(env_reward))
        depth += 1
    label = tree.dynamics.gt_outcome(world)
    if rewards:
        rewards[-1] += reward_source.final(agent)
    return actions, label, rewards


def backup(tree: SearchTree, path, rewards) -> None:
    """``rewards[t]`` is the reward for the transition taken at path depth t;
    entries past the path come from the rollout."""
    for t, (node_id, edge_idx) in enumerate(path):
        edge = tree.nodes[node_id].children[edge_idx]
        edge.N += 1
        edge.R_sum += discounted_return(rewards[t:], tree.config.gamma)


def run_search(root_agent, root_world, policy, params, reward_source, config: SearchConfig, rng, dynamics=E) -> SearchTree:
    config.validate()
    tree = new_tree(root_agent, root_world, policy, params, config, rng, dynamics)
    for _ in range(config.iterations):
        path = select(tree)
        node_id, edge_idx = path[-1]
        edge = tree.nodes[node_id].children[edge_idx]
        if edge.child is None:
            leaf = expand(tree, path, policy, params, rng, reward_source)
        else:
            leaf = edge.child
        path_rewards = [tree.nodes[tree.nodes[n].children[e].child].reward_in for n, e in path]
        if tree.nodes[leaf].terminal is not None:
            backup(tree, path, path_rewards)
            continue
        for _ in range(config.rollouts_per_expansion):
            _, _, rollout = simulate(tree, leaf, policy, params, rng, reward_source)
            backup(tree, path, path_rewards + rollout)
    return tree


def extract_experience(tree: SearchTree, policy, params, min_group_size: int = 2, tag: int = 0) -> list[ExperienceGroup]:
    """One group per non-terminal node with at least ``min_group_size`` visited
    candidate edges; unvisited candidates carry no value estimate and are left out."""
    groups = []
    for node in tree.nodes:
        if node.terminal is not None:
            continue
        visited = [e for e in node.children if e.N >= 1]
        if len(visited) < min_group_size:
            continue
        actions = [e.action for e in visited]
        groups.append(
            ExperienceGroup(
                state=node.agent_state,
                actions=actions,
                pr=[e.Q for e in visited],
                old_logprobs=[policy.logprob(params, node.agent_state, a) for a in actions],
                source=GroupSource.POLICY_TREE,
                tag=tag,
            )
        )
    return groups

"""MiniHouse: a deterministic ALFWorld-style text household.

The agent moves between receptacles, opens and closes the openable ones,
picks objects up and puts them down. Actions and observations are token
tuples over a fixed vocabulary (see :func:`build_vocabulary`).

Action grammar::

    go to <receptacle> <eos>
    open <receptacle> <eos>
    close <receptacle> <eos>
    take <object> <eos>        # from the receptacle the agent is at
    put <object> <eos>         # into the receptacle the agent is at

Anything else, or a grammatical action whose preconditions fail, yields
``nothing happens`` and only advances the step counter.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

BOS, EOS, SEP = "<bos>", "<eos>", "<sep>"
VERBS = ("go", "open", "close", "take", "put")
ACTION_WORDS = VERBS + ("to",)
OBS_WORDS = (
    "you", "arrive", "at", "it", "is", "closed", "see", "nothing", "happens",
    "from", "in", "and",
)

SOURCE_POOL = ("table1", "shelf1", "shelf2", "counter1", "drawer1", "drawer2", "desk1", "bed1")
TARGET_POOL = ("fridge1", "cabinet1", "sinkbasin1", "safe1", "bin1", "cabinet2")
OPENABLE_ORDER = ("drawer1", "fridge1", "cabinet1", "drawer2", "safe1", "cabinet2")
OBJECT_POOL = ("apple", "mug", "book", "key", "pen", "cup", "plate", "knife", "towel", "cd")

NOTHING_HAPPENS: tuple[str, ...] = ("nothing", "happens")

# coarse elapsed-step markers read by the reward model, never emitted by the agent
ELAPSED_BUCKETS = 4
ELAPSED_TOKENS = tuple(f"<elapsed{k}>" for k in range(ELAPSED_BUCKETS + 1))


class ConfigError(ValueError):
    """Raised for invalid run or environment configuration."""


class Outcome(str, enum.Enum):
    SUCCESS = "Success"
    CONTINUE = "Continue"
    FAILURE = "Failure"


# fixed head order for the reward model
OUTCOMES: tuple[Outcome, ...] = (Outcome.SUCCESS, Outcome.CONTINUE, Outcome.FAILURE)


class TaskKind(str, enum.Enum):
    PUT_SINGLE = "put_single"
    PUT_TWO = "put_two"


@dataclass(frozen=True)
class EnvConfig:
    n_rooms: int = 2
    n_receptacles: int = 8
    n_openable: int = 3
    n_objects: int = 6
    max_episode_steps: int = 30
    task_kinds: tuple[TaskKind, ...] = (TaskKind.PUT_SINGLE,)
    p_closed: float = 0.5

    def validate(self) -> None:
        if self.n_rooms < 1:
            raise ConfigError("env.n_rooms must be >= 1")
        if not 2 <= self.n_receptacles <= len(SOURCE_POOL) + len(TARGET_POOL):
            raise ConfigError(f"env.n_receptacles must be in [2, {len(SOURCE_POOL) + len(TARGET_POOL)}]")
        if not 1 <= self.n_objects <= len(OBJECT_POOL):
            raise ConfigError(f"env.n_objects must be in [1, {len(OBJECT_POOL)}]")
        if self.max_episode_steps < 1:
            raise ConfigError("env.max_episode_steps must be >= 1")
        if not self.task_kinds:
            raise ConfigError("env.task_kinds must be non-empty")
        if TaskKind.PUT_TWO in self.task_kinds and self.n_objects < 2:
            raise ConfigError("put_two tasks need env.n_objects >= 2")
        if not 0.0 <= self.p_closed <= 1.0:
            raise ConfigError("env.p_closed must be in [0, 1]")
        n_open_max = len([r for r in OPENABLE_ORDER if r in self.receptacles])
        if not 0 <= self.n_openable <= n_open_max:
            raise ConfigError(f"env.n_openable must be in [0, {n_open_max}] for this layout")

    @property
    def n_targets(self) -> int:
        return max(1, (3 * self.n_receptacles) // 8)

    @property
    def sources(self) -> tuple[str, ...]:
        return SOURCE_POOL[: self.n_receptacles - self.n_targets]

    @property
    def targets(self) -> tuple[str, ...]:
        return TARGET_POOL[: self.n_targets]

    @property
    def receptacles(self) -> tuple[str, ...]:
        return self.sources + self.targets

    @property
    def openable(self) -> tuple[str, ...]:
        present = [r for r in OPENABLE_ORDER if r in self.receptacles]
        return tuple(present[: self.n_openable])

    @property
    def objects(self) -> tuple[str, ...]:
        return OBJECT_POOL[: self.n_objects]


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    target_objects: tuple[str, ...]
    target_receptacle: str
    instruction_tokens: tuple[str, ...]


@dataclass
class WorldState:
    rooms: list[list[str]]
    receptacle_contents: dict[str, set[str]]
    receptacle_open: dict[str, bool]
    agent_at: str
    holding: str | None
    step_count: int
    task: TaskSpec
    rng_seed: int
    max_episode_steps: int
    goal_reached: bool = False

    def objects(self) -> list[str]:
        out = [o for objs in self.receptacle_contents.values() for o in objs]
        if self.holding is not None:
            out.append(self.holding)
        return out

    def accessible(self, recep: str) -> bool:
        return self.receptacle_open.get(recep, True)

    def snapshot(self) -> dict:
        """Plain-data view with sorted containers, for equality checks and logs."""
        return {
            "rooms": [list(r) for r in self.rooms],
            "contents": {r: sorted(o) for r, o in sorted(self.receptacle_contents.items())},
            "open": dict(sorted(self.receptacle_open.items())),
            "agent_at": self.agent_at,
            "holding": self.holding,
            "step_count": self.step_count,
            "task": {
                "kind": self.task.kind.value,
                "target_objects": list(self.task.target_objects),
                "target_receptacle": self.task.target_receptacle,
                "instruction_tokens": list(self.task.instruction_tokens),
            },
            "rng_seed": self.rng_seed,
            "goal_reached": self.goal_reached,
        }


def build_vocabulary(config: EnvConfig) -> list[str]:
    """Every token the environment can emit or accept, in a stable order."""
    return [BOS, EOS, SEP, *ACTION_WORDS, *OBS_WORDS, *config.objects, *config.receptacles, *ELAPSED_TOKENS]


def _locate(state: WorldState, obj: str) -> str | None:
    for recep, objs in state.receptacle_contents.items():
        if obj in objs:
            return recep
    return None


def reset(task_seed: int, config: EnvConfig) -> tuple[WorldState, tuple[str, ...]]:
    config.validate()
    rng = np.random.default_rng(task_seed)
    recs = list(config.receptacles)
    sources, targets = list(config.sources), list(config.targets)

    order = rng.permutation(len(recs))
    rooms: list[list[str]] = [[] for _ in range(config.n_rooms)]
    for i, idx in enumerate(order):
        rooms[i % config.n_rooms].append(recs[idx])

    contents: dict[str, set[str]] = {r: set() for r in recs}
    for obj in config.objects:
        contents[sources[rng.integers(len(sources))]].add(obj)
    is_open = {r: bool(rng.random() >= config.p_closed) for r in config.openable}

    kind = config.task_kinds[rng.integers(len(config.task_kinds))]
    n_targets = 2 if kind is TaskKind.PUT_TWO else 1
    picked = rng.choice(len(config.objects), size=n_targets, replace=False)
    target_objects = tuple(config.objects[i] for i in sorted(picked))
    target = targets[rng.integers(len(targets))]
    agent_at = recs[rng.integers(len(recs))]

    if kind is TaskKind.PUT_TWO:
        instruction = ("put", target_objects[0], "and", target_objects[1], "in", target)
    else:
        instruction = ("put", target_objects[0], "in", target)
    task = TaskSpec(kind, target_objects, target, instruction)
    state = WorldState(
        rooms=rooms,
        receptacle_contents=contents,
        receptacle_open=is_open,
        agent_at=agent_at,
        holding=None,
        step_count=0,
        task=task,
        rng_seed=int(task_seed),
        max_episode_steps=config.max_episode_steps,
    )
    return state, initial_observation(state)


def initial_observation(state: WorldState) -> tuple[str, ...]:
    hints: list[str] = []
    for obj in state.task.target_objects:
        hints += [obj, "at", _locate(state, obj) or state.agent_at]
    return (*state.task.instruction_tokens, *hints)


def goal_satisfied(state: WorldState) -> bool:
    placed = state.receptacle_contents[state.task.target_receptacle]
    return all(o in placed for o in state.task.target_objects)


def _strip(action: tuple[str, ...]) -> tuple[str, ...]:
    return action[:-1] if action and action[-1] == EOS else action


def parse_action(action: tuple[str, ...], state: WorldState) -> tuple[str, str] | None:
    """(verb, argument) for a grammatical action, else None."""
    body = _strip(tuple(action))
    if len(action) == 0 or action[-1] != EOS:
        return None
    recs = state.receptacle_contents
    objs = set(state.objects())
    if len(body) == 3 and body[:2] == ("go", "to") and body[2] in recs:
        return "go", body[2]
    if len(body) == 2 and body[0] in ("open", "close") and body[1] in recs:
        return body[0], body[1]
    if len(body) == 2 and body[0] in ("take", "put") and body[1] in objs:
        return body[0], body[1]
    return None


def _view(state: WorldState, recep: str) -> tuple[str, ...]:
    objs = sorted(state.receptacle_contents[recep])
    return ("you", "see", *objs) if objs else ("you", "see", "nothing")


def _apply(state: WorldState, verb: str, arg: str) -> tuple[str, ...] | None:
    """Mutate state for a valid action and return its observation, else None."""
    here = state.agent_at
    if verb == "go":
        state.agent_at = arg
        if not state.accessible(arg):
            return ("you", "arrive", "at", arg, "it", "is", "closed")
        return ("you", "arrive", "at", arg, *_view(state, arg))
    if verb == "open":
        if arg != here or arg not in state.receptacle_open or state.receptacle_open[arg]:
            return None
        state.receptacle_open[arg] = True
        return ("you", "open", arg, *_view(state, arg))
    if verb == "close":
        if arg != here or not state.receptacle_open.get(arg, False):
            return None
        state.receptacle_open[arg] = False
        return ("you", "close", arg)
    if verb == "take":
        if state.holding is not None or not state.accessible(here):
            return None
        if arg not in state.receptacle_contents[here]:
            return None
        state.receptacle_contents[here].remove(arg)
        state.holding = arg
        return ("you", "take", arg, "from", here)
    if verb == "put":
        if state.holding != arg or not state.accessible(here):
            return None
        state.receptacle_contents[here].add(arg)
        state.holding = None
        return ("you", "put", arg, "in", here)
    return None


def step(state: WorldState, action: tuple[str, ...]) -> tuple[WorldState, tuple[str, ...], float, bool]:
    """Advance one step. The input state is never mutated."""
    nxt = clone(state)
    nxt.step_count += 1
    obs = None
    parsed = parse_action(tuple(action), nxt)
    if parsed is not None and not state.goal_reached:
        obs = _apply(nxt, *parsed)
    if obs is None:
        obs = NOTHING_HAPPENS
    reward = 0.0
    if not nxt.goal_reached and goal_satisfied(nxt):
        nxt.goal_reached = True
        reward = 1.0
    done = nxt.goal_reached or nxt.step_count >= nxt.max_episode_steps
    return nxt, obs, reward, done


def gt_outcome(state: WorldState) -> Outcome:
    if state.goal_reached or goal_satisfied(state):
        return Outcome.SUCCESS
    if state.step_count >= state.max_episode_steps:
        return Outcome.FAILURE
    return Outcome.CONTINUE


def clone(state: WorldState) -> WorldState:
    return WorldState(
        rooms=[list(r) for r in state.rooms],
        receptacle_contents={r: set(o) for r, o in state.receptacle_contents.items()},
        receptacle_open=dict(state.receptacle_open),
        agent_at=state.agent_at,
        holding=state.holding,
        step_count=state.step_count,
        task=state.task,
        rng_seed=state.rng_seed,
        max_episode_steps=state.max_episode_steps,
        goal_reached=state.goal_reached,
    )


def grammatical_actions(state: WorldState) -> list[tuple[str, ...]]:
    """Every action the grammar admits for this layout (valid or not)."""
    recs = sorted(state.receptacle_contents)
    objs = sorted(state.objects())
    out = [("go", "to", r, EOS) for r in recs]
    out += [(v, r, EOS) for v in ("open", "close") for r in recs]
    out += [(v, o, EOS) for v in ("take", "put") for o in objs]
    return out


def enumerate_valid_actions(state: WorldState) -> list[tuple[str, ...]]:
    """Grammatical actions whose step is not ``nothing happens``.

    Test oracle only; the learning agent never sees this list.
    """
    if state.goal_reached:
        return []
    out = []
    for action in grammatical_actions(state):
        trial = clone(state)
        if _apply(trial, *parse_action(action, trial)) is not None:
            out.append(action)
    return out


def oracle_plan(state: WorldState) -> list[tuple[str, ...]]:
    """Shortest action sequence that solves the task from ``state``."""
    trial = clone(state)
    plan: list[tuple[str, ...]] = []

    def do(action: tuple[str, ...]) -> None:
        nonlocal trial
        plan.append(action)
        trial, _, _, _ = step(trial, action)

    def reach(recep: str) -> None:
        if trial.agent_at != recep:
            do(("go", "to", recep, EOS))
        if not trial.accessible(recep):
            do(("open", recep, EOS))

    target = trial.task.target_receptacle
    if trial.holding is not None and trial.holding not in trial.task.target_objects:
        reach(trial.agent_at)
        do(("put", trial.holding, EOS))
    for obj in trial.task.target_objects:
        if obj in trial.receptacle_contents[target]:
            continue
        if trial.holding != obj:
            reach(_locate(trial, obj))
            do(("take", obj, EOS))
        reach(target)
        do(("put", obj, EOS))
    return plan


def trajectory_record(t: int, action: tuple[str, ...], obs: tuple[str, ...], reward: float, done: bool) -> str:
    """One JSONL line of the trajectory replay log."""
    return json.dumps(
        {"t": t, "action_tokens": list(action), "observation_tokens": list(obs), "reward": reward, "done": done}
    )

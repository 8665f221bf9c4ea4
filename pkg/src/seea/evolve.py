"""The self-evolution loop: collect trees, update the reward model, update
the policy, evaluate, repeat.

Every random draw inside iteration ``i`` comes from generators seeded by
``(master_seed, i, ...)``; nothing carries over between iterations except
parameters and optimizer state, which are checkpointed. That makes a
resumed run metric-identical to an uninterrupted one, and lets tree
generation fan out over worker processes without changing results.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from seea import env as E
from seea import mcts as M
from seea import mgrm as R
from seea import optim as O
from seea.env import ConfigError, EnvConfig, Outcome
from seea.policy import AgentState, ParamVector, Policy

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EVAL_SEED_BASE = 1 << 62  # evaluation tasks never collide with training draws below 2**62
RM_EVAL_SEED_BASE = EVAL_SEED_BASE + (1 << 40)
SFT_SEED_BASE = EVAL_SEED_BASE + (1 << 41)


class RewardMode(str, enum.Enum):
    GROUND_TRUTH = "ground-truth"
    FROZEN = "frozen-mgrm"
    SUPERVISED = "supervised-mgrm"
    SELF_SUPERVISED = "self-supervised-mgrm"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    embed: int = 16
    hidden: int = 32
    window: int = 32
    t_max: int = 8
    constrained: bool = True

    def validate(self) -> None:
        if min(self.embed, self.hidden, self.window) < 1 or self.t_max < 2:
            raise ConfigError("model sizes must be >= 1 and t_max >= 2")


@dataclass(frozen=True)
class RewardModelConfig:
    votes: int = 10  # K rollouts per task for the majority vote
    group_size: int = 10
    ttrl_tasks: int = 8  # tasks voted on per iteration
    ttrl_lr: float = 0.05
    ttrl_steps: int = 1
    base: str = "init"  # init | seed-sft: starting point for self-supervised training
    seed_sft_episodes: int = 40
    sft_episodes: int = 200
    sft_steps: int = 300
    sft_lr: float = 0.01
    sft_batch: int = 64
    calib_every: int = 500  # episodes between GT calibrations (supervised mode)
    calib_episodes: int = 20
    calib_steps: int = 20
    guide_epsilon: float = 0.3  # random-action rate of the GT-guided data policy
    random_fraction: float = 0.5  # share of data episodes played fully at random
    eval_episodes: int = 120
    success_reward: float = 1.0
    continue_reward: float = 0.0
    failure_reward: float = -1.0

    @property
    def mapping(self) -> R.LabelMapping:
        return R.LabelMapping(self.success_reward, self.continue_reward, self.failure_reward)

    def validate(self) -> None:
        if self.votes < 3:
            raise ConfigError("rm.votes must be >= 3")
        if self.group_size < 2:
            raise ConfigError("rm.group_size must be >= 2")
        if self.base not in ("init", "seed-sft"):
            raise ConfigError("rm.base must be init or seed-sft")
        if self.calib_every < 1:
            raise ConfigError("rm.calib_every must be >= 1")
        if not 0.0 <= self.guide_epsilon <= 1.0 or not 0.0 <= self.random_fraction <= 1.0:
            raise ConfigError("rm.guide_epsilon and rm.random_fraction must be in [0, 1]")
        if min(self.ttrl_tasks, self.ttrl_steps, self.sft_batch, self.eval_episodes) < 1:
            raise ConfigError("rm counts must be >= 1")
        self.mapping.validate()


@dataclass(frozen=True)
class RunConfig:
    reward_mode: RewardMode = RewardMode.GROUND_TRUTH
    iterations: int = 20
    seed: int = 0
    eval_episodes: int = 100
    episode_cap_factor: float = 10.0
    expected_groups_per_episode: float = 1.0
    workers: int = 1
    dump_experience: bool = False
    env: EnvConfig = field(default_factory=EnvConfig)
    search: M.SearchConfig = field(default_factory=M.SearchConfig)
    optim: O.OptimConfig = field(default_factory=O.OptimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rm: RewardModelConfig = field(default_factory=RewardModelConfig)

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError("run.iterations must be >= 0")
        if self.eval_episodes < 1:
            raise ConfigError("run.eval_episodes must be >= 1")
        if self.episode_cap_factor < 1 or self.expected_groups_per_episode <= 0:
            raise ConfigError("run.episode_cap_factor must be >= 1 and expected_groups_per_episode > 0")
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.env.max_episode_steps > self.search.max_depth:
            raise ConfigError("search.max_depth must cover env.max_episode_steps")
        for sub in (self.env, self.search, self.optim, self.model, self.rm):
            sub.validate()

    @property
    def episode_cap(self) -> int:
        expected = math.ceil(self.optim.valid_samples_per_iteration / self.expected_groups_per_episode)
        return int(self.episode_cap_factor * expected)

    def to_dict(self) -> dict:
        def plain(x):
            if isinstance(x, enum.Enum):
                return x.value
            if dataclasses.is_dataclass(x):
                return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
            if isinstance(x, (tuple, list)):
                return [plain(v) for v in x]
            if isinstance(x, float) and math.isinf(x):
                return "inf"
            return x

        return plain(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Inverse of ``to_dict``; missing keys keep their defaults."""

        def build(kind, values: dict):
            base = kind()
            changes = {}
            for f in dataclasses.fields(kind):
                if f.name not in values:
                    continue
                current, raw = getattr(base, f.name), values[f.name]
                if dataclasses.is_dataclass(current):
                    changes[f.name] = build(type(current), raw)
                elif isinstance(current, enum.Enum):
                    changes[f.name] = type(current)(raw)
                elif isinstance(current, tuple):
                    changes[f.name] = tuple(E.TaskKind(v) for v in raw)
                elif raw == "inf":
                    changes[f.name] = math.inf
                else:
                    changes[f.name] = raw
            return kind(**changes)

        try:
            return build(cls, data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config record: {exc}") from None

    def hash(self) -> str:
        """sha256 over the canonical JSON of every setting that affects results."""
        data = self.to_dict()
        data.pop("workers")  # fan-out never changes results
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


METRIC_FIELDS = (
    "iter",
    "success_rate",
    "avg_steps",
    "loss",
    "mean_kl",
    "clip_frac",
    "valid_groups",
    "episodes",
    "rm_accuracy",
    "aborted",
)
TIMING_FIELDS = ("iter", "collect_s", "rm_s", "train_s", "eval_s")
STEP_FIELDS = ("iter", "step", "lr", "loss", "mean_kl", "clip_frac", "valid_groups")
EVAL_FIELDS = ("episodes", "success_rate", "avg_steps")


@dataclass
class IterationMetrics:
    iter: int
    success_rate: float
    avg_steps: float
    loss: float = float("nan")
    mean_kl: float = float("nan")
    clip_frac: float = float("nan")
    valid_groups: int = 0
    episodes: int = 0
    rm_accuracy: float = float("nan")
    aborted: int = 0
    timings: dict = field(default_factory=dict)
    step_log: list = field(default_factory=list)

    def row(self) -> list[str]:
        return [_fmt(getattr(self, f)) for f in METRIC_FIELDS]


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else ""
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# models and run state


class Models:
    """Policy and reward model wrappers built from one RunConfig."""

    def __init__(self, config: RunConfig):
        m = config.model
        self.policy = Policy.for_env(
            config.env,
            vocab_size=m.vocab_size,
            embed=m.embed,
            hidden=m.hidden,
            window=m.window,
            t_max=m.t_max,
            constrained=m.constrained,
        )
        self.rm = R.RewardModel(self.policy.vocab, embed=m.embed, hidden=m.hidden, window=m.window, horizon=config.env.max_episode_steps)


@dataclass
class RunState:
    iteration: int  # iterations completed
    policy: ParamVector
    ref: ParamVector
    rm: ParamVector
    optimizer: O.Optimizer
    rm_adam: O.Adam
    episodes_seen: int = 0
    episodes_at_calibration: int = 0


def steps_per_iteration(config: RunConfig) -> int:
    o = config.optim
    if o.steps_per_iter > 0:
        return o.steps_per_iter
    return o.epochs * math.ceil(o.valid_samples_per_iteration / o.batch_size)


def _rng(config: RunConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, *key])


def initial_state(config: RunConfig, models: Models) -> RunState:
    config.validate()
    policy = models.policy.init_params(config.seed)
    rm = models.rm.init_params(config.seed + 1)
    rm_adam = O.Adam()
    if config.reward_mode is RewardMode.SUPERVISED:
        rm = _sft(config, models, policy, rm, rm_adam, config.rm.sft_episodes, salt=1)
    elif config.reward_mode is RewardMode.SELF_SUPERVISED and config.rm.base == "seed-sft":
        rm = _sft(config, models, policy, rm, rm_adam, config.rm.seed_sft_episodes, salt=2)
        rm_adam = O.Adam()
    total = config.iterations * steps_per_iteration(config)
    return RunState(0, policy, policy.copy(), rm, O.Optimizer(config.optim, total), rm_adam)


def guided_labeled_states(env_config: EnvConfig, seeds, rng, *, epsilon: float, random_fraction: float = 0.0, per_episode: int = 3):
    """GT-labelled states from a data policy that follows the shortest plan
    but takes a uniformly random grammatical action with probability ``epsilon``.
    A ``random_fraction`` share of episodes is played with epsilon 1 so that
    failures are represented."""
    out = []
    for seed in seeds:
        eps = 1.0 if rng.random() < random_fraction else epsilon
        world, obs = E.reset(int(seed), env_config)
        agent = AgentState(obs)
        trail = [(agent, world)]
        done = False
        while not done:
            plan = E.oracle_plan(world)
            if plan and rng.random() >= eps:
                action = plan[0]
            else:
                options = E.grammatical_actions(world)
                action = options[rng.integers(len(options))]
            world, o, _, done = E.step(world, action)
            agent = agent.append(action, o)
            trail.append((agent, world))
        out.append((trail[-1][0], E.gt_outcome(trail[-1][1])))
        if per_episode > 1 and len(trail) > 1:
            picks = rng.choice(len(trail) - 1, size=min(per_episode - 1, len(trail) - 1), replace=False)
            out.extend((trail[i][0], E.gt_outcome(trail[i][1])) for i in sorted(picks))
    return out


def _sft(config, models, policy, rm_params, adam, episodes, salt):
    rng = _rng(config, 1_000_000 + salt)
    seeds = SFT_SEED_BASE + salt * (1 << 32) + np.arange(episodes)
    data = guided_labeled_states(config.env, seeds, rng, epsilon=config.rm.guide_epsilon, random_fraction=config.rm.random_fraction)
    return R.fit_supervised(
        models.rm, rm_params, data, steps=config.rm.sft_steps, lr=config.rm.sft_lr, batch_size=config.rm.sft_batch, rng=rng, optimizer=adam
    )


def rm_eval_set(config: RunConfig):
    rng = _rng(config, 2_000_000)
    seeds = RM_EVAL_SEED_BASE + np.arange(config.rm.eval_episodes)
    return guided_labeled_states(config.env, seeds, rng, epsilon=config.rm.guide_epsilon, random_fraction=config.rm.random_fraction)


# ---------------------------------------------------------------------------
# data evolution


def _reward_source(config: RunConfig, models: Models, rm_params):
    if config.reward_mode is RewardMode.GROUND_TRUTH:
        return M.GroundTruthReward()
    return R.MGRMReward(models.rm, rm_params, config.rm.mapping)


def _tree_job(args):
    config, policy_params, rm_params, iteration, k = args
    models = _models_for(config)
    rng = _rng(config, 10 + iteration, k)
    task_seed = int(rng.integers(EVAL_SEED_BASE))
    world, obs = E.reset(task_seed, config.env)
    tree = M.run_search(AgentState(obs), world, models.policy, policy_params, _reward_source(config, models, rm_params), config.search, rng)
    groups = M.extract_experience(tree, models.policy, policy_params, tag=iteration)
    return k, task_seed, [g for g in groups if O.is_valid_group(g.pr)]


_MODEL_CACHE: dict = {}


def _models_for(config: RunConfig) -> Models:
    key = (config.env, config.model)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = Models(config)
    return _MODEL_CACHE[key]


def collect(config: RunConfig, policy_params, rm_params, iteration: int, pool=None):
    """Trees in index order until the valid-group budget is met.

    Returns (groups, episodes used, aborted flag). Results do not depend on
    the number of workers: tree ``k`` always uses the same generator and the
    stopping point is decided in index order.
    """
    need = config.optim.valid_samples_per_iteration
    cap = config.episode_cap
    groups: list[O.ExperienceGroup] = []
    k = 0
    chunk = max(1, config.workers)
    while k < cap:
        jobs = [(config, policy_params, rm_params, iteration, j) for j in range(k, min(k + chunk, cap))]
        results = pool.map(_tree_job, jobs) if pool is not None else map(_tree_job, jobs)
        for j, _, found in sorted(results, key=lambda r: r[0]):
            groups.extend(found)
            k = j + 1
            if len(groups) >= need:
                return groups, k, False
    log.warning("iteration %d: episode cap %d reached with %d/%d valid groups; aborting", iteration, cap, len(groups), need)
    return groups, k, True


# ---------------------------------------------------------------------------
# model evolution


def _calibrate(config, models, state: RunState, iteration: int) -> None:
    """Supervised GT calibration, one round per ``calib_every`` episodes."""
    rounds = (state.episodes_seen - state.episodes_at_calibration) // config.rm.calib_every
    for r in range(rounds):
        rng = _rng(config, 3_000_000 + iteration, r)
        seeds = rng.integers(EVAL_SEED_BASE, size=config.rm.calib_episodes)
        data = R.labeled_states(models.policy, state.policy, config.env, seeds, rng)
        state.rm = R.fit_supervised(
            models.rm, state.rm, data, steps=config.rm.calib_steps, lr=config.rm.sft_lr, batch_size=config.rm.sft_batch, rng=rng, optimizer=state.rm_adam
        )
    state.episodes_at_calibration += rounds * config.rm.calib_every


def _ttrl(config, models, state: RunState, iteration: int) -> None:
    rng = _rng(config, 4_000_000 + iteration)
    records = []
    for _ in range(config.rm.ttrl_tasks):
        seed = int(rng.integers(EVAL_SEED_BASE))
        recs, _ = R.ttrl_generate_pseudo_gt(models.policy, state.policy, models.rm, state.rm, config.env, seed, config.rm.votes, rng)
        records.extend(recs)
    for _ in range(config.rm.ttrl_steps):
        state.rm, _ = R.ttrl_update(models.rm, state.rm, records, config.optim, config.rm.ttrl_lr, rng, config.rm.group_size)


def update_reward_model(config, models, state: RunState, iteration: int) -> None:
    mode = config.reward_mode
    if mode is RewardMode.SUPERVISED:
        _calibrate(config, models, state, iteration)
    elif mode is RewardMode.SELF_SUPERVISED:
        _ttrl(config, models, state, iteration)


def train_policy(config, models, state: RunState, groups, iteration: int, steps: list) -> O.LossStats:
    """Tree-GRPO over the buffer: ``epochs`` passes in ``batch_size`` chunks,
    or exactly ``steps_per_iter`` minibatch steps when that is set."""
    o = config.optim
    rng = _rng(config, 5_000_000 + iteration)
    n = len(groups)
    batches: list[np.ndarray] = []
    if o.steps_per_iter > 0:
        order = rng.permutation(n)
        pos = 0
        for _ in range(o.steps_per_iter):
            if pos >= n:
                order, pos = rng.permutation(n), 0
            batches.append(order[pos : pos + o.batch_size])
            pos += o.batch_size
    else:
        for _ in range(o.epochs):
            order = rng.permutation(n)
            batches.extend(order[i : i + o.batch_size] for i in range(0, n, o.batch_size))
    stats = O.LossStats()
    for b in batches:
        batch = [groups[i] for i in b]
        loss, grad, stats = O.tree_grpo_loss_and_grad(batch, state.policy, state.ref, o, models.policy)
        state.policy, lr = state.optimizer.step(state.policy, grad)
        steps.append(
            {
                "iter": iteration,
                "step": state.optimizer.step_count,
                "lr": lr,
                "loss": loss,
                "mean_kl": stats.mean_kl,
                "clip_frac": stats.clip_frac,
                "valid_groups": n,
            }
        )
    return stats


def evaluate_policy(policy: Policy, params: ParamVector, env_config: EnvConfig, n: int, seeds=None, chooser=None):
    """Greedy single-path play on ``n`` tasks. Returns (success_rate, avg_steps).

    ``chooser(agent_state, world_state)`` overrides the policy, for fixtures.
    """
    if n < 1:
        raise ConfigError("episodes must be >= 1")
    seeds = list(seeds) if seeds is not None else [EVAL_SEED_BASE + i for i in range(n)]
    wins = steps = 0
    for seed in seeds[:n]:
        world, obs = E.reset(int(seed), env_config)
        agent = AgentState(obs)
        done = False
        while not done:
            action = chooser(agent, world) if chooser else policy.sample_action(params, agent, 0.0, None)[0]
            world, o, _, done = E.step(world, action)
            agent = agent.append(action, o)
        wins += world.goal_reached
        steps += world.step_count
    return wins / n, steps / n


def run_iteration(config: RunConfig, models: Models, state: RunState, rm_eval=None, pool=None, dump=None) -> IterationMetrics:
    """One collect / reward-model / policy / evaluate cycle; mutates ``state``."""
    it = state.iteration
    t0 = time.perf_counter()
    groups, episodes, aborted = collect(config, state.policy, state.rm, it, pool)
    t1 = time.perf_counter()
    state.episodes_seen += episodes
    steps: list = []
    stats = None
    if not aborted:
        update_reward_model(config, models, state, it)
        t2 = time.perf_counter()
        stats = train_policy(config, models, state, groups, it, steps)
        if dump is not None:
            for g in groups:
                dump.write(json.dumps(g.to_json()) + "\n")
    else:
        t2 = time.perf_counter()
    t3 = time.perf_counter()
    success, avg_steps = evaluate_policy(models.policy, state.policy, config.env, config.eval_episodes)
    acc = float("nan")
    if rm_eval is not None and config.reward_mode is not RewardMode.GROUND_TRUTH:
        acc = R.eval_accuracy(models.rm, state.rm, rm_eval).overall
    t4 = time.perf_counter()
    state.iteration += 1
    metrics = IterationMetrics(
        iter=it,
        success_rate=success,
        avg_steps=avg_steps,
        valid_groups=len(groups),
        episodes=episodes,
        rm_accuracy=acc,
        aborted=int(aborted),
        timings={"collect_s": t1 - t0, "rm_s": t2 - t1, "train_s": t3 - t2, "eval_s": t4 - t3},
        step_log=steps,
    )
    if stats is not None and steps:
        metrics.loss = float(np.mean([s["loss"] for s in steps]))
        metrics.mean_kl = stats.mean_kl
        metrics.clip_frac = float(np.mean([s["clip_frac"] for s in steps]))
    return metrics


# ---------------------------------------------------------------------------
# persistence


class CheckpointError(ValueError):
    pass


def checkpoint_save(state: RunState, config: RunConfig, path) -> None:
    data = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "iteration": state.iteration,
        "episodes_seen": state.episodes_seen,
        "episodes_at_calibration": state.episodes_at_calibration,
        "policy": state.policy.to_json(model_kind="policy"),
        "reference": state.ref.to_json(model_kind="policy"),
        "reward_model": state.rm.to_json(model_kind="reward"),
        "optimizer": state.optimizer.state_dict(),
        "rm_optimizer": state.rm_adam.state_dict(),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data))
    tmp.replace(path)


def checkpoint_config(path) -> RunConfig:
    """The run configuration recorded in a checkpoint."""
    try:
        data = json.loads(Path(path).read_text())
        return RunConfig.from_dict(data["config"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"cannot read config from checkpoint {path}: {exc}") from None


def checkpoint_load(path, config: RunConfig | None = None, expected_hash: str | None = None) -> RunState:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(data, dict) or data.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {data.get('format_version') if isinstance(data, dict) else None!r}")
    if expected_hash is not None and data.get("config_hash") != expected_hash:
        raise CheckpointError(f"{path}: config_hash mismatch (checkpoint {data.get('config_hash')}, run {expected_hash})")
    try:
        policy = ParamVector.from_json(data["policy"])
        ref = ParamVector.from_json(data["reference"])
        rm = ParamVector.from_json(data["reward_model"])
        if data["reward_model"].get("model_kind") != "reward":
            raise CheckpointError(f"{path}: reward_model entry is not tagged model_kind=reward")
        optim_config = config.optim if config is not None else O.OptimConfig(optimizer="adam" if data["optimizer"].get("adam") else "sgd")
        total = config.iterations * steps_per_iteration(config) if config is not None else 0
        optimizer = O.Optimizer(optim_config, total)
        optimizer.load_state_dict(data["optimizer"])
        rm_adam = O.Adam()
        rm_adam.load_state_dict(data["rm_optimizer"])
        return RunState(
            data["iteration"], policy, ref, rm, optimizer, rm_adam, data["episodes_seen"], data["episodes_at_calibration"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None


# ---------------------------------------------------------------------------
# driver


def run(config: RunConfig, out_dir, *, resume_from=None, progress=None) -> list[IterationMetrics]:
    """Run ``config.iterations`` iterations, streaming metrics and checkpoints to ``out_dir``.

    With ``resume_from`` the run continues after that checkpoint's iteration
    and appends to the existing CSV files.
    """
    config.validate()
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    models = _models_for(config)
    chash = config.hash()
    if resume_from is not None:
        state = checkpoint_load(resume_from, config, chash)
    else:
        state = initial_state(config, models)
    rm_eval = rm_eval_set(config) if config.reward_mode is not RewardMode.GROUND_TRUTH else None

    sinks = {
        "metrics.csv": METRIC_FIELDS,
        "timings.csv": TIMING_FIELDS,
        "train_steps.csv": STEP_FIELDS,
    }
    mode = "a" if resume_from is not None else "w"
    files = {name: open(out / name, mode, newline="") for name in sinks}
    writers = {name: csv.writer(f, lineterminator="\n") for name, f in files.items()}
    if resume_from is None:
        for name, header in sinks.items():
            writers[name].writerow(header)
    dump = open(out / "experience.jsonl", mode) if config.dump_experience else None
    pool = ProcessPoolExecutor(config.workers) if config.workers > 1 else None
    history: list[IterationMetrics] = []
    try:
        while state.iteration < config.iterations:
            it = state.iteration
            try:
                m = run_iteration(config, models, state, rm_eval, pool, dump)
            except Exception as exc:
                raise RuntimeError(f"iteration {it} failed: {exc}") from exc
            writers["metrics.csv"].writerow(m.row())
            writers["timings.csv"].writerow([it] + [f"{m.timings[k]:.3f}" for k in TIMING_FIELDS[1:]])
            for s in m.step_log:
                writers["train_steps.csv"].writerow([_fmt(s[k]) for k in STEP_FIELDS])
            for f in files.values():
                f.flush()
            checkpoint_save(state, config, out / "checkpoints" / f"iter_{it:04d}.json")
            history.append(m)
            if progress is not None:
                progress(m)
    finally:
        for f in files.values():
            f.close()
        if dump is not None:
            dump.close()
        if pool is not None:
            pool.shutdown()
    return history

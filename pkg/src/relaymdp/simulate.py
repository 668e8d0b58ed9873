"""Discrete-event episode engine and Monte-Carlo estimation.

An episode pre-draws all randomness (renewal wake-up times, i.i.d. uniform
locations, one latent reward bin per relay under the quasi-static channel);
``run_policy`` then replays it against a policy, revealing a relay's bin only
when probed.  Rewards are sampled as bins of the quantized pmf, so the
simulator and the solvers share one probability space and agreement with the
dynamic-programming values is an exact check up to sampling error.

Reproducibility: episode i draws from ``Philox(key=seed).jumped(i)``, a
counter-based stream independent of scheduling order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dp_complete import CompleteAction, CompleteTables, act_complete
from .dp_restricted import (
    Action,
    IllegalActionError,
    RestrictedTables,
    act,
    retain_incumbent,
)
from .model import ModelConfig, OrderedFamily, reward_grid


@dataclass(frozen=True)
class Episode:
    """One realization of the forwarding situation: wake-up times W_1..W_N,
    location indices, and the latent reward bin of each relay (revealed at
    most once, on probing)."""

    wake_times: np.ndarray
    locations: np.ndarray
    reward_bins: np.ndarray

    @property
    def n_relays(self) -> int:
        return len(self.wake_times)


@dataclass(frozen=True)
class EpisodeOutcome:
    """Result of one forwarding decision.

    ``delay`` includes the wait for the first relay; ``cost`` excludes it
    (no policy can influence the first wait, so it is not charged)."""

    delay: float
    reward: float
    probes: int
    cost: float
    effective_reward: float
    stop_stage: int


@dataclass(frozen=True)
class Estimates:
    """Monte-Carlo means with standard errors (sample-variance based)."""

    n_episodes: int
    seed: int
    mean_delay: float
    se_delay: float
    mean_reward: float
    se_reward: float
    mean_probes: float
    se_probes: float
    mean_cost: float
    se_cost: float
    mean_effective_reward: float
    se_effective_reward: float
    zero_variance: bool

    def to_json(self) -> dict:
        return {
            "n": self.n_episodes,
            "seed": self.seed,
            "mean_D": self.mean_delay,
            "se_D": self.se_delay,
            "mean_R": self.mean_reward,
            "se_R": self.se_reward,
            "mean_M": self.mean_probes,
            "se_M": self.se_probes,
            "mean_cost": self.mean_cost,
            "se_cost": self.se_cost,
            "mean_eff_reward": self.mean_effective_reward,
            "se_eff_reward": self.se_effective_reward,
            "zero_variance": self.zero_variance,
        }


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """The counter-based stream of episode ``index`` under a master seed."""
    return np.random.Generator(np.random.Philox(key=seed).jumped(index))


def sample_episode(
    family: OrderedFamily, config: ModelConfig, rng: np.random.Generator
) -> Episode:
    """Draw one episode: renewal wake-ups, uniform locations, latent bins."""
    n = config.n_relays
    if config.wakeup_law == "deterministic":
        inter = np.full(n, config.tau)
    else:
        inter = rng.exponential(config.tau, size=n)
    locations = rng.integers(len(family), size=n)
    u = rng.random(n)
    top = family.n_bins - 1
    bins = np.empty(n, dtype=np.int64)
    for j in range(n):
        bins[j] = min(
            int(np.searchsorted(family.cdf_matrix[locations[j]], u[j], side="right")),
            top,
        )
    return Episode(wake_times=np.cumsum(inter), locations=locations, reward_bins=bins)


class RestrictedPolicy:
    """State -> action map over (stage, best reward, retained distribution);
    the engine never shows a restricted policy more than that."""

    class_tag = "restricted"

    def action(self, stage: int, best: Optional[int], dist: Optional[int]) -> Action:
        raise NotImplementedError

    def retain(self, stage: int, best: Optional[int], incumbent: int, newcomer: int) -> bool:
        """True to keep the incumbent unprobed relay when a new one wakes."""
        return True


class RstOptPolicy(RestrictedPolicy):
    """Optimal restricted-class policy read off the solved tables."""

    name = "rst"

    def __init__(self, tables: RestrictedTables):
        self.tables = tables

    def action(self, stage, best, dist):
        return act((best, dist, stage), self.tables)

    def retain(self, stage, best, incumbent, newcomer):
        return retain_incumbent(self.tables, stage, best, incumbent, newcomer)


class ProbeFirstPolicy(RestrictedPolicy):
    """Baseline: probe the first relay that wakes and forward to it."""

    name = "first"

    def action(self, stage, best, dist):
        if best is None:
            if dist is None:
                raise IllegalActionError("nothing probed and nothing to probe")
            return Action.PROBE
        return Action.STOP


class CompletePolicy:
    """State -> action map over (stage, best reward, unprobed multiset)."""

    class_tag = "complete"

    def action(
        self, stage: int, best: Optional[int], mset: tuple[int, ...]
    ) -> CompleteAction:
        raise NotImplementedError


class GlbOptPolicy(CompletePolicy):
    """Optimal complete-class policy read off the solved tables."""

    name = "glb"

    def __init__(self, tables: CompleteTables):
        self.tables = tables

    def action(self, stage, best, mset):
        return act_complete((stage, best, mset), self.tables)


def run_policy(
    episode: Episode,
    policy,
    family: OrderedFamily,
    config: ModelConfig,
) -> EpisodeOutcome:
    """Replay an episode against a policy.

    Probes consume one unit of probe count and reveal the pre-drawn bin; a
    stop at stage k yields delay W_k; at stage N the process must terminate.
    Illegal actions raise IllegalActionError naming the offending state.
    """
    if policy.class_tag == "restricted":
        best, probes, stage = _drive_restricted(episode, policy)
    elif policy.class_tag == "complete":
        best, probes, stage = _drive_complete(episode, policy)
    else:
        raise ValueError(f"unknown policy class {policy.class_tag!r}")

    grid = reward_grid(family.n_bins)
    reward = float(grid[best])
    delay = float(episode.wake_times[stage - 1])
    waiting = delay - float(episode.wake_times[0])
    eta, delta = config.eta, config.delta
    return EpisodeOutcome(
        delay=delay,
        reward=reward,
        probes=probes,
        cost=waiting - eta * reward + eta * delta * probes,
        effective_reward=reward - delta * probes,
        stop_stage=stage,
    )


def _drive_restricted(episode: Episode, policy: RestrictedPolicy):
    n = episode.n_relays
    best: Optional[int] = None
    retained: Optional[int] = 0  # relay index of the kept unprobed relay
    probes = 0
    stage = 1
    while True:
        dist = None if retained is None else int(episode.locations[retained])
        action = policy.action(stage, best, dist)
        if action is Action.STOP:
            if best is None:
                raise IllegalActionError(
                    f"stop with nothing probed at stage {stage} (dist={dist})"
                )
            return best, probes, stage
        if action is Action.PROBE:
            if retained is None:
                raise IllegalActionError(f"probe with no retained relay at stage {stage}")
            revealed = int(episode.reward_bins[retained])
            best = revealed if best is None else max(best, revealed)
            retained = None
            probes += 1
            continue
        if action is Action.CONTINUE:
            if stage == n:
                raise IllegalActionError(
                    f"continue at the last stage (best={best}, dist={dist})"
                )
            newcomer = stage  # 0-based index of the relay waking at stage+1
            if retained is None:
                retained = newcomer
            elif not policy.retain(
                stage + 1, best, int(episode.locations[retained]),
                int(episode.locations[newcomer]),
            ):
                retained = newcomer
            stage += 1
            continue
        raise IllegalActionError(f"unknown action {action!r} at stage {stage}")


def _drive_complete(episode: Episode, policy: CompletePolicy):
    n = episode.n_relays
    best: Optional[int] = None
    awake: list[int] = [0]  # unprobed woken relays, in wake order
    probes = 0
    stage = 1
    while True:
        mset = tuple(sorted(int(episode.locations[i]) for i in awake))
        action = policy.action(stage, best, mset)
        if action.kind is Action.STOP:
            if best is None:
                raise IllegalActionError(f"stop with nothing probed at stage {stage}")
            return best, probes, stage
        if action.kind is Action.PROBE:
            target = action.probe_target
            pick = next(
                (i for i in awake if int(episode.locations[i]) == target), None
            )
            if pick is None:
                raise IllegalActionError(
                    f"probe target type {target} not awake at stage {stage} ({mset})"
                )
            revealed = int(episode.reward_bins[pick])
            best = revealed if best is None else max(best, revealed)
            awake.remove(pick)
            probes += 1
            continue
        if action.kind is Action.CONTINUE:
            if stage == n:
                raise IllegalActionError(f"continue at the last stage (best={best})")
            awake.append(stage)
            stage += 1
            continue
        raise IllegalActionError(f"unknown action {action!r} at stage {stage}")


def monte_carlo(
    family: OrderedFamily,
    config: ModelConfig,
    policy,
    n_episodes: int,
    seed: int,
) -> Estimates:
    """Estimate E[D], E[R], E[M], the Lagrangian cost and the effective reward
    over independently seeded episodes."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    base = np.random.Philox(key=seed)
    samples = np.empty((n_episodes, 5))
    for i in range(n_episodes):
        rng = np.random.Generator(base.jumped(i))
        episode = sample_episode(family, config, rng)
        out = run_policy(episode, policy, family, config)
        samples[i] = (out.delay, out.reward, out.probes, out.cost, out.effective_reward)

    means = samples.mean(axis=0)
    if n_episodes >= 2:
        ses = samples.std(axis=0, ddof=1) / math.sqrt(n_episodes)
    else:
        ses = np.zeros(5)
    return Estimates(
        n_episodes=n_episodes,
        seed=seed,
        mean_delay=float(means[0]), se_delay=float(ses[0]),
        mean_reward=float(means[1]), se_reward=float(ses[1]),
        mean_probes=float(means[2]), se_probes=float(ses[2]),
        mean_cost=float(means[3]), se_cost=float(ses[3]),
        mean_effective_reward=float(means[4]), se_effective_reward=float(ses[4]),
        zero_variance=bool(n_episodes < 2 or float(ses.max()) == 0.0),
    )

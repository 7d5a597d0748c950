"""Importance-sampling checks on a tiny, fully enumerable decision process.

A micro-MDP has ``n_steps`` decisions with ``n_actions`` choices each and a
reward on the complete action sequence. With at most ``MAX_TRAJECTORIES``
sequences the expected return can be computed exactly, which makes it a
ground truth for the sampled estimators used by the trainers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import EnumerationTooLarge

MAX_TRAJECTORIES = 100_000


@dataclass
class MicroMDP:
    n_steps: int
    n_actions: int
    reward: dict  # action tuple -> return

    def trajectories(self):
        if self.n_actions**self.n_steps > MAX_TRAJECTORIES:
            raise EnumerationTooLarge(f"{self.n_actions}^{self.n_steps} trajectories exceed {MAX_TRAJECTORIES}")
        return list(itertools.product(range(self.n_actions), repeat=self.n_steps))

    def R(self, traj) -> float:
        return float(self.reward.get(tuple(traj), 0.0))


class TabularPolicy:
    """Action distribution per history prefix."""

    def __init__(self, table: dict):
        self.table = table

    def __call__(self, history) -> np.ndarray:
        return self.table[tuple(history)]

    @classmethod
    def random(cls, mdp: MicroMDP, rng: np.random.Generator, concentration: float = 1.0) -> "TabularPolicy":
        table = {}
        for t in range(mdp.n_steps):
            for hist in itertools.product(range(mdp.n_actions), repeat=t):
                table[hist] = rng.dirichlet(np.full(mdp.n_actions, concentration))
        return cls(table)


def trajectory_prob(policy, traj) -> float:
    p = 1.0
    for t, a in enumerate(traj):
        p *= policy(traj[:t])[a]
    return p


def exact_return(mdp: MicroMDP, policy) -> float:
    return sum(trajectory_prob(policy, tau) * mdp.R(tau) for tau in mdp.trajectories())


def sample_trajectory(mdp: MicroMDP, policy, rng: np.random.Generator) -> tuple:
    traj = []
    for _ in range(mdp.n_steps):
        p = policy(tuple(traj))
        traj.append(int(rng.choice(mdp.n_actions, p=p)))
    return tuple(traj)


@dataclass
class ISOracleResult:
    estimate: float
    exact: float
    std_error: float
    weights: np.ndarray
    returns: np.ndarray


def is_return_oracle(target, behavior, mdp: MicroMDP, n: int, rng: np.random.Generator) -> ISOracleResult:
    """Importance-sampled return of *target* from *behavior* samples, plus the exact value."""
    exact = exact_return(mdp, target)
    weights = np.empty(n)
    returns = np.empty(n)
    for k in range(n):
        tau = sample_trajectory(mdp, behavior, rng)
        weights[k] = trajectory_prob(target, tau) / trajectory_prob(behavior, tau)
        returns[k] = mdp.R(tau)
    terms = weights * returns
    se = float(terms.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return ISOracleResult(float(terms.mean()), exact, se, weights, returns)


def positive_proposal(mdp: MicroMDP, policy):
    """The zero-variance proposal q(tau) proportional to |R(tau)| p(tau)."""
    taus = mdp.trajectories()
    mass = np.array([abs(mdp.R(t)) * trajectory_prob(policy, t) for t in taus])
    total = mass.sum()
    if total == 0:
        raise ValueError("no rewarded trajectory has positive probability")
    return taus, mass / total


def proposal_variances(mdp: MicroMDP, policy, n: int, reps: int, rng: np.random.Generator) -> tuple:
    """Empirical variance of the n-sample return estimate over *reps* repetitions.

    Returns ``(var_on_policy, var_positive_only)``: sampling directly from
    *policy* versus sampling only rewarded trajectories in proportion to
    their probability and reweighting.
    """
    taus, q = positive_proposal(mdp, policy)
    on_policy, positive = [], []
    for _ in range(reps):
        on_policy.append(np.mean([mdp.R(sample_trajectory(mdp, policy, rng)) for _ in range(n)]))
        idx = rng.choice(len(taus), size=n, p=q)
        est = [trajectory_prob(policy, taus[i]) / q[i] * mdp.R(taus[i]) for i in idx]
        positive.append(np.mean(est))
    return float(np.var(on_policy)), float(np.var(positive))

import numpy as np
import pytest

from pmr.errors import EnumerationTooLarge
from pmr.is_oracle import (
    MicroMDP,
    TabularPolicy,
    exact_return,
    is_return_oracle,
    proposal_variances,
    trajectory_prob,
)


@pytest.fixture
def mdp():
    # 2 steps, 3 actions; two rewarded sequences
    return MicroMDP(2, 3, {(0, 2): 1.0, (1, 1): 1.0})


def test_exact_return_by_hand(mdp):
    pi = TabularPolicy(
        {
            (): np.array([0.5, 0.3, 0.2]),
            (0,): np.array([0.2, 0.2, 0.6]),
            (1,): np.array([0.1, 0.8, 0.1]),
            (2,): np.array([1 / 3, 1 / 3, 1 / 3]),
        }
    )
    assert exact_return(mdp, pi) == pytest.approx(0.5 * 0.6 + 0.3 * 0.8, abs=1e-15)


def test_probabilities_sum_to_one(mdp):
    pi = TabularPolicy.random(mdp, np.random.default_rng(0))
    assert sum(trajectory_prob(pi, t) for t in mdp.trajectories()) == pytest.approx(1.0, abs=1e-12)


def test_same_policy_gives_unit_weights(mdp):
    pi = TabularPolicy.random(mdp, np.random.default_rng(1))
    res = is_return_oracle(pi, pi, mdp, 500, np.random.default_rng(2))
    assert np.all(res.weights == 1.0)
    assert res.estimate == pytest.approx(res.returns.mean())


def test_is_estimate_within_three_standard_errors(mdp):
    rng = np.random.default_rng(3)
    target = TabularPolicy.random(mdp, rng)
    behavior = TabularPolicy.random(mdp, rng)
    res = is_return_oracle(target, behavior, mdp, 10_000, rng)
    assert abs(res.estimate - res.exact) < 3 * res.std_error


def test_positive_only_proposal_has_lower_variance():
    sparse = MicroMDP(3, 3, {(2, 2, 2): 1.0, (0, 1, 2): 1.0})
    rng = np.random.default_rng(4)
    pi = TabularPolicy.random(sparse, rng)
    var_pi, var_pos = proposal_variances(sparse, pi, n=50, reps=100, rng=rng)
    assert var_pos <= var_pi
    assert var_pi > 0


def test_enumeration_guard():
    with pytest.raises(EnumerationTooLarge):
        MicroMDP(11, 3, {}).trajectories()

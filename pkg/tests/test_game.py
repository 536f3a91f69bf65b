import numpy as np
import pytest

from advpolicies.envs import EnvConfig, make_env
from advpolicies.errors import ConfigurationError, NumericalFault
from advpolicies.game import (
    NOT_DONE,
    TIE,
    BlackBoxVictim,
    EmbeddedMdp,
    Winner,
    embed_victim,
    payoff,
    rollout,
    take_rows,
)
from advpolicies.policy import FrozenPolicy, GaussianPolicy, RandPolicy, ZeroPolicy


def analytic_kernel(game, victim, s, a_adv):
    p1 = victim.P_ONE[s]
    return (1 - p1) * game.KERNEL[s, a_adv, 0] + p1 * game.KERNEL[s, a_adv, 1]


def marginalization_worst_tv(game, victim, n=100_000, seed=0):
    """Largest total-variation gap between sampled and analytic embedded kernels."""
    mdp = embed_victim(game, victim, victim_index=0)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for s in range(3):
        for a in (0, 1):
            state = game.reset(np.zeros((n, 0)))
            state.s[:] = s
            a_adv = np.full((n, 1), 1.0 if a else -1.0)
            nxt, *_ = mdp.transition(state, a_adv, rng, rng.random((n, 1)))
            freq = np.bincount(nxt.s, minlength=3) / n
            worst = max(worst, 0.5 * np.abs(freq - analytic_kernel(game, victim, s, a)).sum())
    return worst


def test_embedded_kernel_matches_marginalization(toy_game, toy_victim):
    assert marginalization_worst_tv(toy_game, toy_victim) < 0.01


def test_zero_victim_embedding_equals_game_step():
    game = make_env(EnvConfig(pose_dim=3))
    mdp = embed_victim(game, ZeroPolicy(game.action_dim), victim_index=0)
    rng = np.random.default_rng(0)
    state = game.reset(rng.random((50, 4)))
    for _ in range(10):
        a_adv = rng.uniform(-1.5, 1.5, (50, game.action_dim))
        nxt, reward, done, winner = mdp.transition(state, a_adv, rng)
        ref = game.step(state, np.zeros_like(a_adv), a_adv, np.zeros((50, 0)))
        np.testing.assert_array_equal(nxt.pos, ref.state.pos)
        np.testing.assert_array_equal(nxt.pose, ref.state.pose)
        np.testing.assert_array_equal(reward, ref.rewards[:, 1])
        state = take_rows(nxt, slice(None))


def test_terminal_reward_passes_through():
    game = make_env(EnvConfig(pose_dim=2, time_limit=3))
    mdp = embed_victim(game, ZeroPolicy(game.action_dim), victim_index=0)
    state = game.reset(np.full((4, 4), 0.5))
    rng = np.random.default_rng(0)
    for _ in range(3):
        state, reward, done, winner = mdp.transition(state, np.zeros((4, game.action_dim)), rng)
    assert np.all(done) and np.all(winner == 1)
    np.testing.assert_array_equal(reward, payoff(winner)[:, 1])
    assert np.all(reward == 1.0)


def test_dimension_mismatch_is_configuration_error():
    game = make_env(EnvConfig(pose_dim=2))
    wrong = FrozenPolicy(GaussianPolicy.create(game.obs_dim(0) + 1, game.action_dim, np.random.default_rng(0)))
    with pytest.raises(ConfigurationError):
        embed_victim(game, wrong)
    wrong_act = FrozenPolicy(GaussianPolicy.create(game.obs_dim(0), game.action_dim + 2, np.random.default_rng(0)))
    with pytest.raises(ConfigurationError):
        embed_victim(game, wrong_act)


def test_victim_is_reachable_only_through_sampling():
    game = make_env(EnvConfig(pose_dim=2))
    victim = FrozenPolicy(GaussianPolicy.create(game.obs_dim(0), game.action_dim, np.random.default_rng(0)))
    mdp = embed_victim(game, victim)
    assert isinstance(mdp.victim, BlackBoxVictim)
    assert not hasattr(mdp.victim, "__dict__")
    public = {n for n in dir(mdp.victim) if not n.startswith("_")}
    assert public == {"sample", "begin_episodes", "obs_dim", "action_dim"}
    assert not any(isinstance(v, (FrozenPolicy, GaussianPolicy)) for v in vars(mdp).values())


def test_payoff_zero_sum_except_ties():
    w = np.array([0, 1, TIE, NOT_DONE])
    r = payoff(w)
    assert r[0].sum() == 0 and r[1].sum() == 0
    np.testing.assert_array_equal(r[2], [-1, -1])
    np.testing.assert_array_equal(r[3], [0, 0])


@pytest.fixture
def corridor_mdp():
    def build(seed=0, n_envs=4):
        game = make_env(EnvConfig(pose_dim=2, time_limit=30))
        return embed_victim(game, RandPolicy(game.action_dim), victim_index=0, n_envs=n_envs, seed=seed)
    return build


def test_single_step_rollout(corridor_mdp):
    mdp = corridor_mdp(n_envs=1)
    batch = rollout(mdp, RandPolicy(mdp.action_dim), 1, np.random.default_rng(0))
    assert batch.n_steps == 1
    assert not batch.dones[0, 0]


def test_rollout_is_bit_identical_for_same_seed(corridor_mdp):
    adv = GaussianPolicy.create(corridor_mdp().obs_dim, corridor_mdp().action_dim, np.random.default_rng(1))
    a = rollout(corridor_mdp(seed=5), adv, 400, np.random.default_rng(2))
    b = rollout(corridor_mdp(seed=5), adv, 400, np.random.default_rng(2))
    for name in ("obs", "actions", "log_probs", "rewards", "values", "dones", "last_values"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.outcomes == b.outcomes


def test_rollout_rewards_recount_from_outcomes(corridor_mdp):
    mdp = corridor_mdp(n_envs=8)
    batch = rollout(mdp, RandPolicy(mdp.action_dim), 2000, np.random.default_rng(3))
    wins = sum(o.winner is Winner.ADVERSARY for o in batch.outcomes)
    others = len(batch.outcomes) - wins
    assert batch.dones.sum() == len(batch.outcomes)
    assert batch.rewards.sum() == wins - others
    # sparse: nonzero only where an episode ended
    assert np.all(batch.rewards[~batch.dones] == 0)
    assert set(np.unique(batch.rewards)) <= {-1.0, 0.0, 1.0}


def test_rollout_faults_on_non_finite_action(corridor_mdp):
    class Broken:
        calls = 0

        def act(self, obs, rng):
            self.calls += 1
            a = np.zeros((obs.shape[0], 4))
            if self.calls == 3:
                a[0, 0] = np.nan
            return a

    with pytest.raises(NumericalFault) as err:
        rollout(corridor_mdp(), Broken(), 40, np.random.default_rng(0))
    assert err.value.step == 2


def test_rollout_requires_whole_steps_per_env(corridor_mdp):
    with pytest.raises(ValueError):
        rollout(corridor_mdp(n_envs=4), RandPolicy(4), 10, np.random.default_rng(0))


def test_episode_streams_independent_of_slot_count():
    """The k-th episode in slot 0 starts identically whatever the number of slots."""
    game = make_env(EnvConfig(pose_dim=2))
    a = EmbeddedMdp(game, ZeroPolicy(game.action_dim), n_envs=1, seed=9)
    b = EmbeddedMdp(game, ZeroPolicy(game.action_dim), n_envs=3, seed=9)
    np.testing.assert_array_equal(a.reset()[0], b.reset()[0])

import dataclasses

import numpy as np
import pytest

from advpolicies.analysis import gmm
from advpolicies.game import NOT_DONE, MarkovGame, StepResult, payoff

# --- session-wide EM audit ----------------------------------------------------
# Every GMM fitted anywhere in the run is checked for a monotone EM history and
# normalized responsibilities. The wrapper is installed before test modules
# import fit_gmm, so direct imports are covered too.

EM_AUDIT: list[dict] = []
_original_fit = gmm.fit_gmm


def _audited_fit(X, *args, **kwargs):
    model = _original_fit(X, *args, **kwargs)
    Xa = np.asarray(getattr(X, "matrix", X), dtype=np.float64)
    h = np.asarray(model.history)
    resp = model.responsibilities(Xa)
    EM_AUDIT.append({
        "k": model.k,
        "drops": int(np.sum(np.diff(h) < -1e-9 * np.maximum(1.0, np.abs(h[:-1])))),
        "max_resp_error": float(np.max(np.abs(resp.sum(axis=1) - 1.0))),
        "negative": int(np.sum(resp < 0)),
    })
    return model


gmm.fit_gmm = _audited_fit

# --- acceptance reporting -----------------------------------------------------

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_collection_modifyitems(config, items):
    # the acceptance suite runs last so its audits see the whole session
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        return passed

    return record


@dataclasses.dataclass
class ToyState:
    s: np.ndarray  # (n,) state index in {0, 1, 2}
    t: np.ndarray


class ToyGame(MarkovGame):
    """Three states, two discrete actions per player (sign of the action scalar).

    ``KERNEL[s, a_adv, a_vic]`` is the next-state distribution; state 2 is a
    win for the adversary (player 1) once reached at the time limit.
    """

    action_dim = 1
    max_steps = 5
    reset_noise_dim = 0
    step_noise_dim = 1
    KERNEL = np.array([
        [[[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]], [[0.3, 0.3, 0.4], [0.5, 0.0, 0.5]]],
        [[[0.2, 0.2, 0.6], [0.4, 0.4, 0.2]], [[0.0, 0.9, 0.1], [0.25, 0.25, 0.5]]],
        [[[0.1, 0.1, 0.8], [0.3, 0.6, 0.1]], [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]]],
    ])  # indexed [s, a_adv, a_vic, s']

    def obs_dim(self, player):
        return 3

    def reset(self, noise):
        n = noise.shape[0]
        return ToyState(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))

    def step(self, state, a0, a1, noise):
        # player 0 is the victim, player 1 the adversary
        a_vic = (np.asarray(a0)[:, 0] > 0).astype(int)
        a_adv = (np.asarray(a1)[:, 0] > 0).astype(int)
        probs = self.KERNEL[state.s, a_adv, a_vic]
        nxt = (noise[:, :1] > np.cumsum(probs, axis=1)).sum(axis=1)
        t = state.t + 1
        winner = np.full(nxt.shape, NOT_DONE)
        end = t >= self.max_steps
        winner[end & (nxt == 2)] = 1
        winner[end & (nxt != 2)] = 0
        return StepResult(ToyState(nxt, t), payoff(winner), winner != NOT_DONE, winner)

    def observe(self, state, player, mask=None):
        return np.eye(3)[state.s]


class ToyVictim:
    """Plays action 1 with a state-dependent probability."""

    P_ONE = np.array([0.2, 0.5, 0.9])
    obs_dim, action_dim = 3, 1

    def act(self, obs, rng):
        s = np.argmax(obs, axis=1)
        return np.where(rng.random(s.shape) < self.P_ONE[s], 1.0, -1.0)[:, None]


@pytest.fixture
def toy_game():
    return ToyGame()


@pytest.fixture
def toy_victim():
    return ToyVictim()

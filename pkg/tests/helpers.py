"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from liftkit.distortions import make_context
from liftkit.environment import Trajectory, Transition


def hand_trajectory(rewards, actions, start=(0.5, 0.5), episode=0) -> Trajectory:
    """Trajectory under the identity distortion with the target at the origin.

    Positions follow the actions exactly; rewards are taken as given so tests
    can pin the return arithmetic independently of the geometry.
    """
    actions = np.asarray(actions, dtype=np.float64)
    d = actions.shape[1]
    s = np.asarray(start, dtype=np.float64)
    transitions = []
    for t, (a, r) in enumerate(zip(actions, rewards)):
        nxt = s + a
        transitions.append(Transition(
            obs=s.copy(), action=a.copy(), reward=float(r), done=t == len(rewards) - 1,
            latent_s=s.copy(), latent_next_s=nxt.copy(), next_obs=nxt.copy(), t=t,
        ))
        s = nxt
    return Trajectory(episode, transitions, make_context("identity", [], d), np.zeros(d))

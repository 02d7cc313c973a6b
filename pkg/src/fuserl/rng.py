"""Named random substreams derived from a master seed.

Every consumer of randomness asks for a generator keyed by a tuple of
integers (domain, round, session, purpose, ...).  Streams for different keys
are statistically independent and do not depend on the order in which they
are requested, so parallel collection cannot change results.
"""

from __future__ import annotations

import numpy as np

# domains
COLLECT = 1
EVALUATE = 2
NETWORK_INIT = 3
MINIBATCH = 4
BOOTSTRAP = 5

# per-session purposes
USER = 0
CANDIDATES = 1
FEEDBACK = 2
EXPLORE = 3


def substream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


class SessionStreams:
    """The four generators one simulated session draws from."""

    def __init__(self, seed: int, *key: int):
        self.user = substream(seed, *key, USER)
        self.candidates = substream(seed, *key, CANDIDATES)
        self.feedback = substream(seed, *key, FEEDBACK)
        self.explore = substream(seed, *key, EXPLORE)

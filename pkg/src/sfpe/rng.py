"""Counter-based random streams.

Every Brownian increment is addressed by ``(base_seed, stream, step)``: the
Philox key holds ``(base_seed, stream)`` and the step number occupies the top
word of the 256-bit counter, so distinct steps never share counter blocks.
Within one step the normals are laid out path-major, which makes any prefix
of paths independent of how many paths were requested in total.
"""

import numpy as np

from .errors import InvalidArgumentError

_U64 = 2 ** 64


def _as_u64(value, name):
    value = int(value)
    if not 0 <= value < _U64:
        raise InvalidArgumentError(f"{name} must lie in [0, 2**64), got {value}")
    return value


def stream_generator(base_seed, stream, step=0):
    key = np.array([_as_u64(base_seed, "base_seed"), _as_u64(stream, "stream")], dtype=np.uint64)
    counter = np.array([0, 0, 0, _as_u64(step, "step")], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def step_normals(base_seed, stream, step, n_paths, d):
    """Standard normals of shape ``(n_paths, d)`` for one time step of one stream."""
    return stream_generator(base_seed, stream, step).standard_normal((n_paths, d))


def brownian_increments(base_seed, stream, steps, n_paths, d):
    """Increments ``sqrt(dt_k) * N(0, I)`` with shape ``(n_paths, len(steps), d)``."""
    steps = np.asarray(steps, dtype=float)
    out = np.empty((n_paths, steps.size, d))
    for k, dt in enumerate(steps):
        out[:, k, :] = np.sqrt(dt) * step_normals(base_seed, stream, k, n_paths, d)
    return out

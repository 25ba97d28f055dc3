import numpy as np

from .errors import ConfigError, SimulationError

DEFAULT_STEP = 0.01


class Rng:
    """
    Seedable counter-based random stream (Philox).
    The pair (seed, stream) fully determines the draw sequence; parallel work
    derives independent children with `child(stream_id)`.
    """
    def __init__(self, seed: int, stream: tuple = ()):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}", field="seed")
        self.seed = seed
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, stream_id: int) -> "Rng":
        return Rng(self.seed, self.stream + (int(stream_id),))

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, lo, hi, size=None):
        return self._gen.uniform(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def as_batch(x):
    """Promote a (n,) vector to a (1, n) batch. Returns (batch, was_vector)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ConfigError(f"expected a vector or a batch of vectors, got shape {arr.shape}")
    return arr, False


def quad_form(Q, x):
    """
    x^T Q x as a plain sum of products.
    x may be a single vector (returns float) or a batch (returns array).
    """
    Q = np.asarray(Q, dtype=float)
    xb, single = as_batch(x)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ConfigError(f"Q must be square, got shape {Q.shape}")
    if Q.shape[0] != xb.shape[1]:
        raise ConfigError(f"Q is {Q.shape[0]}x{Q.shape[1]} but x has dimension {xb.shape[1]}")
    vals = np.einsum('bi,ij,bj->b', xb, Q, xb)
    return float(vals[0]) if single else vals


def is_positive_definite(Q) -> bool:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        return False
    if not np.allclose(Q, Q.T):
        return False
    try:
        np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        return False
    return True


def rk4_step(deriv, x, h):
    """
    One classical 4th-order Runge-Kutta step of dx/dt = deriv(x).
    Works on a single state or a batch of states.
    """
    if not h > 0:
        raise ConfigError(f"step must be positive, got {h}", field="step")
    x = np.asarray(x, dtype=float)

    def _eval(s):
        d = np.asarray(deriv(s), dtype=float)
        if not np.all(np.isfinite(d)):
            raise SimulationError("non-finite derivative", state=s)
        return d

    k1 = _eval(x)
    k2 = _eval(x + 0.5 * h * k1)
    k3 = _eval(x + 0.5 * h * k2)
    k4 = _eval(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def sample_uniform_box(rng: Rng, lo, hi, size=None):
    """
    Uniform draw in the box [lo, hi]. With `size` given, returns (size, n).
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != hi.shape:
        raise ConfigError(f"box bounds differ in shape: {lo.shape} vs {hi.shape}")
    if np.any(lo > hi):
        raise ConfigError(f"box lower bound exceeds upper bound: lo={lo}, hi={hi}")
    shape = lo.shape if size is None else (int(size),) + lo.shape
    return lo + (hi - lo) * rng.random(shape)


def sample_uniform_ball(rng: Rng, radius: float, dim: int, size: int):
    """Uniform draw in the Euclidean ball of the given radius."""
    direction = rng.normal((size, dim))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    r = radius * rng.random((size, 1)) ** (1.0 / dim)
    return direction / norms * r

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .neuralnet import MlpParams, backward, forward_with_cache, init_mlp
from .numkit import Rng, as_batch, is_positive_definite


@dataclass
class StabilityConfig:
    """
    Quadratic Lyapunov function V(x) = x^T Q x plus the decay constant alpha
    of the exponential-stability projection.
    eps_grad guards the division by ||grad V||^2; rows is the row count l of A(x).
    """
    Q: np.ndarray
    alpha: float
    eps_grad: float = 1e-12
    rows: int = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if not is_positive_definite(self.Q):
            raise ConfigError("Q must be symmetric positive definite", field="stability.q_diag")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}", field="stability.alpha")
        if not self.eps_grad > 0:
            raise ConfigError(f"eps_grad must be positive, got {self.eps_grad}", field="stability.eps_grad")
        if self.rows is None:
            self.rows = self.n
        if int(self.rows) < 1:
            raise ConfigError(f"rows must be >= 1, got {self.rows}", field="stability.rows")
        self.rows = int(self.rows)

    @classmethod
    def diagonal(cls, q_diag, alpha, eps_grad=1e-12, rows=None):
        return cls(np.diag(np.asarray(q_diag, dtype=float)), alpha, eps_grad, rows)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def eigen_bounds(self):
        """(lambda_min, lambda_max) of Q; these play the role of k1, k2."""
        eig = np.linalg.eigvalsh(self.Q)
        return float(eig[0]), float(eig[-1])


@dataclass
class StabilityHead:
    """
    NN_P: its output vector is split row-major into A (l x n) then B (n x n).
    """
    net: MlpParams
    n: int
    rows: int

    def __post_init__(self):
        expected = self.rows * self.n + self.n * self.n
        if self.net.output_dim != expected:
            raise ConfigError(f"stability head output dim {self.net.output_dim} != l*n + n*n = {expected}")
        if self.net.input_dim != self.n:
            raise ConfigError(f"stability head input dim {self.net.input_dim} != n = {self.n}")

    @classmethod
    def from_net(cls, net: MlpParams) -> "StabilityHead":
        n = net.input_dim
        rows, rem = divmod(net.output_dim - n * n, n)
        if rem or rows < 1:
            raise ConfigError(f"output dim {net.output_dim} cannot be split into A (l x {n}) and B ({n} x {n})")
        return cls(net, n, rows)

    def copy(self) -> "StabilityHead":
        return StabilityHead(self.net.copy(), self.n, self.rows)


def init_stability_head(n: int, rng: Rng, hidden=(64, 64, 64), rows=None) -> StabilityHead:
    rows = n if rows is None else rows
    net = init_mlp([n, *hidden, rows * n + n * n], rng)
    return StabilityHead(net, n, rows)


def lyapunov_value(cfg: StabilityConfig, x):
    xb, single = as_batch(x)
    if xb.shape[1] != cfg.n:
        raise ConfigError(f"state dim {xb.shape[1]} does not match Q ({cfg.n})")
    v = np.einsum('bi,ij,bj->b', xb, cfg.Q, xb)
    return float(v[0]) if single else v


def lyapunov_grad(cfg: StabilityConfig, x):
    """grad V = 2 Q x."""
    xb, single = as_batch(x)
    if xb.shape[1] != cfg.n:
        raise ConfigError(f"state dim {xb.shape[1]} does not match Q ({cfg.n})")
    g = 2.0 * xb @ cfg.Q.T
    return g[0] if single else g


def split_head_output(out, n: int, rows: int):
    """Head output (B, l*n + n*n) -> A (B, l, n), B (B, n, n)."""
    batch = out.shape[0]
    A = out[:, :rows * n].reshape(batch, rows, n)
    Bm = out[:, rows * n:].reshape(batch, n, n)
    return A, Bm


def _assemble(A, Bm):
    return np.einsum('bki,bkj->bij', A, A) + Bm - np.transpose(Bm, (0, 2, 1))


def assemble_P(head: StabilityHead, x):
    """
    P(x) = A^T A + (B - B^T). Its symmetric part is A^T A, so v^T P v >= 0.
    """
    xb, single = as_batch(x)
    out, _ = forward_with_cache(head.net, xb)
    A, Bm = split_head_output(out, head.n, head.rows)
    P = _assemble(A, Bm)
    return P[0] if single else P


def _hypothesis(cfg, head, xb):
    out, net_cache = forward_with_cache(head.net, xb)
    A, Bm = split_head_output(out, head.n, head.rows)
    P = _assemble(A, Bm)
    g = 2.0 * xb @ cfg.Q.T
    V = np.einsum('bi,ij,bj->b', xb, cfg.Q, xb)
    Pg = np.einsum('bij,bj->bi', P, g)
    W = np.einsum('bi,bi->b', g, Pg)
    slack = -W + cfg.alpha * V
    active = slack > 0
    denom = np.maximum(np.einsum('bi,bi->b', g, g), cfg.eps_grad)
    fs = -Pg - (np.where(active, slack, 0.0) / denom)[:, None] * g
    origin = ~np.any(xb != 0.0, axis=1)
    fs[origin] = 0.0
    cache = {'net': net_cache, 'A': A, 'g': g, 'denom': denom, 'active': active, 'origin': origin,
             'V': V, 'W': W}
    return fs, cache


def stable_hypothesis(cfg: StabilityConfig, head: StabilityHead, x):
    """
    f_s(x) = -P grad V - relu(-W + alpha V) / max(||grad V||^2, eps) * grad V,
    with W = grad V^T P grad V and f_s(0) := 0.
    """
    xb, single = as_batch(x)
    if xb.shape[1] != cfg.n or head.n != cfg.n:
        raise ConfigError(f"state dim {xb.shape[1]}, head dim {head.n} and Q dim {cfg.n} must agree")
    fs, _ = _hypothesis(cfg, head, xb)
    return fs[0] if single else fs


def stable_hypothesis_with_cache(cfg: StabilityConfig, head: StabilityHead, x):
    xb, _ = as_batch(x)
    return _hypothesis(cfg, head, xb)


def stable_hypothesis_backward(cfg: StabilityConfig, head: StabilityHead, cache, upstream):
    """
    Gradients of a scalar loss w.r.t. the head parameters, given dL/df_s.
    The relu switching surface takes subgradient 0.
    """
    G, _ = as_batch(upstream)
    G = np.where(cache['origin'][:, None], 0.0, G)
    g = cache['g']
    # dL/dP = -G g^T + c g g^T, with c = (G.g)/denom on the active branch
    c = np.where(cache['active'], np.einsum('bi,bi->b', G, g) / cache['denom'], 0.0)
    S = -np.einsum('bi,bj->bij', G, g) + c[:, None, None] * np.einsum('bi,bj->bij', g, g)
    dA = np.einsum('bki,bij->bkj', cache['A'], S + np.transpose(S, (0, 2, 1)))
    dB = S - np.transpose(S, (0, 2, 1))
    batch = G.shape[0]
    d_out = np.concatenate([dA.reshape(batch, -1), dB.reshape(batch, -1)], axis=1)
    grads, _ = backward(head.net, None, d_out, cache=cache['net'])
    return grads


def decay_rate(cfg: StabilityConfig, head: StabilityHead, x):
    """
    dV/dt along f_s, i.e. grad V^T f_s. Equals -max(W, alpha V) away from the origin.
    """
    xb, single = as_batch(x)
    if np.any(~np.any(xb != 0.0, axis=1)):
        raise DomainError("decay rate is undefined at the equilibrium x = 0")
    fs = stable_hypothesis(cfg, head, xb)
    rate = np.einsum('bi,bi->b', lyapunov_grad(cfg, xb), fs)
    return float(rate[0]) if single else rate


def hypothesis_w(cfg: StabilityConfig, head: StabilityHead, x):
    """W(x) = grad V^T P grad V."""
    xb, single = as_batch(x)
    _, cache = _hypothesis(cfg, head, xb)
    return float(cache['W'][0]) if single else cache['W']

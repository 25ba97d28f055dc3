from dataclasses import dataclass, field, replace
import os

import numpy as np
import pandas as pd
import yaml

from .errors import CheckpointError, ConfigError, PlantError
from .numkit import Rng, as_batch, sample_uniform_ball, sample_uniform_box

G0 = 9.81

PENDULUM_DEFAULTS = {'mass': 1.0, 'length': 1.0, 'gravity': G0}
CARTPOLE_DEFAULTS = {'cart_mass': 1.0, 'pole_mass': 0.3, 'pole_length': 0.5, 'gravity': G0}
VEHICLE_DEFAULTS = {'speed': 2.0, 'wheelbase': 1.0}


@dataclass
class PlantSpec:
    """
    A black-box plant, seen only through its derivative oracle f(x, u).

    raw_deriv works in physical coordinates; the public `deriv` evaluates it at
    x + offset so the target equilibrium sits at x = 0.
    input_norm is 'ball' (bound on ||u||) or 'box' (bound on each |u_i|).
    """
    name: str
    n: int
    m: int
    raw_deriv: object
    offset: np.ndarray
    state_lo: np.ndarray
    state_hi: np.ndarray
    input_bound: float
    input_norm: str = 'box'
    params: dict = field(default_factory=dict)
    converge_dims: tuple = None
    raw_energy: object = None

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)
        self.state_lo = np.asarray(self.state_lo, dtype=float)
        self.state_hi = np.asarray(self.state_hi, dtype=float)
        if self.offset.shape != (self.n,) or self.state_lo.shape != (self.n,) or self.state_hi.shape != (self.n,):
            raise ConfigError(f"{self.name}: offset/domain must have length n={self.n}", field="plant.domain")
        if np.any(self.state_lo >= self.state_hi):
            raise ConfigError(f"{self.name}: empty state domain lo={self.state_lo}, hi={self.state_hi}",
                              field="plant.domain")
        if not self.input_bound > 0:
            raise ConfigError(f"{self.name}: input bound must be positive", field="plant.input_bound")
        if self.input_norm not in ('ball', 'box'):
            raise ConfigError(f"{self.name}: unknown input norm '{self.input_norm}'")
        if self.converge_dims is None:
            self.converge_dims = tuple(range(self.n))

    @property
    def equilibrium(self) -> np.ndarray:
        return np.zeros(self.n)

    @property
    def component_bound(self) -> np.ndarray:
        """Per-input bound for the policy's tanh output; keeps ||u|| <= u_bar for ball-bounded plants."""
        if self.input_norm == 'ball':
            return np.full(self.m, self.input_bound / np.sqrt(self.m))
        return np.full(self.m, float(self.input_bound))

    def deriv(self, x, u):
        xb, single = as_batch(x)
        ub, _ = as_batch(u)
        if xb.shape[1] != self.n or ub.shape[1] != self.m:
            raise ConfigError(f"{self.name}: expected x of dim {self.n} and u of dim {self.m}, "
                              f"got {xb.shape[1]} and {ub.shape[1]}")
        d = self.raw_deriv(xb + self.offset, ub)
        return d[0] if single else d

    def energy(self, x):
        if self.raw_energy is None:
            raise PlantError(f"{self.name} does not define an energy function")
        xb, single = as_batch(x)
        e = self.raw_energy(xb + self.offset)
        return float(e[0]) if single else e

    def saturate(self, u):
        u = np.asarray(u, dtype=float)
        if self.input_norm == 'ball':
            norms = np.linalg.norm(u, axis=-1, keepdims=True)
            factor = np.minimum(1.0, self.input_bound / np.maximum(norms, 1e-300))
            return u * factor
        return np.clip(u, -self.input_bound, self.input_bound)

    def input_ok(self, u, tol=1e-12):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if self.input_norm == 'ball':
            return np.linalg.norm(u, axis=1) <= self.input_bound * (1 + tol)
        return np.all(np.abs(u) <= self.input_bound * (1 + tol), axis=1)

    def in_domain(self, x):
        xb, single = as_batch(x)
        inside = np.all((xb >= self.state_lo) & (xb <= self.state_hi), axis=1)
        return bool(inside[0]) if single else inside

    def sample_inputs(self, rng: Rng, size: int):
        if self.input_norm == 'ball':
            return sample_uniform_ball(rng, self.input_bound, self.m, size)
        return sample_uniform_box(rng, np.full(self.m, -self.input_bound), np.full(self.m, self.input_bound), size)

    def with_domain(self, lo, hi) -> "PlantSpec":
        return replace(self, state_lo=np.asarray(lo, dtype=float).copy(), state_hi=np.asarray(hi, dtype=float).copy())

    def scaled(self, factor: float) -> "PlantSpec":
        """Same plant over the domain scaled about the origin."""
        if not factor > 0:
            raise ConfigError(f"domain scale must be positive, got {factor}", field="roa.domain_scale")
        return self.with_domain(self.state_lo * factor, self.state_hi * factor)

    def with_input_bound(self, bound: float) -> "PlantSpec":
        return replace(self, input_bound=float(bound))

    def radius(self) -> float:
        """Half-diagonal of the domain box over the convergence coordinates."""
        dims = list(self.converge_dims)
        half = (self.state_hi[dims] - self.state_lo[dims]) / 2.0
        return float(np.linalg.norm(half))


# --- n-link pendulum ---

def _nlink_terms(masses, lengths):
    # mu_k = sum of masses from link k outward
    mu = np.cumsum(masses[::-1])[::-1]
    idx = np.arange(len(masses))
    mu_jk = mu[np.maximum(idx[:, None], idx[None, :])]
    coef = mu_jk * lengths[:, None] * lengths[None, :]
    return mu, coef


def _nlink_raw_deriv(masses, lengths, g):
    """
    Point masses on massless rods; angles phi measured from the downward vertical,
    inputs are the generalized forces on the absolute link angles:
    M(phi) phi'' + h(phi, omega) + G(phi) = u.
    """
    n = len(masses)
    mu, coef = _nlink_terms(masses, lengths)

    def deriv(x, u):
        phi = x[:, :n]
        omega = x[:, n:]
        diff = phi[:, :, None] - phi[:, None, :]
        M = coef * np.cos(diff)
        h = np.einsum('bjk,bk->bj', coef * np.sin(diff), omega ** 2)
        grav = g * mu * lengths * np.sin(phi)
        try:
            acc = np.linalg.solve(M, (u - h - grav)[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise PlantError("singular pendulum mass matrix")
        return np.concatenate([omega, acc], axis=1)

    return deriv


def _nlink_raw_energy(masses, lengths, g):
    n = len(masses)
    mu, coef = _nlink_terms(masses, lengths)

    def energy(x):
        phi = x[:, :n]
        omega = x[:, n:]
        M = coef * np.cos(phi[:, :, None] - phi[:, None, :])
        kinetic = 0.5 * np.einsum('bj,bjk,bk->b', omega, M, omega)
        potential = -g * np.sum(mu * lengths * np.cos(phi), axis=1)
        return kinetic + potential

    return energy


def pendulum_nlink(n: int, params: dict = None, domain=None, input_bound=None) -> PlantSpec:
    """
    n-link pendulum balanced upright. State (theta_1..theta_n, omega_1..omega_n),
    angles measured from the upright posture; fully actuated, ||u|| <= 10 sqrt(n).
    """
    if n not in (1, 2, 3):
        raise ConfigError(f"pendulum supports 1-3 links, got {n}", field="plant.links")
    p = {**PENDULUM_DEFAULTS, **(params or {})}
    masses = np.broadcast_to(np.asarray(p['mass'], dtype=float), (n,)).copy()
    lengths = np.broadcast_to(np.asarray(p['length'], dtype=float), (n,)).copy()
    if np.any(masses <= 0) or np.any(lengths <= 0) or p['gravity'] <= 0:
        raise PlantError("pendulum masses, lengths and gravity must be positive")

    lo, hi = domain if domain is not None else (-np.ones(2 * n), np.ones(2 * n))
    return PlantSpec(
        name=f"pendulum_{n}link",
        n=2 * n,
        m=n,
        raw_deriv=_nlink_raw_deriv(masses, lengths, p['gravity']),
        offset=np.concatenate([np.full(n, np.pi), np.zeros(n)]),
        state_lo=lo,
        state_hi=hi,
        input_bound=10.0 * np.sqrt(n) if input_bound is None else input_bound,
        input_norm='ball',
        params={'mass': masses.tolist(), 'length': lengths.tolist(), 'gravity': float(p['gravity'])},
        raw_energy=_nlink_raw_energy(masses, lengths, p['gravity']),
    )


# --- pendulum on a cart ---

def _cartpole_raw_deriv(cart_mass, pole_mass, length, g):
    """State (s, phi, s_dot, phi_dot) with phi from the downward vertical; u is the lateral force."""
    def deriv(x, u):
        phi = x[:, 1]
        v = x[:, 2]
        w = x[:, 3]
        force = u[:, 0]
        s, c = np.sin(phi), np.cos(phi)
        denom = cart_mass + pole_mass * s * s
        acc_cart = (force + pole_mass * length * s * w * w + pole_mass * g * s * c) / denom
        acc_pole = (-(cart_mass + pole_mass) * g * s - c * (force + pole_mass * length * s * w * w)) / (length * denom)
        return np.stack([v, w, acc_cart, acc_pole], axis=1)

    return deriv


def cartpole(params: dict = None, domain=None, input_bound=None) -> PlantSpec:
    """
    Inverted pendulum on a sliding cart, state (x, theta, v, omega), |u| <= 50.
    Cart position and velocity saturation is the state domain.
    """
    p = {**CARTPOLE_DEFAULTS, **(params or {})}
    if min(p['cart_mass'], p['pole_mass'], p['pole_length'], p['gravity']) <= 0:
        raise PlantError("cart-pole masses, length and gravity must be positive")
    lo, hi = domain if domain is not None else (np.array([-2.0, -0.8, -2.0, -2.0]), np.array([2.0, 0.8, 2.0, 2.0]))
    return PlantSpec(
        name="cartpole",
        n=4,
        m=1,
        raw_deriv=_cartpole_raw_deriv(p['cart_mass'], p['pole_mass'], p['pole_length'], p['gravity']),
        offset=np.array([0.0, np.pi, 0.0, 0.0]),
        state_lo=lo,
        state_hi=hi,
        input_bound=50.0 if input_bound is None else input_bound,
        input_norm='box',
        params={k: float(v) for k, v in p.items()},
        # the cart is not required to return to the origin
        converge_dims=(1, 3),
    )


# --- wheeled vehicle ---

def _vehicle_raw_deriv(speed, wheelbase):
    """Front-axle crosstrack error on a straight path: (d_e, theta_e), u = steering angle."""
    def deriv(x, u):
        theta = x[:, 1]
        steer = u[:, 0]
        return np.stack([speed * np.sin(theta + steer), (speed / wheelbase) * np.sin(steer)], axis=1)

    return deriv


def wheeled_vehicle(params: dict = None, domain=None, input_bound=None) -> PlantSpec:
    p = {**VEHICLE_DEFAULTS, **(params or {})}
    if p['speed'] <= 0 or p['wheelbase'] <= 0:
        raise PlantError("vehicle speed and wheelbase must be positive")
    lo, hi = domain if domain is not None else (np.array([-2.0, -1.0]), np.array([2.0, 1.0]))
    return PlantSpec(
        name="vehicle",
        n=2,
        m=1,
        raw_deriv=_vehicle_raw_deriv(p['speed'], p['wheelbase']),
        offset=np.zeros(2),
        state_lo=lo,
        state_hi=hi,
        input_bound=np.pi / 6 if input_bound is None else input_bound,
        input_norm='box',
        params={k: float(v) for k, v in p.items()},
    )


def autonomous_plant(name: str, field_fn, lo, hi) -> PlantSpec:
    """Wrap an input-free vector field x -> dx/dt as a plant whose single input is ignored."""
    lo = np.asarray(lo, dtype=float)
    return PlantSpec(
        name=name,
        n=lo.shape[0],
        m=1,
        raw_deriv=lambda x, u: np.asarray(field_fn(x), dtype=float),
        offset=np.zeros(lo.shape[0]),
        state_lo=lo,
        state_hi=hi,
        input_bound=1.0,
    )


def make_plant(kind: str, links: int = 1, params: dict = None, domain=None, input_bound=None) -> PlantSpec:
    if kind == 'pendulum':
        return pendulum_nlink(links, params, domain, input_bound)
    if kind == 'cartpole':
        return cartpole(params, domain, input_bound)
    if kind == 'vehicle':
        return wheeled_vehicle(params, domain, input_bound)
    raise ConfigError(f"unknown plant kind '{kind}'", field="plant.kind")


# --- datasets ---

@dataclass
class DynamicsSample:
    x: np.ndarray
    u: np.ndarray
    dxdt_u: np.ndarray
    dxdt_0: np.ndarray


@dataclass
class Dataset:
    """Column-stacked samples (N, n) / (N, m) plus provenance."""
    x: np.ndarray
    u: np.ndarray
    dxdt_u: np.ndarray
    dxdt_0: np.ndarray
    plant: str
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    input_bound: float
    seed: int
    split: str = 'train'

    def __len__(self):
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def control_effect(self) -> np.ndarray:
        """g(x, u) = f(x, u) - f(x, 0) for every sample."""
        return self.dxdt_u - self.dxdt_0

    def to_frame(self) -> pd.DataFrame:
        cols = {}
        for name, arr in (('x', self.x), ('u', self.u), ('fu', self.dxdt_u), ('f0', self.dxdt_0)):
            for j in range(arr.shape[1]):
                cols[f"{name}{j}"] = arr[:, j]
        return pd.DataFrame(cols)

    def metadata(self) -> dict:
        return {
            'plant': self.plant,
            'split': self.split,
            'seed': int(self.seed),
            'n_samples': len(self),
            'n': self.n,
            'm': self.m,
            'domain_lo': self.domain_lo.tolist(),
            'domain_hi': self.domain_hi.tolist(),
            'input_bound': float(self.input_bound),
        }


def generate_dataset(plant: PlantSpec, N: int, rng: Rng, include_zero_input: bool = False,
                     controller=None, split: str = 'train') -> Dataset:
    """
    Sample x uniformly in the plant's domain and u uniformly within u_bar, then
    query the oracle for f(x, u) and f(x, 0).

    include_zero_input forces u = 0 on every even-indexed sample.
    With a controller, each sample takes the controller's (saturated) input with
    probability 1/2 and a random input otherwise.
    """
    if N < 1:
        raise ConfigError(f"dataset size must be positive, got {N}", field="data.n_train")
    x = sample_uniform_box(rng, plant.state_lo, plant.state_hi, N)
    u = plant.sample_inputs(rng, N)
    if controller is not None:
        use_policy = rng.random(N) < 0.5
        if np.any(use_policy):
            u[use_policy] = plant.saturate(controller(x[use_policy]))
    if include_zero_input:
        u[0::2] = 0.0

    dxdt_u = plant.deriv(x, u)
    dxdt_0 = plant.deriv(x, np.zeros_like(u))
    return Dataset(x=x, u=u, dxdt_u=dxdt_u, dxdt_0=dxdt_0, plant=plant.name,
                   domain_lo=plant.state_lo.copy(), domain_hi=plant.state_hi.copy(),
                   input_bound=float(plant.input_bound), seed=rng.seed, split=split)


def validate_dataset(ds: Dataset, input_norm: str = None):
    """Every sample finite, inside the recorded domain and within u_bar."""
    for name in ('x', 'u', 'dxdt_u', 'dxdt_0'):
        if not np.all(np.isfinite(getattr(ds, name))):
            raise CheckpointError(f"dataset has non-finite {name} entries")
    tol = 1e-12
    if np.any(ds.x < ds.domain_lo - tol) or np.any(ds.x > ds.domain_hi + tol):
        bad = int(np.argmax(np.any((ds.x < ds.domain_lo - tol) | (ds.x > ds.domain_hi + tol), axis=1)))
        raise CheckpointError("sample state outside the recorded domain", position=f"row {bad}")
    if input_norm == 'box':
        over = np.any(np.abs(ds.u) > ds.input_bound * (1 + tol), axis=1)
    else:
        over = np.linalg.norm(ds.u, axis=1) > ds.input_bound * (1 + tol)
    if np.any(over):
        raise CheckpointError("sample input exceeds the actuation bound", position=f"row {int(np.argmax(over))}")
    return ds


def _meta_path(path):
    root, _ = os.path.splitext(str(path))
    return root + '.meta.yml'


def save_dataset(ds: Dataset, path, input_norm: str = None):
    ds.to_frame().to_csv(path, index=False, float_format='%.17g')
    meta = ds.metadata()
    if input_norm is not None:
        meta['input_norm'] = input_norm
    with open(_meta_path(path), 'w') as f:
        yaml.safe_dump(meta, f, sort_keys=False)


def load_dataset(path) -> Dataset:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    meta_file = _meta_path(path)
    if not os.path.exists(meta_file):
        raise FileNotFoundError(f"dataset metadata not found: {meta_file}")
    with open(meta_file, 'r') as f:
        meta = yaml.safe_load(f)

    try:
        df = pd.read_csv(path, dtype=float, float_precision='round_trip')
    except (ValueError, pd.errors.ParserError) as e:
        raise CheckpointError(f"unreadable dataset {path}: {e}")
    n, m = int(meta['n']), int(meta['m'])
    expected = [f"x{j}" for j in range(n)] + [f"u{j}" for j in range(m)] \
        + [f"fu{j}" for j in range(n)] + [f"f0{j}" for j in range(n)]
    if list(df.columns) != expected:
        raise CheckpointError(f"dataset header {list(df.columns)} does not match {expected}", position="header")

    ds = Dataset(
        x=df[expected[:n]].to_numpy(),
        u=df[expected[n:n + m]].to_numpy(),
        dxdt_u=df[expected[n + m:2 * n + m]].to_numpy(),
        dxdt_0=df[expected[2 * n + m:]].to_numpy(),
        plant=meta['plant'],
        domain_lo=np.asarray(meta['domain_lo'], dtype=float),
        domain_hi=np.asarray(meta['domain_hi'], dtype=float),
        input_bound=float(meta['input_bound']),
        seed=int(meta['seed']),
        split=meta.get('split', 'train'),
    )
    return validate_dataset(ds, meta.get('input_norm'))

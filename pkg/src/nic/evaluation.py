from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
import os

import numpy as np
import pandas as pd

from .errors import BaselineError, ConfigError
from .neuralnet import MlpParams, sample_dropout_masks
from .numkit import DEFAULT_STEP, Rng, quad_form, rk4_step, sample_uniform_box
from .plants import PlantSpec, autonomous_plant, generate_dataset
from .stability import StabilityConfig, StabilityHead, stable_hypothesis
from .training import TrainConfig, policy_fn, train_model

CONVERGED = 'converged'
LEFT_DOMAIN = 'left_domain'
ENERGY_ABOVE = 'energy_above_threshold'

WORKERS_ENV = 'NIC_WORKERS'


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, '1')))
    except ValueError:
        return 1


@dataclass
class RoaThresholds:
    """
    horizon/step: simulation length and RK4 step (s).
    tau_V = energy_fraction * median initial V; convergence also needs
    ||x(T)|| < final_radius_fraction * domain radius.
    A controller is invalid when fewer than min_fraction of samples converge.
    """
    horizon: float = 20.0
    step: float = DEFAULT_STEP
    energy_fraction: float = 0.5
    final_radius_fraction: float = 0.05
    min_fraction: float = 0.05

    def __post_init__(self):
        if not (self.horizon > 0 and self.step > 0):
            raise ConfigError("horizon and step must be positive", field="roa.horizon")
        if not (self.energy_fraction > 0 and self.final_radius_fraction > 0):
            raise ConfigError("energy and radius fractions must be positive", field="roa.energy_fraction")
        if not 0 <= self.min_fraction <= 1:
            raise ConfigError("min_fraction must lie in [0, 1]", field="roa.min_fraction")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.step))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    lyapunov: np.ndarray
    lyapunov_running_avg: float
    left_domain: bool = False

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({'t': self.times})
        for j in range(self.states.shape[1]):
            df[f"x{j}"] = self.states[:, j]
        for j in range(self.inputs.shape[1]):
            df[f"u{j}"] = self.inputs[:, j]
        df['V'] = self.lyapunov
        return df


@dataclass
class RoaEstimate:
    initial_states: np.ndarray
    verdicts: np.ndarray
    running_avg: np.ndarray
    final_states: np.ndarray
    tau_v: float
    tau_n: int
    thresholds: RoaThresholds

    @property
    def membership(self) -> int:
        return int(np.sum(self.verdicts == CONVERGED))

    @property
    def valid(self) -> bool:
        return self.membership >= self.tau_n

    @property
    def converged_states(self) -> np.ndarray:
        return self.initial_states[self.verdicts == CONVERGED]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({f"x{j}": self.initial_states[:, j] for j in range(self.initial_states.shape[1])})
        df['verdict'] = self.verdicts
        df['V_running_avg'] = self.running_avg
        return df

    def summary(self) -> dict:
        counts = {v: int(np.sum(self.verdicts == v)) for v in (CONVERGED, LEFT_DOMAIN, ENERGY_ABOVE)}
        return {
            'n_samples': int(len(self.verdicts)),
            'membership': self.membership,
            'valid': bool(self.valid),
            'verdict_counts': counts,
            'tau_v': float(self.tau_v),
            'tau_n': int(self.tau_n),
            'horizon': float(self.thresholds.horizon),
            'step': float(self.thresholds.step),
            'final_radius_fraction': float(self.thresholds.final_radius_fraction),
        }


def _control(plant, controller, X):
    return plant.saturate(np.atleast_2d(controller(X)))


def simulate_closed_loop(plant: PlantSpec, controller, x0, T: float, h: float = DEFAULT_STEP, Q=None) -> Trajectory:
    """
    RK4 with zero-order hold: u = controller(x_k) is held across each step.
    Stops early, flagged left_domain, when the state leaves the plant's domain.
    """
    if not (T > 0 and h > 0):
        raise ConfigError("T and h must be positive")
    Q = np.eye(plant.n) if Q is None else np.asarray(Q, dtype=float)
    x = np.asarray(x0, dtype=float).reshape(1, plant.n)
    steps = int(round(T / h))
    states, inputs = [x[0].copy()], []
    left = not plant.in_domain(x[0])
    for k in range(steps):
        if left:
            break
        u = _control(plant, controller, x)
        inputs.append(u[0].copy())
        x = rk4_step(lambda s: plant.deriv(s, u), x, h)
        states.append(x[0].copy())
        left = not plant.in_domain(x[0])
    inputs.append(_control(plant, controller, x)[0].copy())

    states = np.array(states)
    V = quad_form(Q, states)
    return Trajectory(
        times=np.arange(len(states)) * h,
        states=states,
        inputs=np.array(inputs),
        lyapunov=V,
        lyapunov_running_avg=float(np.mean(V)),
        left_domain=bool(left),
    )


def _rollout(plant, controller, X0, steps, h, Q):
    """Batch rollout; returns (final states, left flags, running mean of V)."""
    X = np.array(X0, dtype=float, copy=True)
    active = plant.in_domain(X)
    left = ~active
    v_sum = quad_form(Q, X)
    counts = np.ones(len(X))
    for _ in range(steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = X[idx]
        u = _control(plant, controller, xa)
        xn = rk4_step(lambda s: plant.deriv(s, u), xa, h)
        X[idx] = xn
        v_sum[idx] += quad_form(Q, xn)
        counts[idx] += 1
        out = ~plant.in_domain(xn)
        if np.any(out):
            active[idx[out]] = False
            left[idx[out]] = True
    return X, left, v_sum / counts


def classify_initial_states(plant: PlantSpec, controller, X0, thresholds: RoaThresholds, Q, tau_v=None):
    """
    Simulate every initial state and give it a verdict.
    Returns (verdicts, running averages, final states, tau_v).
    Work is split over NIC_WORKERS threads; results keep sample order.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    Q = np.asarray(Q, dtype=float)
    if tau_v is None:
        tau_v = thresholds.energy_fraction * float(np.median(quad_form(Q, X0)))

    workers = min(_worker_count(), len(X0))
    chunks = np.array_split(np.arange(len(X0)), workers)

    def run(idx):
        return _rollout(plant, controller, X0[idx], thresholds.steps, thresholds.step, Q)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(chunks[0])]
    final = np.concatenate([p[0] for p in parts])
    left = np.concatenate([p[1] for p in parts])
    running = np.concatenate([p[2] for p in parts])

    dims = list(plant.converge_dims)
    final_norm = np.linalg.norm(final[:, dims], axis=1)
    settled = (running <= tau_v) & (final_norm < thresholds.final_radius_fraction * plant.radius())
    verdicts = np.where(left, LEFT_DOMAIN, np.where(settled, CONVERGED, ENERGY_ABOVE))
    return verdicts, running, final, tau_v


def estimate_roa(plant: PlantSpec, controller, n_samples: int, thresholds: RoaThresholds, rng: Rng, Q) -> RoaEstimate:
    """
    Sample initial states uniformly in the plant's domain, simulate the closed
    loop and keep those that stay in the domain and settle at the origin.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be positive", field="roa.n_samples")
    X0 = sample_uniform_box(rng, plant.state_lo, plant.state_hi, n_samples)
    verdicts, running, final, tau_v = classify_initial_states(plant, controller, X0, thresholds, Q)
    tau_n = int(np.ceil(thresholds.min_fraction * n_samples))
    return RoaEstimate(X0, verdicts, running, final, tau_v, tau_n, thresholds)


def slice_grid(plant: PlantSpec, dims, resolution: int, scale: float = 1.0) -> np.ndarray:
    """Regular grid over two coordinates of the domain; the others are zero."""
    i, j = dims
    xs = np.linspace(plant.state_lo[i], plant.state_hi[i], resolution) * scale
    ys = np.linspace(plant.state_lo[j], plant.state_hi[j], resolution) * scale
    gx, gy = np.meshgrid(xs, ys, indexing='ij')
    X0 = np.zeros((gx.size, plant.n))
    X0[:, i] = gx.ravel()
    X0[:, j] = gy.ravel()
    return X0


def roa_slice_grid(plant: PlantSpec, controller, dims, resolution: int, thresholds: RoaThresholds, Q,
                   tau_v=None) -> pd.DataFrame:
    X0 = slice_grid(plant, dims, resolution)
    verdicts, running, _, _ = classify_initial_states(plant, controller, X0, thresholds, Q, tau_v)
    df = pd.DataFrame({f"x{d}": X0[:, d] for d in dims})
    df['verdict'] = verdicts
    df['V_running_avg'] = running
    return df


def response_metrics(traj: Trajectory, dims=None, band: float = 0.02) -> pd.DataFrame:
    """
    Settling time (inside band * |initial deviation| for good) and overshoot
    (excursion past zero relative to the initial deviation) per coordinate.
    """
    dims = range(traj.states.shape[1]) if dims is None else dims
    rows = []
    for d in dims:
        x = traj.states[:, d]
        ref = abs(x[0]) if x[0] != 0 else float(np.max(np.abs(x)))
        if ref == 0:
            rows.append({'dim': d, 'settling_time': 0.0, 'overshoot': 0.0})
            continue
        outside = np.flatnonzero(np.abs(x) > band * ref)
        if outside.size == 0:
            settling = 0.0
        elif outside[-1] == len(x) - 1:
            settling = np.nan
        else:
            settling = float(traj.times[outside[-1] + 1])
        overshoot = float(max(0.0, np.max(-np.sign(x[0]) * x)) / ref) if x[0] != 0 else 0.0
        rows.append({'dim': d, 'settling_time': settling, 'overshoot': overshoot})
    return pd.DataFrame(rows)


# --- LQR baseline ---

@dataclass
class LqrGain:
    K: np.ndarray
    h_disc: float
    P_dare: np.ndarray
    Q_lqr: np.ndarray
    R_lqr: np.ndarray
    iterations: int
    residual: float


def linearize(plant: PlantSpec, step: float = 1e-5):
    """Central-difference Jacobians (A, B) of the plant at its equilibrium."""
    n, m = plant.n, plant.m
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    x0, u0 = plant.equilibrium, np.zeros(m)
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = step
        A[:, j] = (plant.deriv(x0 + dx, u0) - plant.deriv(x0 - dx, u0)) / (2 * step)
    for j in range(m):
        du = np.zeros(m)
        du[j] = step
        B[:, j] = (plant.deriv(x0, u0 + du) - plant.deriv(x0, u0 - du)) / (2 * step)
    return A, B


def dare_iterate(A_d, B_d, Q, R, tol: float = 1e-10, max_iter: int = 100_000):
    """
    Iterate the discrete Riccati recursion from P = Q to its fixed point.
    Returns (P, K, iterations, residual).
    """
    A_d, B_d = np.atleast_2d(A_d).astype(float), np.atleast_2d(B_d).astype(float)
    Q, R = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float)
    P = Q.copy()
    residual = np.inf
    for k in range(1, max_iter + 1):
        BtP = B_d.T @ P
        K = np.linalg.solve(R + BtP @ B_d, BtP @ A_d)
        P_next = Q + A_d.T @ P @ A_d - A_d.T @ P @ B_d @ K
        P_next = 0.5 * (P_next + P_next.T)
        residual = float(np.max(np.abs(P_next - P)))
        P = P_next
        if residual < tol * max(1.0, float(np.max(np.abs(P)))):
            BtP = B_d.T @ P
            K = np.linalg.solve(R + BtP @ B_d, BtP @ A_d)
            return P, K, k, residual
    raise BaselineError(f"Riccati iteration did not converge in {max_iter} iterations (residual {residual:.3e})")


def lqr_gain(plant: PlantSpec, Q_lqr, R_lqr, h_disc: float = DEFAULT_STEP) -> LqrGain:
    """Euler-discretized LQR on the finite-difference linearization at the origin."""
    A, B = linearize(plant)
    A_d = np.eye(plant.n) + h_disc * A
    B_d = h_disc * B
    Q_lqr = np.atleast_2d(np.asarray(Q_lqr, dtype=float))
    R_lqr = np.atleast_2d(np.asarray(R_lqr, dtype=float))
    P, K, iterations, residual = dare_iterate(A_d, B_d, Q_lqr, R_lqr)
    return LqrGain(K, h_disc, P, Q_lqr, R_lqr, iterations, residual)


def lqr_controller(gain: LqrGain, plant: PlantSpec):
    def control(x):
        return plant.saturate(-np.atleast_2d(x) @ gain.K.T)
    return control


def zero_controller(plant: PlantSpec):
    def control(x):
        return np.zeros((np.atleast_2d(x).shape[0], plant.m))
    return control


# --- MC dropout ---

def mc_dropout_map(plant: PlantSpec, pi: MlpParams, X0, thresholds: RoaThresholds, rng: Rng, Q,
                   n_mc: int = 50, p_drop: float = 0.2) -> np.ndarray:
    """
    Failure probability per initial state over n_mc closed-loop simulations,
    each run with one independently sampled thinned policy network.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    tau_v = thresholds.energy_fraction * float(np.median(quad_form(np.asarray(Q, dtype=float), X0)))
    failures = np.zeros(len(X0), dtype=int)
    for j in range(n_mc):
        masks = sample_dropout_masks(pi, p_drop, rng.child(j))
        verdicts, _, _, _ = classify_initial_states(plant, policy_fn(pi, masks), X0, thresholds, Q, tau_v)
        failures += verdicts != CONVERGED
    return failures / n_mc


# --- learned hypothesis as a plant ---

def hypothesis_plant(cfg: StabilityConfig, head: StabilityHead, lo, hi) -> PlantSpec:
    return autonomous_plant('hypothesis', lambda x: stable_hypothesis(cfg, head, x), lo, hi)


# --- iterative learning ---

@dataclass
class IterativeSettings:
    train: TrainConfig
    thresholds: RoaThresholds
    n_train: int = 10_000
    n_val: int = 5_000
    n_roa: int = 500
    shrink: float = 0.1
    include_zero_input: bool = False


@dataclass
class RoundResult:
    round: int
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    model: object
    report: object
    roa: RoaEstimate


def next_training_domain(roa: RoaEstimate, shrink: float):
    """Bounding box of the converged initial states, shrunk by `shrink` of its width per side."""
    conv = roa.converged_states
    if len(conv) == 0:
        return None
    lo, hi = conv.min(axis=0), conv.max(axis=0)
    width = hi - lo
    lo, hi = lo + shrink * width, hi - shrink * width
    if np.any(lo >= hi):
        return None
    return lo, hi


def iterative_learning(plant: PlantSpec, initial_domain, rounds: int, settings: IterativeSettings, rng: Rng):
    """
    Round 1 learns from the initial safe domain; each later round samples states
    from a box inside the previous ROA, queries the plant with the previous
    controller and with u = 0, retrains and re-estimates the ROA over the
    plant's full domain. Returns (rounds list, halt reason or None).
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1", field="iterate.rounds")
    Q = settings.train.stability.Q
    results = []
    domain = (np.asarray(initial_domain[0], dtype=float), np.asarray(initial_domain[1], dtype=float))
    controller = None
    for k in range(1, rounds + 1):
        round_rng = rng.child(100 + k)
        train_plant = plant.with_domain(*domain)
        train = generate_dataset(train_plant, settings.n_train, round_rng.child(1),
                                 settings.include_zero_input, controller, split='train')
        val = generate_dataset(train_plant, settings.n_val, round_rng.child(2),
                               settings.include_zero_input, controller, split='val')
        cfg = replace(settings.train, seed=settings.train.seed + k - 1)
        model, report = train_model(train, val, cfg)
        roa = estimate_roa(plant, model.policy(), settings.n_roa, settings.thresholds, round_rng.child(3), Q)
        results.append(RoundResult(k, domain[0], domain[1], model, report, roa))
        print(f"[iterate] round {k}: membership {roa.membership}/{len(roa.verdicts)}")

        if not roa.valid:
            reason = f"round {k} controller invalid: {roa.membership} converged < tau_N = {roa.tau_n}"
            print(f"[iterate] halting, {reason}")
            return results, reason
        if k < rounds:
            domain = next_training_domain(roa, settings.shrink)
            if domain is None:
                reason = f"round {k} ROA too small to define a training box"
                print(f"[iterate] halting, {reason}")
                return results, reason
            controller = model.policy()
    return results, None

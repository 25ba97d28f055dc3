from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import CheckpointError, ConfigError, TrainingError
from .numkit import Rng, as_batch

ACTIVATIONS = ('relu', 'tanh', 'identity')
DROPOUT_MODES = ('off', 'train', 'mc_inference')
CHECKPOINT_SCHEMA = 'nic-mlp/1'


@dataclass
class MlpParams:
    """
    Weights and biases of one multilayer perceptron.
    Layer i maps a (B, fan_in) batch to (B, fan_out) as act(x @ W + b),
    so weights[i] has shape (fan_in, fan_out).
    """
    weights: list
    biases: list
    activations: list
    output_bound: np.ndarray = None

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ConfigError("weights, biases and activations must be non-empty lists of equal length")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError(f"layer {i}: weight {w.shape} and bias {b.shape} do not fit")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ConfigError(f"layer {i}: input dim {w.shape[0]} does not chain "
                                  f"with previous output dim {self.weights[i - 1].shape[1]}")
            if act not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation '{act}'")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigError(f"layer {i}: non-finite parameters")
        if self.output_bound is not None:
            self.output_bound = np.broadcast_to(
                np.asarray(self.output_bound, dtype=float), (self.output_dim,)).copy()
            if np.any(self.output_bound <= 0):
                raise ConfigError("output bound entries must be positive")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_sizes(self) -> list:
        return [w.shape[1] for w in self.weights[:-1]]

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
            output_bound=None if self.output_bound is None else self.output_bound.copy(),
        )

    def arrays(self) -> list:
        """All parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


@dataclass
class MlpGrads:
    weights: list
    biases: list

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays())))

    def scale(self, factor: float) -> "MlpGrads":
        return MlpGrads([w * factor for w in self.weights], [b * factor for b in self.biases])


@dataclass
class DropoutSpec:
    p_drop: float = 0.0
    mode: str = 'off'

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {self.p_drop}", field="training.dropout")
        if self.mode not in DROPOUT_MODES:
            raise ConfigError(f"unknown dropout mode '{self.mode}'")

    @property
    def active(self) -> bool:
        return self.mode != 'off' and self.p_drop > 0.0


DROPOUT_OFF = DropoutSpec()


@dataclass
class AdamState:
    m_w: list
    m_b: list
    v_w: list
    v_b: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    lr_decay: float = 0.99
    epoch: int = 0

    @classmethod
    def for_params(cls, params: MlpParams, lr=1e-3, lr_decay=0.99, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        zeros_w = [np.zeros_like(w) for w in params.weights]
        zeros_b = [np.zeros_like(b) for b in params.biases]
        return cls(m_w=zeros_w, m_b=zeros_b,
                   v_w=[z.copy() for z in zeros_w], v_b=[z.copy() for z in zeros_b],
                   beta1=beta1, beta2=beta2, eps=eps, lr=lr, lr_decay=lr_decay)

    @property
    def current_lr(self) -> float:
        # lr at epoch k is lr * decay^k
        return self.lr * self.lr_decay ** self.epoch


def init_mlp(sizes, rng: Rng, hidden_activation='relu', output_activation='identity', output_bound=None) -> MlpParams:
    """
    Glorot-uniform weights, zero biases.
    sizes = [input_dim, hidden..., output_dim]
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ConfigError(f"invalid layer sizes {sizes}")
    weights, biases, acts = [], [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        acts.append(output_activation if i == len(sizes) - 2 else hidden_activation)
    return MlpParams(weights, biases, acts, output_bound=output_bound)


def _activate(z, act):
    if act == 'relu':
        return np.maximum(z, 0.0)
    if act == 'tanh':
        return np.tanh(z)
    return z


def _activation_grad(z, a, act):
    if act == 'relu':
        # relu'(0) := 0
        return (z > 0).astype(float)
    if act == 'tanh':
        return 1.0 - a * a
    return np.ones_like(z)


def sample_dropout_masks(params: MlpParams, p_drop: float, rng: Rng) -> list:
    """One fixed set of inverted-dropout masks for the hidden layers (a single thinned network)."""
    keep = 1.0 - p_drop
    return [(rng.random(size) >= p_drop) / keep for size in params.hidden_sizes]


def forward_with_cache(params: MlpParams, x, dropout: DropoutSpec = DROPOUT_OFF, rng: Rng = None, masks=None):
    """
    Forward pass returning (output, cache). The cache holds what `backward`
    needs, including the dropout masks drawn here.
    `masks` (from sample_dropout_masks) pins the hidden-unit masks instead of drawing them.
    """
    xb, single = as_batch(x)
    if xb.shape[1] != params.input_dim:
        raise ConfigError(f"network expects input dim {params.input_dim}, got {xb.shape[1]}")
    use_dropout = masks is not None or dropout.active
    if use_dropout and masks is None and rng is None:
        raise ConfigError("dropout in train/mc_inference mode needs an rng")

    last = len(params.weights) - 1
    a = xb
    cache = {'inputs': [], 'pre': [], 'post': [], 'masks': [], 'single': single}
    for i, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        cache['inputs'].append(a)
        z = a @ w + b
        a = _activate(z, act)
        cache['pre'].append(z)
        cache['post'].append(a)
        mask = None
        if i < last and use_dropout:
            if masks is not None:
                mask = masks[i]
            else:
                mask = (rng.random(a.shape) >= dropout.p_drop) / (1.0 - dropout.p_drop)
            a = a * mask
        cache['masks'].append(mask)
    out = a[0] if single else a
    return out, cache


def forward(params: MlpParams, x, dropout: DropoutSpec = DROPOUT_OFF, rng: Rng = None, masks=None):
    return forward_with_cache(params, x, dropout, rng, masks)[0]


def backward(params: MlpParams, x, upstream_grad, cache=None):
    """
    Reverse-mode gradients of the scalar loss whose gradient w.r.t. the network
    output is `upstream_grad`. Pass the cache of the paired forward pass to reuse
    its dropout masks; without one the deterministic (dropout off) pass is used.
    Returns (MlpGrads, input_grad).
    """
    if cache is None:
        _, cache = forward_with_cache(params, x)
    g, _ = as_batch(upstream_grad)
    if g.shape[1] != params.output_dim:
        raise ConfigError(f"upstream grad has dim {g.shape[1]}, network output dim is {params.output_dim}")

    n_layers = len(params.weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    for i in reversed(range(n_layers)):
        if cache['masks'][i] is not None:
            g = g * cache['masks'][i]
        gz = g * _activation_grad(cache['pre'][i], cache['post'][i], params.activations[i])
        grads_w[i] = cache['inputs'][i].T @ gz
        grads_b[i] = gz.sum(axis=0)
        g = gz @ params.weights[i].T
    input_grad = g[0] if cache['single'] else g
    return MlpGrads(grads_w, grads_b), input_grad


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState, batch_index=None):
    """
    One bias-corrected Adam update, in place. Returns (params, state).
    """
    for arr in grads.arrays():
        if not np.all(np.isfinite(arr)):
            raise TrainingError("non-finite gradient", epoch=state.epoch, batch=batch_index)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    lr = state.current_lr

    for p_list, g_list, m_list, v_list in (
        (params.weights, grads.weights, state.m_w, state.v_w),
        (params.biases, grads.biases, state.m_b, state.v_b),
    ):
        for p, g, m, v in zip(p_list, g_list, m_list, v_list):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def bound_output(y, bound):
    """
    bound * tanh(y / bound), elementwise. Slope 1 at the origin and
    |out| strictly below bound for every finite input.
    """
    y = np.asarray(y, dtype=float)
    bound = np.asarray(bound, dtype=float)
    if np.any(bound <= 0):
        raise ConfigError("output bound entries must be positive")
    out = bound * np.tanh(y / bound)
    # tanh rounds to exactly 1.0 for large arguments
    ceiling = np.nextafter(bound, 0.0)
    return np.clip(out, -ceiling, ceiling)


def bound_output_grad(y, bound):
    """d bound_output / dy, elementwise."""
    t = np.tanh(np.asarray(y, dtype=float) / np.asarray(bound, dtype=float))
    return 1.0 - t * t


# --- checkpoints ---

class _CheckpointDumper(yaml.SafeDumper):
    pass


def _represent_float(dumper, value):
    text = f"{value:.17g}"
    if '.' not in text and 'inf' not in text and 'nan' not in text:
        mantissa, sep, exponent = text.partition('e')
        text = mantissa + '.0' + (sep + exponent if sep else '')
    return dumper.represent_scalar('tag:yaml.org,2002:float', text)


_CheckpointDumper.add_representer(float, _represent_float)


def params_to_document(params: MlpParams) -> dict:
    return {
        'schema': CHECKPOINT_SCHEMA,
        'input_dim': params.input_dim,
        'output_dim': params.output_dim,
        'activations': list(params.activations),
        'output_bound': None if params.output_bound is None else params.output_bound.tolist(),
        'layers': [{'weight': w.tolist(), 'bias': b.tolist()} for w, b in zip(params.weights, params.biases)],
    }


def params_from_document(doc) -> MlpParams:
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint is not a mapping")
    if doc.get('schema') != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported schema tag {doc.get('schema')!r}", position="schema")
    for key in ('input_dim', 'output_dim', 'activations', 'layers'):
        if key not in doc:
            raise CheckpointError(f"missing field '{key}'", position=key)
    layers = doc['layers']
    if not isinstance(layers, list) or len(layers) != len(doc['activations']):
        raise CheckpointError("layer count does not match activation count", position="layers")

    weights, biases = [], []
    for i, layer in enumerate(layers):
        try:
            w = np.array(layer['weight'], dtype=float)
            b = np.array(layer['bias'], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"unreadable layer: {e}", position=f"layers[{i}]")
        if w.ndim != 2:
            raise CheckpointError(f"weight is not a matrix (shape {w.shape})", position=f"layers[{i}].weight")
        weights.append(w)
        biases.append(b)

    if weights[0].shape[0] != doc['input_dim']:
        raise CheckpointError(f"declared input_dim {doc['input_dim']} but first layer takes {weights[0].shape[0]}",
                              position="input_dim")
    if weights[-1].shape[1] != doc['output_dim']:
        raise CheckpointError(f"declared output_dim {doc['output_dim']} but last layer gives {weights[-1].shape[1]}",
                              position="output_dim")
    try:
        return MlpParams(weights, biases, list(doc['activations']), output_bound=doc.get('output_bound'))
    except ConfigError as e:
        raise CheckpointError(str(e), position="layers")


def save_checkpoint(params: MlpParams, path):
    with open(path, 'w') as f:
        yaml.dump(params_to_document(params), f, Dumper=_CheckpointDumper,
                  default_flow_style=None, sort_keys=False, width=120)


def load_checkpoint(path) -> MlpParams:
    with open(path, 'r') as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            mark = getattr(e, 'problem_mark', None)
            pos = f"line {mark.line + 1}, column {mark.column + 1}" if mark is not None else None
            raise CheckpointError(f"malformed checkpoint {path}: {getattr(e, 'problem', e)}", position=pos)
    return params_from_document(doc)

from dataclasses import dataclass, field, fields, replace
import os

import numpy as np
import yaml

from .errors import ConfigError
from .evaluation import IterativeSettings, RoaThresholds
from .neuralnet import DROPOUT_OFF, DropoutSpec
from .plants import PlantSpec, make_plant
from .stability import StabilityConfig
from .training import TrainConfig

CONFIG_SCHEMA = 'nic-experiment/1'
PLANT_KINDS = ('pendulum', 'cartpole', 'vehicle')


def _fail(path, message):
    raise ConfigError(message, field=path)


def _number(value, path, positive=False, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, f"expected a number, got {value!r}")
    if positive and not value > 0:
        _fail(path, f"must be positive, got {value}")
    return float(value)


def _integer(value, path, minimum=None, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        _fail(path, f"must be >= {minimum}, got {value}")
    return int(value)


def _flag(value, path):
    if not isinstance(value, bool):
        _fail(path, f"expected true/false, got {value!r}")
    return value


def _numbers(value, path, length=None, allow_none=False):
    if value is None and allow_none:
        return None
    if not isinstance(value, list) or not value:
        _fail(path, f"expected a non-empty list of numbers, got {value!r}")
    out = [_number(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if length is not None and len(out) != length:
        _fail(path, f"expected {length} entries, got {len(out)}")
    return out


def _mapping(raw, path, cls):
    """Reject non-mappings and keys the section does not define."""
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        _fail(path, f"expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            _fail(f"{path}.{key}", "unknown key")
    return raw


@dataclass
class PlantSection:
    kind: str = 'pendulum'
    links: int = 1
    params: dict = field(default_factory=dict)
    domain: dict = None
    input_bound: float = None

    @classmethod
    def parse(cls, raw, path='plant'):
        raw = _mapping(raw, path, cls)
        kind = raw.get('kind', 'pendulum')
        if kind not in PLANT_KINDS:
            _fail(f"{path}.kind", f"must be one of {PLANT_KINDS}, got {kind!r}")
        params = raw.get('params') or {}
        if not isinstance(params, dict):
            _fail(f"{path}.params", "expected a mapping")
        for k, v in params.items():
            if isinstance(v, list):
                _numbers(v, f"{path}.params.{k}")
            else:
                _number(v, f"{path}.params.{k}")
        domain = raw.get('domain')
        if domain is not None:
            if not isinstance(domain, dict) or set(domain) != {'lo', 'hi'}:
                _fail(f"{path}.domain", "expected a mapping with keys lo and hi")
            domain = {'lo': _numbers(domain['lo'], f"{path}.domain.lo"),
                      'hi': _numbers(domain['hi'], f"{path}.domain.hi")}
        return cls(
            kind=kind,
            links=_integer(raw.get('links', 1), f"{path}.links", minimum=1),
            params=params,
            domain=domain,
            input_bound=_number(raw.get('input_bound'), f"{path}.input_bound", positive=True, allow_none=True),
        )


@dataclass
class StabilitySection:
    q_diag: list = None
    alpha: float = 0.5
    eps_grad: float = 1e-12
    rows: int = None

    @classmethod
    def parse(cls, raw, path='stability'):
        raw = _mapping(raw, path, cls)
        if 'q_diag' not in raw:
            _fail(f"{path}.q_diag", "required")
        return cls(
            q_diag=_numbers(raw['q_diag'], f"{path}.q_diag"),
            alpha=_number(raw.get('alpha', 0.5), f"{path}.alpha", positive=True),
            eps_grad=_number(raw.get('eps_grad', 1e-12), f"{path}.eps_grad", positive=True),
            rows=_integer(raw.get('rows'), f"{path}.rows", minimum=1, allow_none=True),
        )


@dataclass
class NetworkSection:
    hidden: list = field(default_factory=lambda: [64, 64, 64])

    @classmethod
    def parse(cls, raw, path='network'):
        raw = _mapping(raw, path, cls)
        hidden = raw.get('hidden', [64, 64, 64])
        if not isinstance(hidden, list) or not hidden:
            _fail(f"{path}.hidden", "expected a non-empty list of layer widths")
        return cls([_integer(h, f"{path}.hidden[{i}]", minimum=1) for i, h in enumerate(hidden)])


@dataclass
class TrainingSection:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.99
    clip_norm: float = 100.0
    dropout: float = 0.0

    @classmethod
    def parse(cls, raw, path='training'):
        raw = _mapping(raw, path, cls)
        d = cls()
        section = cls(
            epochs=_integer(raw.get('epochs', d.epochs), f"{path}.epochs", minimum=1),
            batch_size=_integer(raw.get('batch_size', d.batch_size), f"{path}.batch_size", minimum=1),
            lr=_number(raw.get('lr', d.lr), f"{path}.lr", positive=True),
            lr_decay=_number(raw.get('lr_decay', d.lr_decay), f"{path}.lr_decay", positive=True),
            clip_norm=_number(raw.get('clip_norm', d.clip_norm), f"{path}.clip_norm", positive=True),
            dropout=_number(raw.get('dropout', d.dropout), f"{path}.dropout"),
        )
        if section.lr_decay > 1:
            _fail(f"{path}.lr_decay", f"must lie in (0, 1], got {section.lr_decay}")
        if not 0 <= section.dropout < 1:
            _fail(f"{path}.dropout", f"must lie in [0, 1), got {section.dropout}")
        return section


@dataclass
class DataSection:
    n_train: int = 10_000
    n_val: int = 5_000
    include_zero_input: bool = False

    @classmethod
    def parse(cls, raw, path='data'):
        raw = _mapping(raw, path, cls)
        d = cls()
        return cls(
            n_train=_integer(raw.get('n_train', d.n_train), f"{path}.n_train", minimum=1),
            n_val=_integer(raw.get('n_val', d.n_val), f"{path}.n_val", minimum=1),
            include_zero_input=_flag(raw.get('include_zero_input', d.include_zero_input),
                                     f"{path}.include_zero_input"),
        )


@dataclass
class RoaSection:
    n_samples: int = 500
    horizon: float = 20.0
    step: float = 0.01
    energy_fraction: float = 0.5
    final_radius_fraction: float = 0.05
    min_fraction: float = 0.05
    domain_scale: float = 1.5
    slice: list = field(default_factory=lambda: [0, 1])
    grid: int = 41
    eval_bound_scale: float = 1.0

    @classmethod
    def parse(cls, raw, path='roa'):
        raw = _mapping(raw, path, cls)
        d = cls()
        dims = raw.get('slice', d.slice)
        if not isinstance(dims, list) or len(dims) != 2:
            _fail(f"{path}.slice", "expected two state indices")
        dims = [_integer(v, f"{path}.slice[{i}]", minimum=0) for i, v in enumerate(dims)]
        if dims[0] == dims[1]:
            _fail(f"{path}.slice", "the two slice coordinates must differ")
        section = cls(
            n_samples=_integer(raw.get('n_samples', d.n_samples), f"{path}.n_samples", minimum=1),
            horizon=_number(raw.get('horizon', d.horizon), f"{path}.horizon", positive=True),
            step=_number(raw.get('step', d.step), f"{path}.step", positive=True),
            energy_fraction=_number(raw.get('energy_fraction', d.energy_fraction),
                                    f"{path}.energy_fraction", positive=True),
            final_radius_fraction=_number(raw.get('final_radius_fraction', d.final_radius_fraction),
                                          f"{path}.final_radius_fraction", positive=True),
            min_fraction=_number(raw.get('min_fraction', d.min_fraction), f"{path}.min_fraction"),
            domain_scale=_number(raw.get('domain_scale', d.domain_scale), f"{path}.domain_scale", positive=True),
            slice=dims,
            grid=_integer(raw.get('grid', d.grid), f"{path}.grid", minimum=2),
            eval_bound_scale=_number(raw.get('eval_bound_scale', d.eval_bound_scale),
                                     f"{path}.eval_bound_scale", positive=True),
        )
        if not 0 <= section.min_fraction <= 1:
            _fail(f"{path}.min_fraction", f"must lie in [0, 1], got {section.min_fraction}")
        if section.eval_bound_scale > 1:
            _fail(f"{path}.eval_bound_scale", f"must lie in (0, 1], got {section.eval_bound_scale}")
        return section


@dataclass
class LqrSection:
    q_diag: list = None
    r_diag: list = None
    h_disc: float = 0.01

    @classmethod
    def parse(cls, raw, path='lqr'):
        raw = _mapping(raw, path, cls)
        return cls(
            q_diag=_numbers(raw.get('q_diag'), f"{path}.q_diag", allow_none=True),
            r_diag=_numbers(raw.get('r_diag'), f"{path}.r_diag", allow_none=True),
            h_disc=_number(raw.get('h_disc', 0.01), f"{path}.h_disc", positive=True),
        )


@dataclass
class McDropoutSection:
    n_mc: int = 50
    grid: int = 21
    radius_scale: float = 1.0

    @classmethod
    def parse(cls, raw, path='mc_dropout'):
        raw = _mapping(raw, path, cls)
        d = cls()
        return cls(
            n_mc=_integer(raw.get('n_mc', d.n_mc), f"{path}.n_mc", minimum=1),
            grid=_integer(raw.get('grid', d.grid), f"{path}.grid", minimum=2),
            radius_scale=_number(raw.get('radius_scale', d.radius_scale), f"{path}.radius_scale", positive=True),
        )


@dataclass
class IterateSection:
    rounds: int = 2
    initial_scale: float = 1.0
    shrink: float = 0.1

    @classmethod
    def parse(cls, raw, path='iterate'):
        raw = _mapping(raw, path, cls)
        d = cls()
        section = cls(
            rounds=_integer(raw.get('rounds', d.rounds), f"{path}.rounds", minimum=1),
            initial_scale=_number(raw.get('initial_scale', d.initial_scale), f"{path}.initial_scale", positive=True),
            shrink=_number(raw.get('shrink', d.shrink), f"{path}.shrink"),
        )
        if not 0 <= section.shrink < 0.5:
            _fail(f"{path}.shrink", f"must lie in [0, 0.5), got {section.shrink}")
        return section


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    output_dir: str
    plant: PlantSection
    stability: StabilitySection
    network: NetworkSection
    training: TrainingSection
    data: DataSection
    roa: RoaSection
    lqr: LqrSection
    mc_dropout: McDropoutSection
    iterate: IterateSection
    schema: str = CONFIG_SCHEMA

    def with_overrides(self, seed=None, rounds=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            if seed < 0 or seed >= 2**64:
                _fail('seed', f"must be a 64-bit unsigned integer, got {seed}")
            cfg = replace(cfg, seed=int(seed))
        if rounds is not None:
            if rounds < 1:
                _fail('iterate.rounds', f"must be >= 1, got {rounds}")
            cfg = replace(cfg, iterate=replace(cfg.iterate, rounds=int(rounds)))
        return cfg


_SECTIONS = {
    'plant': PlantSection,
    'stability': StabilitySection,
    'network': NetworkSection,
    'training': TrainingSection,
    'data': DataSection,
    'roa': RoaSection,
    'lqr': LqrSection,
    'mc_dropout': McDropoutSection,
    'iterate': IterateSection,
}
_TOP_LEVEL = {'schema', 'name', 'seed', 'output_dir', *_SECTIONS}


def parse_config(doc) -> ExperimentConfig:
    if not isinstance(doc, dict):
        _fail('schema', "config document must be a mapping")
    for key in doc:
        if key not in _TOP_LEVEL:
            _fail(key, "unknown key")
    if doc.get('schema') != CONFIG_SCHEMA:
        _fail('schema', f"expected '{CONFIG_SCHEMA}', got {doc.get('schema')!r}")
    if 'stability' not in doc:
        _fail('stability', "required")

    name = doc.get('name', 'experiment')
    if not isinstance(name, str) or not name:
        _fail('name', "expected a non-empty string")
    output_dir = doc.get('output_dir', os.path.join('results', name))
    if not isinstance(output_dir, str):
        _fail('output_dir', "expected a path string")
    seed = _integer(doc.get('seed', 0), 'seed', minimum=0)

    sections = {key: cls.parse(doc.get(key), key) for key, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(name=name, seed=seed, output_dir=output_dir, **sections)
    _check_dimensions(cfg)
    return cfg


def _check_dimensions(cfg: ExperimentConfig):
    plant = build_plant(cfg)
    n, m = plant.n, plant.m
    if len(cfg.stability.q_diag) != n:
        _fail('stability.q_diag', f"expected {n} entries for {plant.name}, got {len(cfg.stability.q_diag)}")
    build_stability(cfg)
    if max(cfg.roa.slice) >= n:
        _fail('roa.slice', f"state index out of range for n={n}")
    if cfg.lqr.q_diag is not None and len(cfg.lqr.q_diag) != n:
        _fail('lqr.q_diag', f"expected {n} entries")
    if cfg.lqr.r_diag is not None and len(cfg.lqr.r_diag) != m:
        _fail('lqr.r_diag', f"expected {m} entries")


def load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, 'r') as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"unparseable YAML: {e}")
    return parse_config(doc)


# --- builders ---

def build_plant(cfg: ExperimentConfig) -> PlantSpec:
    p = cfg.plant
    domain = None
    if p.domain is not None:
        domain = (np.asarray(p.domain['lo']), np.asarray(p.domain['hi']))
    try:
        return make_plant(p.kind, p.links, p.params, domain, p.input_bound)
    except ConfigError as e:
        if e.field is None:
            raise ConfigError(str(e), field='plant.domain')
        raise


def evaluation_plant(cfg: ExperimentConfig, plant: PlantSpec = None) -> PlantSpec:
    """Training plant over the ROA domain, with the evaluation-time actuation bound."""
    plant = build_plant(cfg) if plant is None else plant
    return plant.scaled(cfg.roa.domain_scale).with_input_bound(plant.input_bound * cfg.roa.eval_bound_scale)


def build_stability(cfg: ExperimentConfig) -> StabilityConfig:
    s = cfg.stability
    return StabilityConfig.diagonal(s.q_diag, s.alpha, s.eps_grad, s.rows)


def build_train_config(cfg: ExperimentConfig, plant: PlantSpec = None, verbose: bool = False) -> TrainConfig:
    plant = build_plant(cfg) if plant is None else plant
    t = cfg.training
    dropout = DropoutSpec(t.dropout, 'train') if t.dropout > 0 else DROPOUT_OFF
    return TrainConfig(
        stability=build_stability(cfg),
        input_bound=plant.component_bound,
        epochs=t.epochs,
        batch_size=t.batch_size,
        lr=t.lr,
        lr_decay=t.lr_decay,
        seed=cfg.seed,
        dropout=dropout,
        hidden=tuple(cfg.network.hidden),
        clip_norm=t.clip_norm,
        verbose=verbose,
    )


def build_thresholds(cfg: ExperimentConfig) -> RoaThresholds:
    r = cfg.roa
    return RoaThresholds(r.horizon, r.step, r.energy_fraction, r.final_radius_fraction, r.min_fraction)


def build_iterative_settings(cfg: ExperimentConfig, plant: PlantSpec = None, verbose: bool = False) -> IterativeSettings:
    return IterativeSettings(
        train=build_train_config(cfg, plant, verbose),
        thresholds=build_thresholds(cfg),
        n_train=cfg.data.n_train,
        n_val=cfg.data.n_val,
        n_roa=cfg.roa.n_samples,
        shrink=cfg.iterate.shrink,
        include_zero_input=cfg.data.include_zero_input,
    )


def lqr_weights(cfg: ExperimentConfig, plant: PlantSpec):
    q = cfg.lqr.q_diag if cfg.lqr.q_diag is not None else [1.0] * plant.n
    r = cfg.lqr.r_diag if cfg.lqr.r_diag is not None else [1.0] * plant.m
    return np.diag(q), np.diag(r)


def load_experiment_list(path="config.yml") -> list:
    """Config paths listed (and enabled) in the batch orchestrator's root config."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r") as f:
        doc = yaml.safe_load(f) or {}
    entries = doc.get('experiments', [])
    base = os.path.dirname(os.path.abspath(path))
    return [os.path.join(base, e['config']) for e in entries if e.get('enabled', True)]

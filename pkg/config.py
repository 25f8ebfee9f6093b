"""
Configuration management for the V2M engine.

This module handles run configuration: documented defaults, the JSON
config file, environment overrides (optionally from a .env file) and
command-line overrides, in that order of increasing precedence.
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from numerics import ConfigError


load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    """Process-level settings read from the environment."""

    LOG_LEVEL = os.environ.get('V2M_LOG_LEVEL', 'INFO').upper()
    LOG_MAX_BYTES = 1024 * 1024
    LOG_BACKUP_COUNT = 5
    LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'

    @staticmethod
    def fault_injection() -> Optional[str]:
        """
        Active fault hook, read at call time so tests can toggle it.

        Returns:
            Hook name (e.g. 'scan_sign') or None
        """
        return os.environ.get('V2M_FAULT_INJECT') or None


# Environment variables that override file settings, with the key they set
ENV_OVERRIDES = {
    'V2M_SEED': 'seed',
    'V2M_WORKERS': 'workers',
    'V2M_PRECISION': 'precision',
}

DIRECTION_CODES = ('UL', 'LL', 'LR', 'UR')
PIPELINE_NAMES = ('horizontal', 'vertical')
CLS_SCHEMES = ('mean', 'edge', 'center')

# Named model sizes; a preset sets these keys unless a source gives them explicitly
MODEL_PRESETS = {
    'tiny': {'dim': 32, 'depth': 4, 'state_size': 8},
    'small': {'dim': 64, 'depth': 6, 'state_size': 16},
    'base': {'dim': 96, 'depth': 8, 'state_size': 16},
}


def preset_settings(name: str) -> Dict[str, Any]:
    """Settings of a named model size."""
    try:
        return dict(MODEL_PRESETS[name])
    except (KeyError, TypeError):
        raise ConfigError(f"unknown preset {name!r}, expected one of {', '.join(MODEL_PRESETS)}")


class RunConfig:
    """Resolved settings for one CLI command."""

    DEFAULT_SETTINGS = {
        # run
        'seed': 0,                      # Master seed (unsigned 64-bit)
        'precision': 'f32',             # Training precision: f32 or f64
        'out_dir': 'runs/default',      # Artifact directory
        'workers': 1,                   # Lane workers for the scans
        'scan_impl': 'sequential',      # Scan used inside the model: sequential or parallel
        'recompute': False,             # Regenerate hidden states during backward
        # model
        'preset': '',                   # Size preset: tiny, small or base (explicit keys win)
        'image_size': 16,               # Input side in pixels
        'patch_size': 4,                # Patch side in pixels
        'channels': 1,                  # Input channels
        'dim': 32,                      # Token channels D
        'state_size': 8,                # SSM state size N
        'depth': 4,                     # Number of V2M blocks K
        'mlp_ratio': 4,                 # MLP hidden width / D
        'num_classes': 4,               # Classifier outputs
        'cls_scheme': 'center',         # Class token scheme: mean, edge or center
        'directions': ['UL', 'LL', 'LR', 'UR'],  # Scan origins in use
        'pipelines': ['horizontal', 'vertical'],  # 2D SSM pipelines in use
        'mixer': '2d',                  # Token mixer: 2d or flatten
        # data
        'data': 'synthetic',            # Data source: synthetic or idx
        'images': '',                   # IDX training images path
        'labels': '',                   # IDX training labels path
        'test_images': '',              # IDX held-out images path (optional)
        'test_labels': '',              # IDX held-out labels path (optional)
        'holdout_fraction': 0.2,        # Held-out share when no IDX test files are given
        'n_train': 2000,                # Synthetic training samples
        'n_test': 500,                  # Synthetic held-out samples
        'blob_size': 4,                 # Blob side in pixels
        'blob_value': 1.0,              # Blob intensity
        'noise_std': 0.1,               # Background noise std
        'distractors': 8,               # Isolated bright pixels per image
        'augment_flip': False,          # Random horizontal flip during training
        'prefetch': 2,                  # Batches the loader may run ahead
        # optimizer
        'epochs': 20,
        'batch_size': 64,
        'lr': 1e-3,                     # Peak learning rate
        'min_lr': 0.0,                  # Cosine floor
        'warmup_epochs': 1,
        'weight_decay': 0.05,
        'beta1': 0.9,
        'beta2': 0.999,
        'eps': 1e-8,
        'seeds': [],                    # Extra seeds for the ablation harness
        # check
        'suites': ['scan', 'roesser', 'grad', 'equivariance', 'roundtrip'],
        'scan_configs': 10000,          # Random configurations in the scan suite
        'max_len': 512,                 # Longest sequence in the scan suite
        'roesser_draws': 100,
        'equivariance_draws': 100,
        'grad_step': 1e-4,
        # bench
        'bench_lengths': [256, 1024, 4096, 16384],
        'bench_workers': ['1', '4', 'max'],
        'bench_repeats': 5,
        'bench_lanes': 256,             # Independent (G, D, N) lanes per benchmark input
    }

    def __init__(self, settings: Optional[Dict[str, Any]] = None):
        """
        Initialize with defaults merged with the given settings.

        Args:
            settings: overrides; unknown keys raise ConfigError
        """
        self.settings = dict(self.DEFAULT_SETTINGS)
        if settings:
            self.update(settings)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
             environ: Optional[Dict[str, str]] = None) -> 'RunConfig':
        """
        Resolve defaults, config file, environment and flag overrides.

        A size preset named by any source is applied right after the
        defaults, so keys given explicitly anywhere still win over it.

        Args:
            path: JSON config file, or None for defaults only
            overrides: command-line values (highest precedence)
            environ: environment mapping, os.environ when None

        Returns:
            Validated RunConfig
        """
        layers = []
        if path:
            try:
                with open(path, 'r') as f:
                    loaded = json.load(f)
            except OSError as e:
                raise ConfigError(f"cannot read config file {path}: {e}")
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}")
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")
            layers.append(loaded)
            logger.info(f"Loaded {len(loaded)} settings from {path}")

        environ = os.environ if environ is None else environ
        layers.append({key: cls._parse_env(key, environ[var])
                       for var, key in ENV_OVERRIDES.items() if environ.get(var)})
        if overrides:
            layers.append({k: v for k, v in overrides.items() if v is not None})

        config = cls()
        preset = next((layer['preset'] for layer in reversed(layers) if layer.get('preset')), '')
        if preset:
            config.update(preset_settings(preset))
        for layer in layers:
            config.update(layer)
        config.validate()
        return config

    @classmethod
    def _parse_env(cls, key: str, raw: str) -> Any:
        default = cls.DEFAULT_SETTINGS[key]
        try:
            return type(default)(raw)
        except ValueError:
            raise ConfigError(f"environment value '{raw}' is not valid for '{key}'")

    def update(self, updates: Dict[str, Any]):
        """Merge settings, rejecting unknown keys and mistyped values."""
        unknown = sorted(set(updates) - set(self.DEFAULT_SETTINGS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in updates.items():
            default = self.DEFAULT_SETTINGS[key]
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
                value = float(value) if ok else value
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, type(default))
            if not ok:
                raise ConfigError(f"'{key}' must be {type(default).__name__}, got {value!r}")
            self.settings[key] = list(value) if isinstance(value, list) else value

    def get(self, key: str, default=None):
        """Get a setting."""
        return self.settings.get(key, default)

    def __getitem__(self, key: str):
        return self.settings[key]

    def validate(self):
        """Check value ranges and cross-field constraints."""
        s = self.settings
        if not 0 <= s['seed'] < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {s['seed']}")
        if s['precision'] not in ('f32', 'f64'):
            raise ConfigError(f"precision must be f32 or f64, got {s['precision']}")
        if s['scan_impl'] not in ('sequential', 'parallel'):
            raise ConfigError(f"scan_impl must be sequential or parallel, got {s['scan_impl']}")
        if s['cls_scheme'] not in CLS_SCHEMES:
            raise ConfigError(f"cls_scheme must be one of {CLS_SCHEMES}, got {s['cls_scheme']}")
        if s['mixer'] not in ('2d', 'flatten'):
            raise ConfigError(f"mixer must be 2d or flatten, got {s['mixer']}")
        if s['data'] not in ('synthetic', 'idx'):
            raise ConfigError(f"data must be synthetic or idx, got {s['data']}")
        if s['workers'] < 1:
            raise ConfigError("workers must be >= 1")
        parse_directions(s['directions'])
        parse_pipelines(s['pipelines'])
        for key in ('image_size', 'patch_size', 'channels', 'dim', 'state_size',
                    'mlp_ratio', 'num_classes', 'batch_size', 'prefetch', 'bench_repeats',
                    'bench_lanes'):
            if s[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {s[key]}")
        for key in ('depth', 'epochs', 'warmup_epochs', 'n_train', 'n_test',
                    'scan_configs', 'roesser_draws', 'equivariance_draws', 'distractors'):
            if s[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {s[key]}")
        if s['image_size'] % s['patch_size']:
            raise ConfigError(f"image_size {s['image_size']} not divisible by patch_size {s['patch_size']}")
        if not 0.0 < s['holdout_fraction'] < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        if s['lr'] < 0 or s['weight_decay'] < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if s['grad_step'] <= 0:
            raise ConfigError("grad_step must be > 0")
        if s['max_len'] < 1:
            raise ConfigError("max_len must be >= 1")
        unknown = sorted(set(s['suites']) - {'scan', 'roesser', 'grad', 'equivariance', 'roundtrip'})
        if unknown:
            raise ConfigError(f"unknown suites: {', '.join(unknown)}")
        if s['preset']:
            preset_settings(s['preset'])
        if not s['bench_lengths']:
            raise ConfigError("bench_lengths must not be empty")
        for length in s['bench_lengths']:
            if isinstance(length, bool) or not isinstance(length, int) or length < 1:
                raise ConfigError(f"bench_lengths entries must be integers >= 1, got {length!r}")
        if not s['bench_workers']:
            raise ConfigError("bench_workers must not be empty")
        for w in s['bench_workers']:
            if w == 'max' or (not isinstance(w, bool) and str(w).isdigit() and int(w) >= 1):
                continue
            raise ConfigError(f"bench_workers entries must be 'max' or integers >= 1, got {w!r}")

    def echo(self) -> str:
        """Canonical JSON of the resolved settings."""
        return json.dumps(self.settings, indent=2, sort_keys=True) + '\n'

    def save(self, path: str):
        """Write the config echo file."""
        with open(path, 'w') as f:
            f.write(self.echo())

    def to_model_config(self):
        """ModelConfig for the model module."""
        from model import ModelConfig
        s = self.settings
        return ModelConfig(
            image_size=s['image_size'],
            patch_size=s['patch_size'],
            channels=s['channels'],
            dim=s['dim'],
            state_size=s['state_size'],
            depth=s['depth'],
            mlp_ratio=s['mlp_ratio'],
            num_classes=s['num_classes'],
            cls_scheme=s['cls_scheme'],
            directions=parse_directions(s['directions']),
            pipelines=parse_pipelines(s['pipelines']),
            mixer=s['mixer'],
            precision=s['precision'],
            scan_impl=s['scan_impl'],
            workers=s['workers'],
            recompute=s['recompute'],
        )

    def to_task_spec(self):
        """LocalityTaskSpec for the synthetic data source."""
        from data import LocalityTaskSpec
        s = self.settings
        return LocalityTaskSpec(
            image_size=s['image_size'],
            channels=s['channels'],
            num_classes=s['num_classes'],
            blob_size=s['blob_size'],
            blob_value=s['blob_value'],
            noise_std=s['noise_std'],
            distractors=s['distractors'],
            seed=s['seed'],
            n_train=s['n_train'],
            n_test=s['n_test'],
        )

    def to_optim_hparams(self):
        """AdamWHParams for the optimizer."""
        from optim import AdamWHParams
        s = self.settings
        return AdamWHParams(
            lr=s['lr'],
            min_lr=s['min_lr'],
            beta1=s['beta1'],
            beta2=s['beta2'],
            eps=s['eps'],
            weight_decay=s['weight_decay'],
        )


def parse_directions(codes) -> Tuple[int, ...]:
    """
    Map direction codes to rotation indices, in rotation order.

    Args:
        codes: list or comma string of UL, LL, LR, UR

    Returns:
        Sorted tuple of indices in 0..3
    """
    if isinstance(codes, str):
        codes = [c for c in codes.split(',') if c]
    indices = set()
    for code in codes:
        code = code.strip().upper()
        if code == 'LF':
            code = 'LL'
        if code not in DIRECTION_CODES:
            raise ConfigError(f"unknown direction '{code}', expected a subset of {DIRECTION_CODES}")
        indices.add(DIRECTION_CODES.index(code))
    if not indices:
        raise ConfigError("at least one direction is required")
    return tuple(sorted(indices))


def parse_pipelines(names) -> Tuple[str, ...]:
    """Validate and order a pipeline subset."""
    if isinstance(names, str):
        names = [n for n in names.split(',') if n]
    names = [n.strip().lower() for n in names]
    unknown = [n for n in names if n not in PIPELINE_NAMES]
    if unknown or not names:
        raise ConfigError(f"pipelines must be a non-empty subset of {PIPELINE_NAMES}, got {names}")
    return tuple(n for n in PIPELINE_NAMES if n in names)


def split_list(raw: str) -> List[str]:
    """Split a comma-separated flag value."""
    return [part.strip() for part in raw.split(',') if part.strip()]

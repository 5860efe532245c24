from __future__ import annotations

import copy
import json
import os
from typing import Any, Optional

from .benchmark import BenchmarkConfig
from .constraints import ConstraintSet
from .denoiser import TrainingConfig
from .errors import ConfigError, TscpsError
from .logging_config import logger
from .projection import ProjectionConfig
from .sampler import METHODS, SamplerConfig
from .schedule import PenaltySchedule, Schedule

GLOBAL_KEYS = ('seed', 'output_dir', 'threads', 'show_progress')
SECTIONS = ('data', 'schedule', 'denoiser', 'training', 'constraints', 'sampler', 'projection',
            'metrics', 'analysis', 'benchmark')
RESOLVED_CONFIG_NAME = 'resolved_config.json'


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig:
    """
    The settings of one run: global keys (``seed``, ``output_dir``, ``threads``, ``show_progress``) and one section per pipeline stage, stored as a JSON document.

    Every key has a packaged default (:data:`DEFAULT_CONFIG_FILE`); files and overrides may only set known keys. Sections that map onto a settings class (``schedule``, ``training``, ``sampler``, ``projection``, ``benchmark``) are turned into it by the builder methods.

    :ivar settings: The resolved key-value tree.
    :vartype settings: dict[str, Any]

    **Examples**

    .. code-block:: python

        import tscps

        config = tscps.RunConfig()
        config.override('sampler.method', 'ddim')
        config.override('schedule.steps', '50')
        print(config.tree())
    """

    settings: dict[str, Any]

    def __init__(self, settings_file: Optional[str] = None, settings: Optional[dict[str, Any]] = None,
                 defaults: Optional[dict[str, Any]] = None) -> None:
        """
        :param settings_file: JSON file merged over the defaults.
        :type settings_file: Optional[str], optional
        :param settings: Key-value tree merged after the file.
        :type settings: Optional[dict[str, Any]], optional
        :param defaults: Base tree; the packaged defaults when ``None``.
        :type defaults: Optional[dict[str, Any]], optional
        :raises ConfigError: For unknown keys or invalid values.
        """
        if defaults is None:
            with open(DEFAULT_CONFIG_FILE, 'r') as file:
                defaults = json.load(file)
        self.settings = copy.deepcopy(defaults)
        if settings_file is not None:
            self.load_settings(settings_file)
        if settings is not None:
            self.parse_settings(settings)
        self.validate_configuration()

    def load_settings(self, settings_file: str) -> None:
        """
        Merge a JSON file into the configuration.

        :raises ConfigError: If the file cannot be read or holds unknown keys.
        """
        try:
            with open(settings_file, 'r') as file:
                settings = json.load(file)
        except (OSError, json.JSONDecodeError) as error:
            raise ConfigError(f"Cannot read config file '{settings_file}': {error}") from error
        self.parse_settings(settings)

    def parse_settings(self, settings: dict[str, Any]) -> None:
        """
        Merge a key-value tree; nested mappings are merged key by key.

        :raises ConfigError: If a section or key is unknown.
        """
        if not isinstance(settings, dict):
            raise ConfigError("A run config must be a JSON object")
        for key, value in settings.items():
            self._merge(self.settings, key, value, key)

    def _merge(self, target: dict[str, Any], key: str, value: Any, path: str) -> None:
        if key not in target:
            known = ', '.join(target)
            raise ConfigError(f"Unknown config key '{path}'. Known keys here are: {known}.")
        if isinstance(target[key], dict) and isinstance(value, dict):
            for sub_key, sub_value in value.items():
                self._merge(target[key], sub_key, sub_value, f"{path}.{sub_key}")
        else:
            target[key] = value

    def override(self, dotted_key: str, value: Any) -> None:
        """
        Set one key, e.g. ``override('sampler.penalty.rule', 'none')``. String values are decoded as JSON when possible, so ``'50'`` becomes ``50`` and ``'null'`` becomes ``None``.

        :raises ConfigError: If the key is unknown.
        """
        if isinstance(value, str):
            value = _parse_value(value)
        head, *rest = dotted_key.split('.')
        tree: Any = value
        for part in reversed(rest):
            tree = {part: tree}
        self._merge(self.settings, head, tree, dotted_key)
        logger.debug(f"Config override {dotted_key} = {value!r}")

    def validate_configuration(self) -> None:
        """
        Build every settings object once to check the values.

        :raises ConfigError: For any invalid value; errors of the settings classes are re-raised as :class:`ConfigError`.
        """
        for key in GLOBAL_KEYS:
            if key not in self.settings:
                raise ConfigError(f"Missing global key '{key}'")
        if unknown := [key for key in self.settings if key not in GLOBAL_KEYS + SECTIONS]:
            raise ConfigError(f"Unknown config section(s): {', '.join(unknown)}")
        if self.settings['threads'] is not None and int(self.settings['threads']) < 1:
            raise ConfigError("threads must be at least 1 (or null for one per CPU)")
        if self['sampler']['method'] not in METHODS:
            raise ConfigError(f"Unknown method '{self['sampler']['method']}'. Valid methods are: {', '.join(METHODS)}.")
        if self['denoiser']['type'] not in ('learned', 'gaussian'):
            raise ConfigError(f"denoiser.type must be 'learned' or 'gaussian', got '{self['denoiser']['type']}'")
        try:
            self.schedule()
            self.training_config()
            self.sampler_config()
            self.benchmark_config()
        except ConfigError:
            raise
        except (TscpsError, TypeError, ValueError) as error:
            raise ConfigError(f"Invalid configuration: {error}") from error

    def schedule(self) -> Schedule:
        return Schedule.from_dict(self['schedule'])

    def training_config(self) -> TrainingConfig:
        settings = {key: value for key, value in self['training'].items() if key != 'resume'}
        return TrainingConfig.from_dict(settings)

    def projection_config(self) -> ProjectionConfig:
        return ProjectionConfig.from_dict(self['projection'])

    def sampler_config(self) -> SamplerConfig:
        sampler = self['sampler']
        return SamplerConfig(
            eta=float(sampler['eta']),
            seed=int(self.settings['seed']),
            projection=self.projection_config(),
            penalty=PenaltySchedule.from_dict(sampler['penalty']),
            guidance_weight=float(sampler['guidance_weight'] or 0.0),
            trace=bool(sampler['trace']),
            cop_gamma=sampler['cop_gamma'],
            chunk_size=int(sampler['chunk_size']),
            threads=self.threads(),
            show_progress=bool(self.settings['show_progress']),
        )

    def threads(self) -> int:
        """
        Worker thread count; ``null`` means one per CPU.
        """
        return int(self.settings['threads'] or os.cpu_count() or 1)

    def benchmark_config(self) -> BenchmarkConfig:
        settings = dict(self['benchmark'])
        settings['kinds'] = self['constraints']['kinds']
        return BenchmarkConfig.from_dict(settings)

    def constraint_set(self) -> ConstraintSet | None:
        """
        The constraint set named by ``constraints.file``, if any; ``constraints.budget`` replaces its budget.
        """
        path = self['constraints']['file']
        if path is None:
            return None
        constraint_set = ConstraintSet(settings_file=path)
        constraint_set.budget = float(self['constraints']['budget'])
        return constraint_set

    def output_path(self, name: str) -> str:
        """
        ``name`` inside the output directory; absolute names are returned unchanged.
        """
        return name if os.path.isabs(name) else os.path.join(self.settings['output_dir'], name)

    def to_dict(self) -> dict[str, Any]:
        return copy.deepcopy(self.settings)

    def save_as_json(self, filename: str) -> None:
        with open(filename, 'w') as file:
            json.dump(self.to_dict(), file, indent=4)

    def tree(self, depth: int = 0) -> str:
        """
        Indented ``key: value`` listing of the configuration.
        """
        def walk(node: dict[str, Any], level: int) -> str:
            text = ''
            for key, value in node.items():
                if isinstance(value, dict):
                    text += "  " * level + f"{key}:\n" + walk(value, level + 1)
                else:
                    text += "  " * level + f"{key}: {value!r}\n"
            return text

        return "  " * depth + "RunConfig:\n" + walk(self.settings, depth + 1)

    def __getitem__(self, section: str) -> Any:
        return self.settings[section]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RunConfig):
            return NotImplemented
        return self.settings == other.settings

    def __repr__(self) -> str:
        return f"RunConfig(seed={self.settings['seed']}, output_dir={self.settings['output_dir']!r})"

    def __str__(self) -> str:
        return self.tree()


DEFAULT_CONFIG_FILE = os.path.join(os.path.dirname(__file__), 'default_config.json')
"""
Path to the packaged defaults of every run config key.
:type: str
"""

DEFAULT_RUN_CONFIG = RunConfig()
"""
The run configuration with every key at its default.
:type: RunConfig
"""

"""
Constraint descriptors, the violation function and compilation of affine constraints to matrix form.

Samples are ``(K, L)`` arrays; when flattened, entry ``(k, u)`` sits at column ``k * L + u``. Timestamps are 0-based in memory and 1-based in constraint files.

Every constraint is evaluated as a small set of *rows*, each carrying a residual ``r`` and a style:

* inequality rows require ``r <= threshold`` and contribute ``max(0, r - threshold)``;
* equality rows require ``|r| <= threshold`` and contribute ``max(0, |r| - threshold)``;
* squared rows (``affine_equality``) contribute ``r ** 2``.

The violation of a set is the sum of all row contributions.
"""
from __future__ import annotations

import json
from typing import Any, Iterator, NamedTuple, Sequence

import numpy as np
import scipy.sparse
from scipy.signal import find_peaks

from .errors import ConstraintError, ShapeMismatchError, UnsupportedCompilationError
from .logging_config import logger

INEQUALITY = 0
EQUALITY = 1
SQUARED = 2
ROW_KIND_NAMES = {INEQUALITY: 'inequality', EQUALITY: 'equality', SQUARED: 'squared'}

DEFAULT_EQUALITY_THRESHOLD = 0.005
DEFAULT_BUDGET = 0.01


class ConstraintRows(NamedTuple):
    """
    Residuals of one constraint at one sample, with the style and threshold of every row.
    """
    values: np.ndarray
    kinds: np.ndarray
    thresholds: np.ndarray


def stack_rows(*parts: ConstraintRows) -> ConstraintRows:
    return ConstraintRows(np.concatenate([p.values for p in parts]),
                          np.concatenate([p.kinds for p in parts]),
                          np.concatenate([p.thresholds for p in parts]))


def row_penalty(values: np.ndarray, kinds: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """
    Contribution of each row to the violation function.
    """
    values = np.asarray(values, dtype=float)
    result = np.maximum(values - thresholds, 0.0)
    equality = kinds == EQUALITY
    result[equality] = np.maximum(np.abs(values[equality]) - thresholds[equality], 0.0)
    squared = kinds == SQUARED
    result[squared] = values[squared] ** 2
    return result


def row_excess(values: np.ndarray, kinds: np.ndarray) -> np.ndarray:
    """
    Raw violation of each row, ignoring thresholds: ``max(0, r)`` for inequality rows and ``|r|`` otherwise.
    """
    values = np.asarray(values, dtype=float)
    return np.where(kinds == INEQUALITY, np.maximum(values, 0.0), np.abs(values))


def row_weights(values: np.ndarray, kinds: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """
    Derivative of each row contribution with respect to its residual. Inactive rows, including rows exactly at the kink, get 0.
    """
    values = np.asarray(values, dtype=float)
    weights = (values - thresholds > 0.0).astype(float)
    equality = kinds == EQUALITY
    weights[equality] = np.sign(values[equality]) * (np.abs(values[equality]) - thresholds[equality] > 0.0)
    squared = kinds == SQUARED
    weights[squared] = 2.0 * values[squared]
    return weights


def flat_index(channel: int, u: Any, L: int) -> Any:
    return channel * L + np.asarray(u)


def sparse_rows(row_ids: Sequence[int], columns: Sequence[int], data: Sequence[float],
                m: int, n: int) -> scipy.sparse.csr_matrix:
    return scipy.sparse.csr_matrix(
        (np.asarray(data, dtype=float), (np.asarray(row_ids, dtype=int), np.asarray(columns, dtype=int))),
        shape=(m, n))


class Constraint:
    """
    Base class of all constraint kinds.

    Subclasses set the class attributes below, implement :meth:`residuals` (computed directly from the sample) and, when the kind is affine, :meth:`affine_rows` (the same residuals written as ``A z - b``).

    :param channel: Channel the constraint applies to.
    :type channel: int, optional
    :param threshold: Slack of the constraint's equality rows (or of its inequality rows for pure bound kinds). Defaults to the kind's ``default_threshold``.
    :type threshold: float | None, optional
    :param params: Kind-specific parameters; timestamps are 0-based.

    :cvar kind: Registry name.
    :cvar default_threshold: Threshold used when none is given.
    :cvar required_params: Parameters that must be supplied.
    :cvar optional_params: Parameters with their defaults.
    :cvar index_params: Parameters holding timestamps (shifted to 1-based in files).
    :raises ConstraintError: For missing or unknown parameters and negative thresholds.
    """
    kind: str = ''
    default_threshold: float = 0.0
    required_params: tuple[str, ...] = ()
    optional_params: dict[str, Any] = {}
    index_params: tuple[str, ...] = ()

    def __init__(self, channel: int = 0, threshold: float | None = None, **params: Any) -> None:
        if missing := [p for p in self.required_params if p not in params]:
            raise ConstraintError(
                f"Constraint '{self.kind}' is missing parameter(s): {', '.join(missing)}")
        known = set(self.required_params) | set(self.optional_params)
        if unknown := sorted(set(params) - known):
            raise ConstraintError(
                f"Constraint '{self.kind}' got unknown parameter(s): {', '.join(unknown)}")
        self.channel: int = int(channel)
        self.threshold: float = self.default_threshold if threshold is None else float(threshold)
        if not self.threshold >= 0.0:
            raise ConstraintError(
                f"Threshold of '{self.kind}' must be nonnegative, got {threshold}")
        self.params: dict[str, Any] = {**self.optional_params, **params}
        self._compiled: dict[tuple[int, int], tuple] = {}
        self._setup()

    def _setup(self) -> None:
        pass

    @property
    def is_affine(self) -> bool:
        return True

    def validate(self, K: int, L: int) -> None:
        """
        Check that the channel and every timestamp fit a ``(K, L)`` sample.

        :raises ConstraintError: If something is out of range.
        """
        if not 0 <= self.channel < K:
            raise ConstraintError(
                f"Constraint '{self.kind}' references channel {self.channel}, sample has {K}")
        for name in self.index_params:
            value = self.params.get(name)
            if value is not None and not 0 <= int(value) < L:
                raise ConstraintError(
                    f"Constraint '{self.kind}': {name}={int(value) + 1} is outside 1..{L}")
        self._validate(K, L)

    def _validate(self, K: int, L: int) -> None:
        pass

    def _equality(self, values: Any, threshold: float | None = None) -> ConstraintRows:
        values = np.atleast_1d(np.asarray(values, dtype=float))
        threshold = self.threshold if threshold is None else threshold
        return ConstraintRows(values, np.full(values.size, EQUALITY), np.full(values.size, threshold))

    def _inequality(self, values: Any, threshold: float | None = None) -> ConstraintRows:
        values = np.atleast_1d(np.asarray(values, dtype=float))
        threshold = self.threshold if threshold is None else threshold
        return ConstraintRows(values, np.full(values.size, INEQUALITY), np.full(values.size, threshold))

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        raise NotImplementedError

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        """
        The residuals as ``A @ z.reshape(-1) - b``.

        :raises UnsupportedCompilationError: If the kind (with these parameters) is not affine.
        """
        raise UnsupportedCompilationError(self.kind, "no affine form is defined")

    def compiled(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray, np.ndarray, np.ndarray]:
        """
        ``(A, b, row kinds, thresholds)`` for a ``(K, L)`` sample, cached per shape.
        """
        if (K, L) not in self._compiled:
            A, b = self.affine_rows(K, L)
            layout = self.residuals(np.zeros((K, L)))
            self._compiled[(K, L)] = (A, np.asarray(b, dtype=float), layout.kinds, layout.thresholds)
        return self._compiled[(K, L)]

    def penalty(self, z: np.ndarray) -> float:
        rows = self.residuals(np.asarray(z, dtype=float))
        return float(np.sum(row_penalty(*rows)))

    def raw_violation(self, z: np.ndarray) -> float:
        rows = self.residuals(np.asarray(z, dtype=float))
        return float(np.sum(row_excess(rows.values, rows.kinds)))

    def gradient(self, z: np.ndarray) -> np.ndarray:
        """
        A subgradient of :meth:`penalty` (0 on the inactive side of every kink).
        """
        z = np.asarray(z, dtype=float)
        A, b, kinds, thresholds = self.compiled(*z.shape)
        weights = row_weights(A @ z.reshape(-1) - b, kinds, thresholds)
        return (A.T @ weights).reshape(z.shape)

    def fixed_values(self) -> list[tuple[int, int, float]]:
        """
        ``(channel, timestamp, value)`` triples this constraint pins.
        """
        return []

    def to_dict(self) -> dict[str, Any]:
        params = {}
        for name, value in self.params.items():
            if isinstance(value, np.ndarray):
                value = value.tolist()
            if name in self.index_params and value is not None:
                value = int(value) + 1
            params[name] = value
        return {'kind': self.kind, 'channel': self.channel, 'params': params,
                'threshold': self.threshold}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Constraint):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        params = ', '.join(f"{k}={v!r}" for k, v in self.to_dict()['params'].items())
        return f"{type(self).__name__}(channel={self.channel}, {params}, threshold={self.threshold})"


class AvailableConstraints:
    """
    Registry of constraint kinds, keyed by their ``kind`` name.

    :cvar constraints: Mapping of kind names to constraint classes.
    :vartype constraints: dict[str, type[Constraint]]
    """
    constraints: dict[str, type[Constraint]] = {}

    @classmethod
    def register_constraint(cls, constraint_cls: type[Constraint]) -> type[Constraint]:
        """
        Class decorator adding a kind to the registry.

        :raises ConstraintError: If the kind name is already registered.
        """
        name = constraint_cls.kind
        if not name:
            raise ConstraintError(f"{constraint_cls.__name__} does not define a kind")
        if name in cls.constraints:
            raise ConstraintError(f"Constraint kind '{name}' is already defined.")
        cls.constraints[name] = constraint_cls
        return constraint_cls

    @classmethod
    def get(cls, kind: str) -> type[Constraint]:
        if kind not in cls.constraints:
            raise ConstraintError(
                f"Unknown constraint kind '{kind}'. Valid kinds are: {', '.join(cls.kinds())}.")
        return cls.constraints[kind]

    @classmethod
    def kinds(cls) -> list[str]:
        return sorted(cls.constraints)


def constraint_from_dict(settings: dict[str, Any]) -> Constraint:
    """
    Build a constraint from its file form (``kind``, ``channel``, ``params``, ``threshold``; timestamps 1-based).

    :raises ConstraintError: For unknown kinds or keys and for timestamps below 1.
    """
    if unknown := set(settings) - {'kind', 'channel', 'params', 'threshold', 'comment'}:
        raise ConstraintError(f"Unknown constraint keys: {', '.join(sorted(unknown))}")
    if 'kind' not in settings:
        raise ConstraintError("Constraint entry has no 'kind'")
    constraint_cls = AvailableConstraints.get(settings['kind'])
    params = dict(settings.get('params', {}))
    for name in constraint_cls.index_params:
        if params.get(name) is not None:
            if int(params[name]) < 1:
                raise ConstraintError(
                    f"Constraint '{settings['kind']}': timestamps in files are 1-based, got {name}={params[name]}")
            params[name] = int(params[name]) - 1
    return constraint_cls(channel=settings.get('channel', 0), threshold=settings.get('threshold'), **params)


class ConstraintSet:
    """
    Named, ordered collection of constraints with an evaluation budget, stored as JSON.

    The file format holds ``budget``, ``order`` and one entry per name listed in ``order``:

    .. code-block:: json

        {
            "budget": 0.01,
            "order": ["level", "start"],
            "level": {"kind": "mean", "channel": 0, "params": {"target": 0.0}, "threshold": 0.005},
            "start": {"kind": "value_at_timestamp", "channel": 0, "params": {"index": 1, "value": 0.3}}
        }

    :param settings_file: JSON file to load.
    :type settings_file: str | None, optional
    :param items: Constraints by name.
    :type items: dict[str, Constraint] | None, optional
    :param order: Names in evaluation order.
    :type order: list[str] | None, optional
    :param budget: Allowable violation per constraint at evaluation time.
    :type budget: float, optional
    :raises ConstraintError: If only one of ``items`` and ``order`` is given, names are inconsistent or the budget is negative.
    """

    def __init__(self, settings_file: str | None = None, items: dict[str, Constraint] | None = None,
                 order: list[str] | None = None, budget: float = DEFAULT_BUDGET) -> None:
        self.budget: float = float(budget)
        if items is None and order is None:
            self.items: dict[str, Constraint] = {}
            self.order: list[str] = []
            if settings_file is not None:
                self.load_settings(settings_file)
        elif items is not None and order is not None:
            self.items = dict(items)
            self.order = list(order)
        else:
            raise ConstraintError("Both 'items' and 'order' must be provided, or neither.")
        self.validate_configuration()

    @classmethod
    def from_list(cls, constraints: Sequence[Constraint], budget: float = DEFAULT_BUDGET) -> ConstraintSet:
        """
        Name the constraints ``<kind>_<n>`` in the given order.
        """
        items, order = {}, []
        for number, constraint in enumerate(constraints, start=1):
            name = f"{constraint.kind}_{number}"
            items[name] = constraint
            order.append(name)
        return cls(items=items, order=order, budget=budget)

    def add_constraint(self, name: str, constraint: Constraint, rewrite: bool = False) -> None:
        if name in self.items and not rewrite:
            raise ConstraintError(f"Constraint with name '{name}' already exists.")
        self.items[name] = constraint
        if name not in self.order:
            self.order.append(name)

    @property
    def constraints(self) -> list[Constraint]:
        return [self.items[name] for name in self.order]

    def head(self, count: int) -> ConstraintSet:
        """
        The first ``count`` constraints, same budget.
        """
        order = self.order[:count]
        return ConstraintSet(items={name: self.items[name] for name in order}, order=order,
                             budget=self.budget)

    @property
    def is_affine(self) -> bool:
        return all(c.is_affine for c in self.constraints)

    def validate_configuration(self) -> None:
        """
        :raises ConstraintError: If a name in ``order`` has no constraint or the budget is negative.
        """
        if not self.budget >= 0.0:
            raise ConstraintError(f"Budget must be nonnegative, got {self.budget}")
        for name in self.order:
            if name not in self.items:
                raise ConstraintError(
                    f"Constraint '{name}' listed in 'order' but not found in 'items'.")
        for name in self.items:
            if name not in self.order:
                logger.warning(f"Constraint '{name}' found in 'items' but not listed in 'order'.")

    def validate_shape(self, K: int, L: int) -> None:
        for constraint in self.constraints:
            constraint.validate(K, L)

    def load_settings(self, settings_file: str) -> None:
        with open(settings_file, 'r') as file:
            self.parse_settings(json.load(file))

    def parse_settings(self, settings: dict[str, Any]) -> None:
        self.budget = float(settings.get('budget', DEFAULT_BUDGET))
        self.order = list(settings.get('order', []))
        self.items = {}
        for name in self.order:
            if name not in settings:
                raise ConstraintError(f"Constraint '{name}' listed in 'order' has no entry")
            self.items[name] = constraint_from_dict(settings[name])
        self.validate_configuration()

    def to_dict(self) -> dict[str, Any]:
        result: dict[str, Any] = {'budget': self.budget, 'order': list(self.order)}
        for name in self.order:
            result[name] = self.items[name].to_dict()
        return result

    def save_as_json(self, filename: str) -> None:
        with open(filename, 'w') as file:
            json.dump(self.to_dict(), file, indent=4)

    def fixed_values(self) -> list[tuple[int, int, float]]:
        return [triple for c in self.constraints for triple in c.fixed_values()]

    def tree(self, depth: int = 0) -> str:
        result = "  " * depth + f"ConstraintSet (budget {self.budget}):\n"
        for name in self.order:
            result += "  " * (depth + 1) + f"{name}: {self.items[name]!r}\n"
        return result

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConstraintSet):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self) -> Iterator[Constraint]:
        return iter(self.constraints)

    def __repr__(self) -> str:
        return f"ConstraintSet(budget={self.budget}, order={self.order})"

    def __str__(self) -> str:
        return self.tree()


class AffineSystem:
    """
    Compiled rows ``A z - b`` of a constraint set, each with its style and threshold.

    :param A: ``m x n`` matrix (any format :func:`scipy.sparse.csr_matrix` accepts).
    :param b: Right-hand side, ``m`` entries.
    :param row_kind: Style per row (``INEQUALITY``, ``EQUALITY`` or ``SQUARED``); defaults to ``SQUARED``.
    :param thresholds: Threshold per row; defaults to 0.
    :param owners: Index of the constraint each row came from.
    :raises ConstraintError: If there are no rows, the sizes disagree or an entry is not finite.
    """

    def __init__(self, A: Any, b: Any, row_kind: Any = None, thresholds: Any = None,
                 owners: Any = None) -> None:
        A = scipy.sparse.csr_matrix(A, dtype=float)
        b = np.asarray(b, dtype=float).reshape(-1)
        m = A.shape[0]
        if m < 1:
            raise ConstraintError("An affine system needs at least one row")
        if b.size != m:
            raise ConstraintError(f"b has {b.size} entries, A has {m} rows")
        if not (np.all(np.isfinite(A.data)) and np.all(np.isfinite(b))):
            raise ConstraintError("Affine system entries must be finite")
        self.A: scipy.sparse.csr_matrix = A
        self.b: np.ndarray = b
        self.row_kind: np.ndarray = (np.full(m, SQUARED) if row_kind is None
                                     else np.asarray(row_kind, dtype=int).reshape(-1))
        self.thresholds: np.ndarray = (np.zeros(m) if thresholds is None
                                       else np.asarray(thresholds, dtype=float).reshape(-1))
        self.owners: np.ndarray = (np.zeros(m, dtype=int) if owners is None
                                   else np.asarray(owners, dtype=int).reshape(-1))
        if self.row_kind.size != m or self.thresholds.size != m or self.owners.size != m:
            raise ConstraintError("Row kinds, thresholds and owners need one entry per row")

    @classmethod
    def equality(cls, A: Any, y: Any) -> AffineSystem:
        """
        ``Az = y`` with the quadratic penalty ``||Az - y||^2``.
        """
        return cls(A, y)

    @classmethod
    def inequality(cls, A: Any, b: Any) -> AffineSystem:
        A = scipy.sparse.csr_matrix(A, dtype=float)
        return cls(A, b, row_kind=np.full(A.shape[0], INEQUALITY))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def equality_only(self) -> bool:
        return not np.any(self.row_kind == INEQUALITY)

    @property
    def squared_only(self) -> bool:
        return bool(np.all(self.row_kind == SQUARED))

    def residual(self, z: Any) -> np.ndarray:
        return self.A @ np.asarray(z, dtype=float).reshape(-1) - self.b

    def row_penalties(self, z: Any) -> np.ndarray:
        return row_penalty(self.residual(z), self.row_kind, self.thresholds)

    def penalty(self, z: Any) -> float:
        return float(np.sum(self.row_penalties(z)))

    def gradient(self, z: Any) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        weights = row_weights(self.residual(z), self.row_kind, self.thresholds)
        return (self.A.T @ weights).reshape(z.shape)

    def to_dense(self) -> np.ndarray:
        return self.A.toarray()

    def __repr__(self) -> str:
        counts = {ROW_KIND_NAMES[k]: int(np.sum(self.row_kind == k)) for k in ROW_KIND_NAMES}
        return f"AffineSystem(m={self.m}, n={self.n}, rows={counts})"


def _check_sample(z: Any, constraint_set: ConstraintSet) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim != 2:
        raise ShapeMismatchError(f"Expected a (K, L) sample, got shape {z.shape}")
    constraint_set.validate_shape(*z.shape)
    return z


def violation(z: Any, constraint_set: ConstraintSet) -> float:
    """
    Total violation of ``z``: the sum of every constraint row's contribution. Zero exactly when every row is within its threshold.

    :param z: A ``(K, L)`` sample.
    :param constraint_set: The constraints.
    :rtype: float
    :raises ShapeMismatchError: If ``z`` is not 2-D.
    :raises ConstraintError: If a constraint does not fit the sample shape.
    """
    z = _check_sample(z, constraint_set)
    return float(sum(c.penalty(z) for c in constraint_set))


def per_constraint_violation(z: Any, constraint_set: ConstraintSet, budget: float | None = None) -> np.ndarray:
    """
    Evaluation-time violation per constraint: ``max(0, raw - budget)``, where ``raw`` sums the threshold-free excess of the constraint's rows.

    :param budget: Allowable violation; defaults to the set's budget.
    :return: One entry per constraint, in order.
    :rtype: numpy.ndarray
    """
    z = _check_sample(z, constraint_set)
    budget = constraint_set.budget if budget is None else budget
    raw = np.array([c.raw_violation(z) for c in constraint_set], dtype=float)
    return np.maximum(raw - budget, 0.0)


def compile_affine(constraint_set: ConstraintSet, K: int, L: int) -> AffineSystem:
    """
    Stack the affine rows of every constraint.

    :raises UnsupportedCompilationError: If a constraint has no affine form; the message names it.
    :raises ConstraintError: If the set is empty.
    """
    if len(constraint_set) == 0:
        raise ConstraintError("Cannot compile an empty constraint set")
    constraint_set.validate_shape(K, L)
    blocks, rhs, kinds, thresholds, owners = [], [], [], [], []
    for index, (name, constraint) in enumerate(zip(constraint_set.order, constraint_set.constraints)):
        try:
            A, b, row_kind, row_thresholds = constraint.compiled(K, L)
        except UnsupportedCompilationError as error:
            raise UnsupportedCompilationError(name, str(error)) from error
        blocks.append(A)
        rhs.append(b)
        kinds.append(row_kind)
        thresholds.append(row_thresholds)
        owners.append(np.full(A.shape[0], index))
    return AffineSystem(scipy.sparse.vstack(blocks, format='csr'), np.concatenate(rhs),
                        row_kind=np.concatenate(kinds), thresholds=np.concatenate(thresholds),
                        owners=np.concatenate(owners))


def violation_gradient(z: Any, constraint_set: ConstraintSet) -> np.ndarray:
    """
    A subgradient of :func:`violation` at ``z``.
    """
    z = _check_sample(z, constraint_set)
    gradient = np.zeros_like(z)
    for constraint in constraint_set:
        gradient += constraint.gradient(z)
    return gradient


def fixed_values(constraint_set: ConstraintSet) -> list[tuple[int, int, float]]:
    return constraint_set.fixed_values()


def default_timestamps(L: int) -> list[int]:
    """
    0-based timestamps at the start, quarters and end of the horizon (1, 24, 48, 72 and 96 in 1-based terms for ``L = 96``).
    """
    marks = [0, round(L / 4) - 1, round(L / 2) - 1, round(3 * L / 4) - 1, L - 1]
    return sorted({min(max(u, 0), L - 1) for u in marks})


DEFAULT_EXTRACTION_KINDS = ('mean', 'value_at_timestamp', 'argmax_location', 'value_at_argmax',
                            'argmin_location', 'value_at_argmin', 'mean_consecutive_change',
                            'peak', 'valley', 'trend_segment')


def extract_constraints(reference: Any, kinds: Sequence[str] = DEFAULT_EXTRACTION_KINDS,
                        channel: int = 0, timestamps: Sequence[int] | None = None,
                        threshold: float | None = None, budget: float = DEFAULT_BUDGET) -> ConstraintSet:
    """
    Build a constraint set that a reference sample satisfies, from features of that sample.

    ``value_at_timestamp`` adds one constraint per timestamp (default :func:`default_timestamps`), ``peak``/``valley`` one per strict local extremum and ``trend_segment`` one per run between consecutive extrema. Argmax and argmin values are pinned at the reference locations, so the whole set compiles to affine rows. ``ohlc`` uses channels 0 to 3 and ignores ``channel``.

    :param reference: A ``(K, L)`` sample.
    :param kinds: Features to extract, in output order.
    :param channel: Channel the features are read from.
    :param timestamps: 0-based timestamps for ``value_at_timestamp``.
    :param threshold: Threshold for the equality-style constraints (kind default if ``None``).
    :param budget: Budget of the returned set.
    :rtype: ConstraintSet
    :raises ConstraintError: For unknown kinds or a channel outside the sample.
    """
    z = np.asarray(reference, dtype=float)
    if z.ndim == 1:
        z = z[np.newaxis, :]
    K, L = z.shape
    if not 0 <= channel < K:
        raise ConstraintError(f"Channel {channel} is outside the reference's {K} channels")
    x = z[channel]
    peaks, _ = find_peaks(x)
    valleys, _ = find_peaks(-x)

    def make(kind: str, **params: Any) -> Constraint:
        return AvailableConstraints.get(kind)(channel=channel, threshold=threshold, **params)

    constraints: list[Constraint] = []
    for kind in kinds:
        if kind == 'mean':
            constraints.append(make('mean', target=float(x.mean())))
        elif kind == 'mean_consecutive_change':
            constraints.append(make('mean_consecutive_change', target=float(np.diff(x).mean())))
        elif kind == 'value_at_timestamp':
            for u in (default_timestamps(L) if timestamps is None else timestamps):
                constraints.append(make('value_at_timestamp', index=int(u), value=float(x[u])))
        elif kind in ('argmax_location', 'argmin_location'):
            location = int(np.argmax(x) if kind == 'argmax_location' else np.argmin(x))
            constraints.append(AvailableConstraints.get(kind)(channel=channel, location=location))
        elif kind in ('value_at_argmax', 'value_at_argmin'):
            location = int(np.argmax(x) if kind == 'value_at_argmax' else np.argmin(x))
            constraints.append(make(kind, value=float(x[location]), location=location))
        elif kind in ('peak', 'valley'):
            for u in (peaks if kind == 'peak' else valleys):
                constraints.append(make(kind, location=int(u), value=float(x[u])))
        elif kind == 'trend_segment':
            extrema = sorted(set(int(u) for u in peaks) | set(int(u) for u in valleys))
            for start, end in zip(extrema[:-1], extrema[1:]):
                direction = 'up' if x[end] > x[start] else 'down'
                constraints.append(AvailableConstraints.get('trend_segment')(
                    channel=channel, start=start, end=end, direction=direction))
        elif kind == 'ohlc':
            constraints.append(AvailableConstraints.get('ohlc')())
        else:
            raise ConstraintError(
                f"Cannot extract '{kind}'. Extractable kinds are: {', '.join(DEFAULT_EXTRACTION_KINDS + ('ohlc',))}.")
    result = ConstraintSet.from_list(constraints, budget=budget)
    result.validate_shape(K, L)
    logger.debug(f"Extracted {len(result)} constraints from a reference sample")
    return result

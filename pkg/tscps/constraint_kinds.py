"""
The registered constraint kinds.

Equality-style kinds (feature values) default to a threshold of 0.005; bound kinds (locations, orderings, trends, affine inequalities) default to 0. Kinds that combine a pinned value with location bounds apply the threshold to the value row only.
"""

import numpy as np
import scipy.sparse

from .constraints import (SQUARED, AvailableConstraints, Constraint, ConstraintRows,
                          DEFAULT_EQUALITY_THRESHOLD, flat_index, sparse_rows, stack_rows)
from .errors import ConstraintError, UnsupportedCompilationError


@AvailableConstraints.register_constraint
class MeanConstraint(Constraint):
    """
    Channel mean equals ``target``: one equality row with entries ``1 / L``.
    """
    kind = 'mean'
    default_threshold = DEFAULT_EQUALITY_THRESHOLD
    required_params = ('target',)

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        return self._equality(z[self.channel].mean() - self.params['target'])

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        columns = flat_index(self.channel, np.arange(L), L)
        A = sparse_rows(np.zeros(L), columns, np.full(L, 1.0 / L), 1, K * L)
        return A, np.array([self.params['target']], dtype=float)


@AvailableConstraints.register_constraint
class MeanConsecutiveChangeConstraint(Constraint):
    """
    Mean of the consecutive differences equals ``target``. The mean telescopes to ``(z[L-1] - z[0]) / (L - 1)``.
    """
    kind = 'mean_consecutive_change'
    default_threshold = DEFAULT_EQUALITY_THRESHOLD
    required_params = ('target',)

    def _validate(self, K: int, L: int) -> None:
        if L < 2:
            raise ConstraintError("mean_consecutive_change needs a horizon of at least 2")

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        return self._equality(np.diff(z[self.channel]).mean() - self.params['target'])

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        columns = flat_index(self.channel, [0, L - 1], L)
        A = sparse_rows([0, 0], columns, [-1.0 / (L - 1), 1.0 / (L - 1)], 1, K * L)
        return A, np.array([self.params['target']], dtype=float)


@AvailableConstraints.register_constraint
class ValueAtTimestampConstraint(Constraint):
    kind = 'value_at_timestamp'
    default_threshold = DEFAULT_EQUALITY_THRESHOLD
    required_params = ('index', 'value')
    index_params = ('index',)

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        return self._equality(z[self.channel, int(self.params['index'])] - self.params['value'])

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        column = flat_index(self.channel, int(self.params['index']), L)
        return sparse_rows([0], [column], [1.0], 1, K * L), np.array([self.params['value']], dtype=float)

    def fixed_values(self) -> list[tuple[int, int, float]]:
        return [(self.channel, int(self.params['index']), float(self.params['value']))]


def _extremum_residuals(x: np.ndarray, location: int, sign: float) -> np.ndarray:
    others = np.delete(np.arange(x.size), location)
    return sign * (x[others] - x[location])


def _extremum_rows(channel: int, location: int, L: int, sign: float,
                   first_row: int = 0) -> tuple[list[int], list[int], list[float]]:
    others = np.delete(np.arange(L), location)
    rows, columns, data = [], [], []
    for offset, u in enumerate(others):
        rows += [first_row + offset, first_row + offset]
        columns += [channel * L + int(u), channel * L + location]
        data += [sign, -sign]
    return rows, columns, data


class _LocationConstraint(Constraint):
    """
    The channel reaches its extremum at ``location``: ``L - 1`` inequality rows. Ties satisfy the constraint.
    """
    required_params = ('location',)
    index_params = ('location',)
    sign = 1.0

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        return self._inequality(_extremum_residuals(z[self.channel], int(self.params['location']), self.sign))

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        rows, columns, data = _extremum_rows(self.channel, int(self.params['location']), L, self.sign)
        return sparse_rows(rows, columns, data, L - 1, K * L), np.zeros(L - 1)


@AvailableConstraints.register_constraint
class ArgmaxLocationConstraint(_LocationConstraint):
    kind = 'argmax_location'
    sign = 1.0


@AvailableConstraints.register_constraint
class ArgminLocationConstraint(_LocationConstraint):
    kind = 'argmin_location'
    sign = -1.0


class _ExtremumValueConstraint(Constraint):
    """
    The channel's extremum equals ``value``.

    With ``location`` the constraint is the equality ``z[location] = value`` plus the location rows, and is affine. Without it the extremum is taken wherever it falls, which has no affine form.
    """
    default_threshold = DEFAULT_EQUALITY_THRESHOLD
    required_params = ('value',)
    optional_params = {'location': None}
    index_params = ('location',)
    sign = 1.0

    @property
    def is_affine(self) -> bool:
        return self.params['location'] is not None

    def _extremum(self, x: np.ndarray) -> int:
        return int(np.argmax(x) if self.sign > 0 else np.argmin(x))

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        x = z[self.channel]
        if self.params['location'] is None:
            return self._equality(x[self._extremum(x)] - self.params['value'])
        location = int(self.params['location'])
        return stack_rows(self._equality(x[location] - self.params['value']),
                          self._inequality(_extremum_residuals(x, location, self.sign), threshold=0.0))

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        if self.params['location'] is None:
            raise UnsupportedCompilationError(
                self.kind, "the extremum location is not fixed; supply 'location'")
        location = int(self.params['location'])
        rows, columns, data = _extremum_rows(self.channel, location, L, self.sign, first_row=1)
        A = sparse_rows([0] + rows, [self.channel * L + location] + columns, [1.0] + data, L, K * L)
        return A, np.concatenate([[self.params['value']], np.zeros(L - 1)])

    def gradient(self, z: np.ndarray) -> np.ndarray:
        if self.params['location'] is not None:
            return super().gradient(z)
        z = np.asarray(z, dtype=float)
        gradient = np.zeros_like(z)
        u = self._extremum(z[self.channel])
        r = z[self.channel, u] - self.params['value']
        if abs(r) - self.threshold > 0.0:
            gradient[self.channel, u] = np.sign(r)
        return gradient

    def fixed_values(self) -> list[tuple[int, int, float]]:
        if self.params['location'] is None:
            return []
        return [(self.channel, int(self.params['location']), float(self.params['value']))]


@AvailableConstraints.register_constraint
class ValueAtArgmaxConstraint(_ExtremumValueConstraint):
    kind = 'value_at_argmax'
    sign = 1.0


@AvailableConstraints.register_constraint
class ValueAtArgminConstraint(_ExtremumValueConstraint):
    kind = 'value_at_argmin'
    sign = -1.0


@AvailableConstraints.register_constraint
class OhlcConstraint(Constraint):
    """
    Open and close lie between low and high at every timestamp: the families ``o - h``, ``c - h``, ``l - o`` and ``l - c`` are all ``<= 0`` (``4 L`` rows). The four channels are parameters; ``channel`` is unused.
    """
    kind = 'ohlc'
    optional_params = {'open': 0, 'high': 1, 'low': 2, 'close': 3}

    def _families(self) -> list[tuple[int, int]]:
        o, h, low, c = (int(self.params[name]) for name in ('open', 'high', 'low', 'close'))
        return [(o, h), (c, h), (low, o), (low, c)]

    def validate(self, K: int, L: int) -> None:
        channels = [int(self.params[name]) for name in ('open', 'high', 'low', 'close')]
        if len(set(channels)) != 4 or not all(0 <= k < K for k in channels):
            raise ConstraintError(
                f"ohlc needs four distinct channels within 0..{K - 1}, got {channels}")

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        return self._inequality(np.concatenate([z[plus] - z[minus] for plus, minus in self._families()]))

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        rows, columns, data = [], [], []
        u = np.arange(L)
        for family, (plus, minus) in enumerate(self._families()):
            rows += [family * L + u, family * L + u]
            columns += [plus * L + u, minus * L + u]
            data += [np.ones(L), -np.ones(L)]
        A = sparse_rows(np.concatenate(rows), np.concatenate(columns), np.concatenate(data), 4 * L, K * L)
        return A, np.zeros(4 * L)


class _LocalExtremumConstraint(Constraint):
    """
    A local extremum at ``location`` with the given ``value``: an equality row on the value and inequality rows against the neighbouring timestamps.
    """
    default_threshold = DEFAULT_EQUALITY_THRESHOLD
    required_params = ('location', 'value')
    index_params = ('location',)
    sign = 1.0

    def _neighbours(self, L: int) -> list[int]:
        location = int(self.params['location'])
        return [u for u in (location - 1, location + 1) if 0 <= u < L]

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        x = z[self.channel]
        location = int(self.params['location'])
        neighbours = self._neighbours(x.size)
        return stack_rows(self._equality(x[location] - self.params['value']),
                          self._inequality(self.sign * (x[neighbours] - x[location]), threshold=0.0))

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        location = self.channel * L + int(self.params['location'])
        neighbours = self._neighbours(L)
        rows, columns, data = [0], [location], [1.0]
        for offset, u in enumerate(neighbours, start=1):
            rows += [offset, offset]
            columns += [self.channel * L + u, location]
            data += [self.sign, -self.sign]
        m = 1 + len(neighbours)
        return sparse_rows(rows, columns, data, m, K * L), np.concatenate([[self.params['value']], np.zeros(m - 1)])

    def fixed_values(self) -> list[tuple[int, int, float]]:
        return [(self.channel, int(self.params['location']), float(self.params['value']))]


@AvailableConstraints.register_constraint
class PeakConstraint(_LocalExtremumConstraint):
    kind = 'peak'
    sign = 1.0


@AvailableConstraints.register_constraint
class ValleyConstraint(_LocalExtremumConstraint):
    kind = 'valley'
    sign = -1.0


@AvailableConstraints.register_constraint
class TrendSegmentConstraint(Constraint):
    """
    The channel is monotone (``direction`` ``'up'`` or ``'down'``) from ``start`` to ``end``: one sign row per consecutive difference.
    """
    kind = 'trend_segment'
    required_params = ('start', 'end')
    optional_params = {'direction': 'up'}
    index_params = ('start', 'end')

    def _setup(self) -> None:
        if self.params['direction'] not in ('up', 'down'):
            raise ConstraintError(
                f"trend_segment direction must be 'up' or 'down', got {self.params['direction']!r}")
        if not int(self.params['start']) < int(self.params['end']):
            raise ConstraintError("trend_segment needs start < end")

    @property
    def _sign(self) -> float:
        return -1.0 if self.params['direction'] == 'up' else 1.0

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        start, end = int(self.params['start']), int(self.params['end'])
        return self._inequality(self._sign * np.diff(z[self.channel, start:end + 1]))

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        start, end = int(self.params['start']), int(self.params['end'])
        m = end - start
        u = np.arange(start, end)
        offsets = np.arange(m)
        rows = np.concatenate([offsets, offsets])
        columns = np.concatenate([self.channel * L + u + 1, self.channel * L + u])
        data = np.concatenate([np.full(m, self._sign), np.full(m, -self._sign)])
        return sparse_rows(rows, columns, data, m, K * L), np.zeros(m)


class _MatrixConstraint(Constraint):
    """
    Rows given explicitly as a matrix ``A`` and a right-hand side. ``A`` acts on the flattened sample when it has ``K * L`` columns and on ``channel`` when it has ``L``.
    """
    rhs_name = 'b'

    def _setup(self) -> None:
        self.matrix: np.ndarray = np.atleast_2d(np.asarray(self.params['A'], dtype=float))
        self.rhs: np.ndarray = np.asarray(self.params[self.rhs_name], dtype=float).reshape(-1)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.rhs.size or self.rhs.size < 1:
            raise ConstraintError(
                f"{self.kind}: A has shape {self.matrix.shape}, {self.rhs_name} has {self.rhs.size} entries")
        if not (np.all(np.isfinite(self.matrix)) and np.all(np.isfinite(self.rhs))):
            raise ConstraintError(f"{self.kind}: entries must be finite")

    def _validate(self, K: int, L: int) -> None:
        if self.matrix.shape[1] not in (L, K * L):
            raise ConstraintError(
                f"{self.kind}: A needs {L} or {K * L} columns, got {self.matrix.shape[1]}")

    def _apply(self, z: np.ndarray) -> np.ndarray:
        if self.matrix.shape[1] == z.size:
            return self.matrix @ z.reshape(-1) - self.rhs
        return self.matrix @ z[self.channel] - self.rhs

    def affine_rows(self, K: int, L: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        if self.matrix.shape[1] == K * L:
            return scipy.sparse.csr_matrix(self.matrix), self.rhs.copy()
        full = np.zeros((self.matrix.shape[0], K * L))
        full[:, self.channel * L:(self.channel + 1) * L] = self.matrix
        return scipy.sparse.csr_matrix(full), self.rhs.copy()


@AvailableConstraints.register_constraint
class AffineInequalityConstraint(_MatrixConstraint):
    kind = 'affine_inequality'
    required_params = ('A', 'b')

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        return self._inequality(self._apply(z))


@AvailableConstraints.register_constraint
class AffineEqualityConstraint(_MatrixConstraint):
    """
    ``A z = y`` enforced through the quadratic penalty ``||A z - y||^2``; takes no threshold.
    """
    kind = 'affine_equality'
    required_params = ('A', 'y')
    rhs_name = 'y'

    def _setup(self) -> None:
        if self.threshold != 0.0:
            raise ConstraintError(
                "affine_equality uses the quadratic penalty ||Az - y||^2 and takes no threshold")
        super()._setup()

    def residuals(self, z: np.ndarray) -> ConstraintRows:
        values = self._apply(z)
        return ConstraintRows(values, np.full(values.size, SQUARED), np.zeros(values.size))

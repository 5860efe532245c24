"""
Diffusion noise coefficients, DDIM control parameters and penalty coefficients.

All per-step arrays of a :class:`Schedule` are indexed by the diffusion step ``t`` directly: ``alpha_bar[t]`` for ``t`` in ``0..T`` and ``beta[t]``, ``sigma[t]`` for ``t`` in ``1..T`` (index 0 of those two holds a placeholder zero).
"""
from __future__ import annotations

import math
from typing import Any

import numpy as np
from typing_extensions import Self

from .errors import ScheduleError
from .logging_config import logger

DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02
DEFAULT_GAMMA_CLIP = 100_000.0


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=float)
    values.setflags(write=False)
    return values


class Schedule:
    """
    Immutable set of diffusion coefficients shared by all samplers.

    :param alpha_bar: Cumulative products ``alpha_bar[0..T]`` with ``alpha_bar[0] = 1``.
    :type alpha_bar: numpy.ndarray
    :param sigma: DDIM control parameters ``sigma[0..T]``; ``sigma[0]`` is ignored and ``sigma[1]`` must be 0.
    :type sigma: numpy.ndarray | None, optional
    :param gamma_clip: Upper bound applied to the exponential penalty coefficients.
    :type gamma_clip: float, optional
    :param eta: The DDIM interpolation coefficient ``sigma`` was built from (kept for serialization).
    :type eta: float, optional
    :param kind: How the schedule was built, ``'linear'``, ``'harness'`` or ``'explicit'``.
    :type kind: str, optional
    :param beta_range: ``(beta_min, beta_max)`` for linear schedules.
    :type beta_range: tuple[float, float] | None, optional

    :ivar T: Number of diffusion steps.
    :vartype T: int
    :ivar beta: Per-step noise rates, ``beta[t] = 1 - alpha_bar[t] / alpha_bar[t-1]``.
    :vartype beta: numpy.ndarray
    :raises ScheduleError: If any of the schedule invariants is violated.
    """

    def __init__(self, alpha_bar: np.ndarray, sigma: np.ndarray | None = None,
                 gamma_clip: float = DEFAULT_GAMMA_CLIP, eta: float = 0.0,
                 kind: str = 'explicit', beta_range: tuple[float, float] | None = None) -> None:
        alpha_bar = np.asarray(alpha_bar, dtype=float)
        if alpha_bar.ndim != 1 or alpha_bar.size < 2:
            raise ScheduleError(
                "alpha_bar must hold at least two entries (alpha_bar[0] and alpha_bar[1])")
        T = alpha_bar.size - 1
        beta = np.zeros(T + 1)
        with np.errstate(divide='ignore', invalid='ignore'):
            beta[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
        if sigma is None:
            sigma = np.zeros(T + 1)

        self.T: int = T
        self.alpha_bar: np.ndarray = _frozen(alpha_bar)
        self.beta: np.ndarray = _frozen(beta)
        self.sigma: np.ndarray = _frozen(sigma)
        self.gamma_clip: float = float(gamma_clip)
        self.eta: float = float(eta)
        self.kind: str = kind
        self.beta_range: tuple[float, float] | None = beta_range
        self.validate_configuration()

    def validate_configuration(self) -> None:
        """
        Check the schedule invariants.

        :raises ScheduleError: If ``alpha_bar[0] != 1``, ``alpha_bar`` leaves ``[0, 1]`` or is not strictly decreasing, ``sigma[1] != 0``, ``sigma`` is negative, the DDIM square root argument ``1 - alpha_bar[t-1] - sigma[t]**2`` is negative, or ``gamma_clip`` is not positive.
        """
        a = self.alpha_bar
        if not np.all(np.isfinite(a)):
            raise ScheduleError("alpha_bar contains non-finite values")
        if a[0] != 1.0:
            raise ScheduleError(f"alpha_bar[0] must be 1, got {a[0]}")
        if np.any(a < 0.0) or np.any(a > 1.0):
            raise ScheduleError("alpha_bar must lie in [0, 1]")
        if np.any(np.diff(a) >= 0.0):
            bad = int(np.argmax(np.diff(a) >= 0.0)) + 1
            raise ScheduleError(
                f"alpha_bar must be strictly decreasing, violated at t={bad}")
        if self.sigma.shape != a.shape:
            raise ScheduleError(
                f"sigma must have {a.size} entries, got {self.sigma.size}")
        if np.any(self.sigma < 0.0) or not np.all(np.isfinite(self.sigma)):
            raise ScheduleError("sigma must be finite and nonnegative")
        if self.sigma[1] != 0.0:
            raise ScheduleError("sigma[1] must be 0: no noise after the final step")
        if np.any(1.0 - a[:-1] - self.sigma[1:] ** 2 < -1e-12):
            raise ScheduleError(
                "1 - alpha_bar[t-1] - sigma[t]^2 must be nonnegative for every t")
        if not self.gamma_clip > 0.0:
            raise ScheduleError(
                f"gamma_clip must be positive, got {self.gamma_clip}")

    def check_step(self, t: int) -> int:
        """
        Validate a diffusion step index.

        :param t: The step, expected in ``1..T``.
        :type t: int
        :return: The step as an ``int``.
        :rtype: int
        :raises ScheduleError: If ``t`` is out of range.
        """
        if not 1 <= int(t) <= self.T:
            raise ScheduleError(f"Step t={t} is outside 1..{self.T}")
        return int(t)

    def ddim_noise_weight(self, t: int) -> float:
        """
        Weight of the noise estimate in the DDIM update, ``sqrt(1 - alpha_bar[t-1] - sigma[t]^2)``.
        """
        value = 1.0 - self.alpha_bar[t - 1] - self.sigma[t] ** 2
        return math.sqrt(max(value, 0.0))

    @classmethod
    def from_alpha_bar(cls, alpha_bar: np.ndarray, gamma_clip: float = DEFAULT_GAMMA_CLIP) -> Self:
        """
        Build a deterministic schedule from an explicit ``alpha_bar`` sequence. A terminal ``alpha_bar[T] = 0`` (so ``beta[T] = 1``) is allowed.
        """
        return cls(alpha_bar=alpha_bar, gamma_clip=gamma_clip, kind='explicit')

    def to_dict(self) -> dict[str, Any]:
        """
        Serialize to the key-value form used in run configs.

        :return: ``kind``, ``steps``, ``eta``, ``gamma_clip`` and either the beta range or the explicit ``alpha_bar``.
        :rtype: dict[str, Any]
        """
        result: dict[str, Any] = {
            'kind': self.kind,
            'steps': self.T,
            'eta': self.eta,
            'gamma_clip': self.gamma_clip,
        }
        if self.kind == 'linear' and self.beta_range is not None:
            result['beta_min'], result['beta_max'] = self.beta_range
        elif self.kind == 'explicit':
            result['alpha_bar'] = self.alpha_bar.tolist()
        return result

    @classmethod
    def from_dict(cls, settings: dict[str, Any]) -> Self:
        """
        Inverse of :meth:`to_dict`.

        :raises ScheduleError: For an unknown ``kind``.
        """
        kind = settings.get('kind', 'linear')
        eta = float(settings.get('eta', 0.0))
        gamma_clip = float(settings.get('gamma_clip', DEFAULT_GAMMA_CLIP))
        if kind == 'linear':
            schedule = linear_schedule(int(settings['steps']),
                                       float(settings.get('beta_min', DEFAULT_BETA_MIN)),
                                       float(settings.get('beta_max', DEFAULT_BETA_MAX)),
                                       gamma_clip=gamma_clip)
        elif kind == 'harness':
            schedule = harness_schedule(int(settings['steps']), gamma_clip=gamma_clip)
        elif kind == 'explicit':
            schedule = cls.from_alpha_bar(settings['alpha_bar'], gamma_clip=gamma_clip)
        else:
            raise ScheduleError(f"Unknown schedule kind '{kind}'")
        return stochastic_sigma(schedule, eta) if eta > 0.0 else schedule

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Schedule):
            return NotImplemented
        return (np.array_equal(self.alpha_bar, other.alpha_bar)
                and np.array_equal(self.sigma, other.sigma)
                and self.gamma_clip == other.gamma_clip)

    def __repr__(self) -> str:
        return (f"Schedule(kind={self.kind!r}, T={self.T}, eta={self.eta}, "
                f"alpha_bar[T]={self.alpha_bar[-1]:.3g}, gamma_clip={self.gamma_clip:g})")


def linear_schedule(T: int, beta_min: float = DEFAULT_BETA_MIN, beta_max: float = DEFAULT_BETA_MAX,
                    gamma_clip: float = DEFAULT_GAMMA_CLIP) -> Schedule:
    """
    Linear beta schedule with deterministic DDIM sampling (``sigma = 0``).

    :param T: Number of diffusion steps, at least 1.
    :type T: int
    :param beta_min: First noise rate, in ``(0, 1)``.
    :type beta_min: float
    :param beta_max: Last noise rate, ``beta_min <= beta_max < 1``.
    :type beta_max: float
    :param gamma_clip: Cap on the penalty coefficients.
    :type gamma_clip: float, optional
    :return: The schedule.
    :rtype: Schedule
    :raises ScheduleError: If ``T < 1`` or the betas are outside ``(0, 1)`` or unordered.

    **Examples**

    .. code-block:: python

        s = linear_schedule(2, 0.1, 0.2)
        s.alpha_bar  # array([1.  , 0.9 , 0.72])
    """
    if int(T) < 1:
        raise ScheduleError(f"T must be at least 1, got {T}")
    if not (0.0 < beta_min < 1.0 and 0.0 < beta_max < 1.0):
        raise ScheduleError(
            f"betas must lie in (0, 1), got beta_min={beta_min}, beta_max={beta_max}")
    if beta_min > beta_max:
        raise ScheduleError(
            f"beta_min={beta_min} must not exceed beta_max={beta_max}")
    betas = np.linspace(beta_min, beta_max, int(T))
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return Schedule(alpha_bar=alpha_bar, gamma_clip=gamma_clip, kind='linear',
                    beta_range=(float(beta_min), float(beta_max)))


def harness_schedule(T: int, gamma_clip: float = DEFAULT_GAMMA_CLIP) -> Schedule:
    """
    Schedule with ``alpha_bar[t] = 1 - t / T``, reaching exactly 0 at ``t = T``, as the convergence analysis requires.
    """
    if int(T) < 1:
        raise ScheduleError(f"T must be at least 1, got {T}")
    alpha_bar = 1.0 - np.arange(int(T) + 1) / int(T)
    alpha_bar[-1] = 0.0
    schedule = Schedule(alpha_bar=alpha_bar, gamma_clip=gamma_clip, kind='harness')
    return schedule


def stochastic_sigma(schedule: Schedule, eta: float) -> Schedule:
    """
    Return a copy of ``schedule`` whose DDIM parameters follow the standard interpolation
    ``sigma[t] = eta * sqrt((1 - alpha_bar[t-1]) / (1 - alpha_bar[t])) * sqrt(1 - alpha_bar[t] / alpha_bar[t-1])``,
    with ``sigma[1]`` forced to 0.

    :param schedule: The base schedule.
    :type schedule: Schedule
    :param eta: Interpolation coefficient in ``[0, 1]``; 0 gives deterministic sampling.
    :type eta: float
    :rtype: Schedule
    :raises ScheduleError: If ``eta`` is outside ``[0, 1]``.
    """
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must lie in [0, 1], got {eta}")
    a = schedule.alpha_bar
    sigma = np.zeros(schedule.T + 1)
    if eta > 0.0:
        ratio = (1.0 - a[:-1]) / (1.0 - a[1:])
        sigma[1:] = eta * np.sqrt(ratio * (1.0 - a[1:] / a[:-1]))
    sigma[1] = 0.0
    sigma[1:] = np.minimum(sigma[1:], np.sqrt(np.maximum(1.0 - a[:-1], 0.0)))
    return Schedule(alpha_bar=a, sigma=sigma, gamma_clip=schedule.gamma_clip, eta=eta,
                    kind=schedule.kind, beta_range=schedule.beta_range)


def penalty_coefficient(t: int, schedule: Schedule) -> float:
    """
    Exponential penalty coefficient ``min(exp(1 / (1 - alpha_bar[t-1])), gamma_clip)``.

    It is small (about ``e``) while ``alpha_bar[t-1]`` is near 0 and saturates at ``gamma_clip`` as ``alpha_bar[t-1]`` approaches 1; at ``t = 1`` (``alpha_bar[0] = 1``) it equals ``gamma_clip``.

    :param t: Step in ``1..T``.
    :type t: int
    :param schedule: The schedule providing ``alpha_bar`` and ``gamma_clip``.
    :type schedule: Schedule
    :rtype: float
    :raises ScheduleError: If ``t`` is out of range.
    """
    t = schedule.check_step(t)
    previous = float(schedule.alpha_bar[t - 1])
    if previous >= 1.0:
        return schedule.gamma_clip
    exponent = 1.0 / (1.0 - previous)
    if exponent >= math.log(schedule.gamma_clip):
        return schedule.gamma_clip
    return min(math.exp(exponent), schedule.gamma_clip)


def theorem2_penalty(t: int, T: int, k: float, lambda_min: float) -> float:
    """
    Linearly growing penalty ``2 k (T - t + 1) / lambda_min`` used by the convergence analysis. No clipping is applied.

    :param t: Step in ``1..T``.
    :param T: Number of steps.
    :param k: Design parameter, strictly greater than 1.
    :param lambda_min: Smallest eigenvalue of ``A^T A``, strictly positive.
    :rtype: float
    :raises ScheduleError: If ``k <= 1``, ``lambda_min <= 0`` or ``t`` is out of range.
    """
    if not k > 1.0:
        raise ScheduleError(f"k must be greater than 1, got {k}")
    if not lambda_min > 0.0:
        raise ScheduleError(f"lambda_min must be positive, got {lambda_min}")
    if not 1 <= t <= T:
        raise ScheduleError(f"Step t={t} is outside 1..{T}")
    return 2.0 * k * (T - t + 1) / lambda_min


def lemma_margins(schedule: Schedule) -> np.ndarray:
    """
    Margins ``1 - sqrt(1 - a[t-1]) sqrt(1 - a[t]) - sqrt(a[t-1]) sqrt(a[t])`` for ``t = 1..T``. They are strictly positive whenever ``alpha_bar`` strictly decreases.

    :rtype: numpy.ndarray
    """
    a = schedule.alpha_bar
    lhs = np.sqrt(a[:-1]) * np.sqrt(a[1:])
    rhs = 1.0 - np.sqrt(1.0 - a[:-1]) * np.sqrt(1.0 - a[1:])
    return rhs - lhs


def lemma_inequality_holds(schedule: Schedule) -> np.ndarray:
    """
    Per-step truth values of ``sqrt(a[t-1]) sqrt(a[t]) < 1 - sqrt(1 - a[t-1]) sqrt(1 - a[t])``.
    """
    return lemma_margins(schedule) > 0.0


class PenaltySchedule:
    """
    Chooses the penalty coefficient ``gamma(t)`` used by the projection step.

    :param rule: ``'exponential'`` (clipped ``exp(1 / (1 - alpha_bar[t-1]))``), ``'theorem2'`` (``2 k (T - t + 1) / lambda_min``), ``'constant'`` (``value`` at every step) or ``'none'`` (0, i.e. no projection).
    :type rule: str
    :param k: Design parameter of the ``'theorem2'`` rule.
    :type k: float | None, optional
    :param lambda_min: ``lambda_min(A^T A)`` for the ``'theorem2'`` rule.
    :type lambda_min: float | None, optional
    :param value: Coefficient of the ``'constant'`` rule.
    :type value: float | None, optional
    :raises ScheduleError: If the rule is unknown or its parameters are missing.
    """
    RULES = ('exponential', 'theorem2', 'constant', 'none')

    def __init__(self, rule: str = 'exponential', k: float | None = None,
                 lambda_min: float | None = None, value: float | None = None) -> None:
        if rule not in self.RULES:
            raise ScheduleError(
                f"Unknown penalty rule '{rule}'. Valid rules are: {', '.join(self.RULES)}.")
        if rule == 'theorem2':
            if k is None or lambda_min is None:
                raise ScheduleError("The 'theorem2' rule needs both k and lambda_min")
            if not k > 1.0:
                raise ScheduleError(f"k must be greater than 1, got {k}")
            if not lambda_min > 0.0:
                raise ScheduleError(f"lambda_min must be positive, got {lambda_min}")
        if rule == 'constant' and (value is None or value < 0.0):
            raise ScheduleError("The 'constant' rule needs a nonnegative value")
        self.rule: str = rule
        self.k: float | None = k
        self.lambda_min: float | None = lambda_min
        self.value: float | None = value

    def __call__(self, t: int, schedule: Schedule) -> float:
        if self.rule == 'exponential':
            return penalty_coefficient(t, schedule)
        if self.rule == 'theorem2':
            return theorem2_penalty(t, schedule.T, self.k, self.lambda_min)
        if self.rule == 'constant':
            return float(self.value)
        return 0.0

    @property
    def enabled(self) -> bool:
        return self.rule != 'none'

    def to_dict(self) -> dict[str, Any]:
        return {'rule': self.rule, 'k': self.k, 'lambda_min': self.lambda_min, 'value': self.value}

    @classmethod
    def from_dict(cls, settings: dict[str, Any]) -> Self:
        return cls(rule=settings.get('rule', 'exponential'), k=settings.get('k'),
                   lambda_min=settings.get('lambda_min'), value=settings.get('value'))

    def __repr__(self) -> str:
        return f"PenaltySchedule({self.to_dict()})"


def describe(schedule: Schedule, penalty: PenaltySchedule | None = None) -> int | None:
    """
    Log a one-line summary of the schedule and of where the penalty reaches the clip.

    :return: The largest step whose penalty is clipped (the clip holds from there down to step 1 for the increasing rules), or ``None``.
    :rtype: int | None
    """
    penalty = penalty or PenaltySchedule()
    clipped = [t for t in range(1, schedule.T + 1)
               if penalty(t, schedule) >= schedule.gamma_clip]
    last_clipped = max(clipped) if clipped else None
    logger.info(f"{schedule!r}; penalty {penalty.rule} clipped for t <= {last_clipped}")
    return last_clipped

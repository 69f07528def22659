"""Per-epoch hyperparameter schedules.

Three policies:

* ``constant``          -- always ``base``.
* ``exponential_step``  -- ``base * factor**(epoch // period_epochs)``.
* ``polynomial``        -- decay (or growth) from ``base`` to ``end`` over
  ``total_epochs`` with exponent ``power``; clamped to ``end`` afterwards.

Values are functions of the epoch only; they are constant within an epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

KINDS = ("constant", "exponential_step", "polynomial")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    base: float
    factor: float | None = None
    period_epochs: int | None = None
    end: float | None = None
    total_epochs: int | None = None
    power: float = 1.0

    def __post_init__(self):
        problems = []
        if self.kind not in KINDS:
            problems.append(f"unknown schedule kind {self.kind!r}, expected one of {KINDS}")
        if not self.base > 0:
            problems.append(f"base must be positive, got {self.base}")
        if self.kind == "exponential_step":
            if self.factor is None or not self.factor > 0:
                problems.append(f"exponential_step requires factor > 0, got {self.factor}")
            if self.period_epochs is None or self.period_epochs < 1:
                problems.append(
                    f"exponential_step requires period_epochs >= 1, got {self.period_epochs}"
                )
        if self.kind == "polynomial":
            if self.end is None or not self.end > 0:
                problems.append(f"polynomial requires end > 0, got {self.end}")
            if self.total_epochs is None or self.total_epochs < 1:
                problems.append(
                    f"polynomial requires total_epochs >= 1, got {self.total_epochs}"
                )
        if problems:
            raise ConfigError(problems)


def constant(base: float) -> ScheduleSpec:
    return ScheduleSpec(kind="constant", base=base)


def exponential(base: float, factor: float, period_epochs: int) -> ScheduleSpec:
    return ScheduleSpec(
        kind="exponential_step", base=base, factor=factor, period_epochs=period_epochs
    )


def polynomial(base: float, end: float, total_epochs: int, power: float = 1.0) -> ScheduleSpec:
    return ScheduleSpec(
        kind="polynomial", base=base, end=end, total_epochs=total_epochs, power=power
    )


def schedule_value(spec: ScheduleSpec, epoch: int) -> float:
    """Evaluate the schedule at a non-negative integer epoch.

    Specs are validated at construction, so this never raises on a valid
    spec; a negative epoch is a caller bug.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if spec.kind == "constant":
        return spec.base
    if spec.kind == "exponential_step":
        return spec.base * spec.factor ** (epoch // spec.period_epochs)
    # polynomial: blend form base*u + end*(1-u) hits both endpoints exactly,
    # which the algebraically equal (base-end)*u + end does not in floats.
    if epoch >= spec.total_epochs:
        return spec.end
    u = (1.0 - epoch / spec.total_epochs) ** spec.power
    return spec.base * u + spec.end * (1.0 - u)

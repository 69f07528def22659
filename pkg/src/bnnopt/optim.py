"""Flip-based binary optimizers plus Adam for the real-valued parameters.

A binary weight lives in {-1, +1} and is trained by sign flips only. Each
step updates exponentially decayed gradient statistics and flips weight i
when the decision statistic exceeds the threshold tau *and* points in the
same direction as the current weight (a gradient aligned with the weight
means the loss wants the weight pushed the other way):

* ``bop_step``     -- first raw moment m only; flips on |m_i| > tau.
* ``bop2nd_step``  -- adds the second raw moment v and flips on the
  standardized statistic s = m / (sqrt(v) + eps), or its bias-corrected
  form (m/gamma) / (sqrt(v/sigma) + eps).

Threshold comparisons are strict (>): equality with tau never flips.
Both rules evaluate the statistic computed *after* the moment update of
the same step.

Real-valued parameters (normalization scales/shifts, first/last layers)
are trained with standard bias-corrected Adam, and the latent-weight
baseline trains a real proxy weight with SGD, binarizing on the forward
pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class BinaryParam:
    """A binary weight tensor with its flip-optimizer moment state.

    Invariants: w is elementwise +-1; v is elementwise >= 0 (it is a convex
    combination of squares); all three arrays share one shape.
    """

    w: np.ndarray
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def initialize(cls, shape, rng: np.random.Generator) -> "BinaryParam":
        """Random equiprobable signs, zero moments."""
        w = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        return cls(w=w, m=np.zeros(shape), v=np.zeros(shape))


@dataclass
class LatentWeight:
    """Real-valued proxy weight for the latent baseline.

    The forward pass sees sign(w_latent); the latent value itself encodes
    sign times magnitude, so ``sign * magnitude`` reconstructs it exactly.
    Updates are clipped to [-clip, clip] when ``clip`` is set, which keeps
    the straight-through gradient alive.
    """

    w_latent: np.ndarray
    clip: float | None = 1.0

    @property
    def sign(self) -> np.ndarray:
        return np.where(self.w_latent < 0, -1.0, 1.0)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.w_latent)

    @classmethod
    def initialize(cls, shape, rng: np.random.Generator, clip: float | None = 1.0):
        return cls(w_latent=rng.uniform(-1.0, 1.0, shape), clip=clip)


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, w: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(w), v=np.zeros_like(w), t=0)


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters of the flip optimizers.

    gamma is the adaptivity rate (the decay of the first moment, playing
    the role a learning rate plays in real-valued training), sigma the
    standard rate (decay of the second moment), tau the flip threshold.
    Defaults are the constant-schedule values found by a powers-of-ten
    search: gamma=1e-7, sigma=1e-3, tau=1e-6.
    """

    gamma: float = 1e-7
    sigma: float = 1e-3
    tau: float = 1e-6
    epsilon: float = 1e-7
    bias_mode: str = "unbiased"
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        problems = []
        if not 0 < self.gamma <= 1:
            problems.append(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 < self.sigma <= 1:
            problems.append(f"sigma must be in (0, 1], got {self.sigma}")
        if self.tau < 0:
            problems.append(f"tau must be >= 0, got {self.tau}")
        if not self.epsilon >= 0:
            problems.append(f"epsilon must be >= 0, got {self.epsilon}")
        if self.bias_mode not in ("biased", "unbiased"):
            problems.append(f"bias_mode must be 'biased' or 'unbiased', got {self.bias_mode!r}")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class StepReport:
    """Flip count of one optimizer step for one parameter tensor."""

    flips: int
    total: int

    def __post_init__(self):
        if not 0 <= self.flips <= self.total:
            raise ValueError(f"flips={self.flips} outside [0, total={self.total}]")


def _check_shape(param_w: np.ndarray, g: np.ndarray, who: str) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != param_w.shape:
        raise ShapeError(f"{who}: gradient shape {g.shape} != weight shape {param_w.shape}")
    return g


def _flip(w: np.ndarray, stat: np.ndarray, tau: float) -> int:
    # Flip where the statistic clears the threshold strictly and agrees in
    # sign with the current weight. stat passing |.| > tau >= 0 is nonzero,
    # so np.sign never contributes a spurious 0 to the comparison.
    mask = (np.abs(stat) > tau) & (np.sign(stat) == w)
    np.negative(w, where=mask, out=w)
    return int(np.count_nonzero(mask))


def bop_step(param: BinaryParam, g, gamma: float, tau: float) -> StepReport:
    """First-order flip step: m <- (1-gamma) m + gamma g, flip on |m| > tau.

    The second moment v is never read or written here.
    """
    g = _check_shape(param.w, g, "bop_step")
    param.m *= 1.0 - gamma
    param.m += gamma * g
    flips = _flip(param.w, param.m, tau)
    return StepReport(flips=flips, total=param.w.size)


def standardized_momentum(m, v, cfg: OptimizerConfig) -> np.ndarray:
    """Decision statistic of the second-order rule.

    biased:   s = m / (sqrt(v) + eps)
    unbiased: s = (m / gamma) / (sqrt(v / sigma) + eps)

    The unbiased form equals the biased form applied to (m/gamma, v/sigma).
    """
    if cfg.bias_mode == "unbiased":
        return (m / cfg.gamma) / (np.sqrt(v / cfg.sigma) + cfg.epsilon)
    return m / (np.sqrt(v) + cfg.epsilon)


def bop2nd_step(param: BinaryParam, g, cfg: OptimizerConfig) -> StepReport:
    """Second-order flip step.

    m <- (1-gamma) m + gamma g
    v <- (1-sigma) v + sigma g^2
    flip weight i when |s_i| > tau and sign(s_i) == sign(w_i), with s the
    standardized momentum under cfg.bias_mode.
    """
    g = _check_shape(param.w, g, "bop2nd_step")
    param.m *= 1.0 - cfg.gamma
    param.m += cfg.gamma * g
    param.v *= 1.0 - cfg.sigma
    param.v += cfg.sigma * np.square(g)
    s = standardized_momentum(param.m, param.v, cfg)
    flips = _flip(param.w, s, cfg.tau)
    return StepReport(flips=flips, total=param.w.size)


def adam_step(w, g, state: AdamState, cfg: AdamConfig) -> np.ndarray:
    """Standard bias-corrected Adam update; returns the new weight tensor."""
    w = np.asarray(w, dtype=np.float64)
    g = _check_shape(w, g, "adam_step")
    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * np.square(g)
    m_hat = state.m / (1.0 - cfg.beta1**state.t)
    v_hat = state.v / (1.0 - cfg.beta2**state.t)
    return w - cfg.alpha * m_hat / (np.sqrt(v_hat) + cfg.eps)


def latent_sgd_step(param: LatentWeight, g, alpha: float) -> np.ndarray:
    """Latent-weight baseline step: plain gradient descent on the proxy.

    The update direction is -g (descent); the proxy is then clipped so its
    magnitude cannot leave the straight-through window. Forward passes use
    sign(w_latent), so a weight only changes effect when the proxy crosses
    zero.
    """
    g = _check_shape(param.w_latent, g, "latent_sgd_step")
    if not alpha > 0:
        raise ConfigError(f"latent_sgd_step requires alpha > 0, got {alpha}")
    param.w_latent = param.w_latent - alpha * g
    if param.clip is not None:
        np.clip(param.w_latent, -param.clip, param.clip, out=param.w_latent)
    return param.w_latent

"""Brownian-bridge schedule, forward sampling and reverse-step coefficients.

The forward bridge pins ``x_0`` at ``t = 0`` and the condition ``y`` at
``t = T``::

    x_t = (1 - m_t) x_0 + m_t y + sqrt(delta_t) eps,
    m_t = t / T,  delta_t = 2 t (T - t) / T^2

Conditioning the one-step kernel ``q(x_t | x_{t-1}, y)`` on ``x_0`` gives a
Gaussian reverse step with mean ``c_x x_t + c_y y - c_eps eps`` (with
``eps = x_t - x_0``) and variance ``delta_tilde_t``.

Array arguments may be numpy arrays or torch tensors; only elementwise
arithmetic is used on them.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidStepError


@dataclass(frozen=True, eq=False)
class BridgeSchedule:
    """Per-step arrays of length ``T + 1`` indexed by ``t``.

    Index 0 of the step arrays is unused (set to 0). Index ``T`` holds the
    pinned-terminal step: with ``x_T = y`` the posterior at ``T - 1`` is just
    the bridge marginal, so ``c_x = c_eps = 1 - m_{T-1}``, ``c_y = m_{T-1}``
    and ``delta_tilde = delta_{T-1}``.
    """

    T: int
    m: np.ndarray
    delta: np.ndarray
    delta_step: np.ndarray
    delta_tilde: np.ndarray
    c_x: np.ndarray
    c_y: np.ndarray
    c_eps: np.ndarray

    @property
    def terminal(self) -> int:
        return self.T

    def rows(self):
        for t in range(self.T + 1):
            yield (
                t,
                self.m[t],
                self.delta[t],
                self.delta_step[t],
                self.delta_tilde[t],
                self.c_x[t],
                self.c_y[t],
                self.c_eps[t],
            )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["t", "m_t", "delta_t", "delta_step_t", "delta_tilde_t", "c_x", "c_y", "c_eps"])
        for row in self.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def build_schedule(T: int) -> BridgeSchedule:
    T = int(T)
    if T < 2:
        raise InvalidConfigError(f"T must be >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    m = t / T
    delta = 2.0 * t * (T - t) / (T * T)

    delta_step = np.zeros(T + 1)
    delta_tilde = np.zeros(T + 1)
    c_x = np.zeros(T + 1)
    c_y = np.zeros(T + 1)
    c_eps = np.zeros(T + 1)

    s = np.arange(1, T)  # regular steps 1..T-1
    a = (1.0 - m[s]) / (1.0 - m[s - 1])  # x_{t-1} -> x_t mean scale
    delta_step[s] = delta[s] - delta[s - 1] * a * a
    ratio_prev = delta[s - 1] / delta[s]
    ratio_step = delta_step[s] / delta[s]
    c_x[s] = ratio_prev * a + ratio_step * (1.0 - m[s - 1])
    c_y[s] = m[s - 1] - m[s] * a * ratio_prev
    c_eps[s] = (1.0 - m[s - 1]) * ratio_step
    delta_tilde[s] = delta_step[s] * delta[s - 1] / delta[s]

    # x_T = y is deterministic given x_{T-1}
    c_x[T] = 1.0 - m[T - 1]
    c_y[T] = m[T - 1]
    c_eps[T] = 1.0 - m[T - 1]
    delta_tilde[T] = delta[T - 1]

    # delta_step round-off can dip a hair below zero near t = 1
    delta_step = np.maximum(delta_step, 0.0)
    delta_tilde = np.maximum(delta_tilde, 0.0)

    arrays = dict(m=m, delta=delta, delta_step=delta_step, delta_tilde=delta_tilde, c_x=c_x, c_y=c_y, c_eps=c_eps)
    for v in arrays.values():
        v.setflags(write=False)
    return BridgeSchedule(T=T, **arrays)


def _check_shapes(*arrays):
    shape = tuple(arrays[0].shape)
    for a in arrays[1:]:
        if tuple(a.shape) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {tuple(a.shape)}")


def _check_t(schedule: BridgeSchedule, t: int, lo: int, hi: int):
    if not lo <= t <= hi:
        raise InvalidStepError(f"t={t} outside [{lo}, {hi}]")


def marginal(schedule: BridgeSchedule, x0, y, t: int, eps):
    _check_shapes(x0, y, eps)
    _check_t(schedule, t, 0, schedule.T)
    m, d = schedule.m[t], schedule.delta[t]
    # this form keeps both endpoints exact in floating point
    return (1.0 - m) * x0 + m * y + np.sqrt(d) * eps


def forward_sample(schedule: BridgeSchedule, x0, y, t: int, rng: np.random.Generator):
    """Draw ``x_t`` from the bridge marginal. Returns ``(x_t, eps)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_shapes(x0, y)
    eps = rng.standard_normal(x0.shape)
    return marginal(schedule, x0, y, t, eps), eps


def training_target(schedule: BridgeSchedule, x0, y, t: int, eps):
    """What the denoiser learns to predict: ``m_t (y - x_0) + sqrt(delta_t) eps``.

    Equal to ``x_t - x_0`` for the same ``eps``.
    """
    _check_shapes(x0, y, eps)
    _check_t(schedule, t, 0, schedule.T)
    return schedule.m[t] * (y - x0) + np.sqrt(schedule.delta[t]) * eps


def posterior_mean(schedule: BridgeSchedule, x_t, y, t: int, eps_hat):
    """Reverse-step mean for ``1 <= t <= T - 1``."""
    _check_t(schedule, t, 1, schedule.T - 1)
    _check_shapes(x_t, y, eps_hat)
    return schedule.c_x[t] * x_t + schedule.c_y[t] * y - schedule.c_eps[t] * eps_hat


def terminal_mean(schedule: BridgeSchedule, x_T, y, eps_hat):
    """Mean of ``x_{T-1}`` given the pinned ``x_T``: the bridge marginal at ``T - 1``
    around ``x0_from_eps(x_T, eps_hat)``."""
    _check_shapes(x_T, y, eps_hat)
    T = schedule.T
    x0_hat = x0_from_eps(x_T, eps_hat)
    return (1.0 - schedule.m[T - 1]) * x0_hat + schedule.m[T - 1] * y


def step_mean(schedule: BridgeSchedule, x_t, y, t: int, eps_hat):
    """Reverse-step mean for any ``1 <= t <= T``."""
    if t == schedule.T:
        return terminal_mean(schedule, x_t, y, eps_hat)
    return posterior_mean(schedule, x_t, y, t, eps_hat)


def x0_from_eps(x_t, eps_hat):
    _check_shapes(x_t, eps_hat)
    return x_t - eps_hat

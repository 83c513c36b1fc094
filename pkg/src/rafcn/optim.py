"""Nesterov-accelerated Adam and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .tensor import Tensor


@dataclass
class Nadam:
    """Adam with the Nesterov look-ahead applied to the bias-corrected moment.

    Per step, with ``t`` already incremented::

        m = b1*m + (1-b1)*g          v = b2*v + (1-b2)*g**2
        m_hat = m / (1 - b1**(t+1))  g_hat = g / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta -= lr * (b1*m_hat + (1-b1)*g_hat) / (sqrt(v_hat) + eps)
    """

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")

    def step(self, params: "OrderedDict[str, Tensor]") -> None:
        grads = {}
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericalError("nadam_step", f"non-finite gradient for parameter '{name}'")
            grads[name] = g
        self.t += 1
        t, b1, b2 = self.t, self.beta1, self.beta2
        mc = 1.0 - b1 ** (t + 1)
        gc = 1.0 - b1 ** t
        vc = 1.0 - b2 ** t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            direction = b1 * (m / mc) + (1 - b1) * (g / gc)
            p.data = p.data - self.lr * direction / (np.sqrt(v / vc) + self.eps)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        out["opt.t"] = np.array(float(self.t))
        out["opt.lr"] = np.array(float(self.lr))
        return out

    def load_state_dict(self, state) -> None:
        self.m, self.v = {}, {}
        for key, arr in state.items():
            if key.startswith("opt.m."):
                self.m[key[len("opt.m."):]] = np.array(arr, dtype=np.float64)
            elif key.startswith("opt.v."):
                self.v[key[len("opt.v."):]] = np.array(arr, dtype=np.float64)
        if "opt.t" in state:
            self.t = int(state["opt.t"])
        if "opt.lr" in state:
            self.lr = float(state["opt.lr"])


@dataclass
class PlateauScheduler:
    """Multiply ``lr`` by ``factor`` once the monitored loss stalls.

    A value counts as an improvement when it beats the best so far by more
    than ``threshold``; after more than ``patience`` non-improving
    observations in a row the rate decays and the counter resets.
    """

    lr: float = 2e-4
    factor: float = 0.1
    patience: int = 5
    threshold: float = 1e-6
    min_lr: float = 1e-7
    best: float = math.inf
    wait: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ConfigError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")

    def observe(self, val_loss: float) -> float:
        if not math.isfinite(val_loss):
            raise NumericalError("scheduler_observe", f"validation loss is {val_loss}")
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict([
            ("sched.lr", np.array(self.lr)),
            ("sched.best", np.array(self.best)),
            ("sched.wait", np.array(float(self.wait))),
        ])

    def load_state_dict(self, state) -> None:
        if "sched.lr" in state:
            self.lr = float(state["sched.lr"])
            self.best = float(state["sched.best"])
            self.wait = int(state["sched.wait"])

"""Concave phi functions that pick the divergence being minimized.

The objective never calls ``phi`` directly; it goes through
``scaled_phi(spec, x) = (phi(alpha * x) - phi(0)) / alpha``. Subtracting
``phi(0)`` only removes a parameter-free constant, and it makes the composite
tend to ``x`` as alpha goes to zero for every kind, since ``phi'(0) = 1``.

``chi2-mixture`` uses the identity as its phi and puts both squared terms in
``mixture_regularizer``; with c = beta = 0.5 this equals the chi2 phi on data
plus a quarter-square penalty on model samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("kl", "js", "chi2", "chi2_mixture")

# stable CLI/config spelling -> internal kind
CLI_NAMES = {"kl": "kl", "js": "js", "chi2": "chi2", "chi2-mixture": "chi2_mixture"}


def parse_kind(name: str) -> str:
    key = name.strip().lower()
    if key in CLI_NAMES:
        return CLI_NAMES[key]
    if key in KINDS:
        return key
    raise ValueError(f"unknown divergence {name!r}; expected one of {sorted(CLI_NAMES)}")


@dataclass(frozen=True)
class PhiSpec:
    kind: str = "chi2_mixture"
    alpha: float = 0.01
    mixture_c: float = 0.5
    mixture_beta: float = 0.5
    js_guard_margin: float = 0.05
    js_guard_curvature: float = 100.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown phi kind {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.mixture_beta <= 1.0:
            raise ValueError("mixture_beta must lie in [0, 1]")
        if self.js_guard_curvature <= 0:
            raise ValueError("js_guard_curvature must be positive")

    @property
    def js_knot(self) -> float:
        return -math.log(2.0) + self.js_guard_margin


def _js_smooth(x):
    return np.log(2.0 - np.exp(-x))


def _js_smooth_prime(x):
    e = np.exp(-x)
    return e / (2.0 - e)


def phi(spec: PhiSpec, x):
    x = np.asarray(x, dtype=float)
    kind = spec.kind
    if kind == "kl":
        out = -np.exp(-x)
    elif kind == "chi2":
        out = x - 0.25 * x * x
    elif kind == "chi2_mixture":
        out = x.copy()
    else:
        x0 = spec.js_knot
        safe = np.maximum(x, x0)
        d = x - x0
        quad = _js_smooth(x0) + _js_smooth_prime(x0) * d - 0.5 * spec.js_guard_curvature * d * d
        out = np.where(x >= x0, _js_smooth(safe), quad)
    return out if out.ndim else float(out)


def phi_prime(spec: PhiSpec, x):
    x = np.asarray(x, dtype=float)
    kind = spec.kind
    if kind == "kl":
        out = np.exp(-x)
    elif kind == "chi2":
        out = 1.0 - 0.5 * x
    elif kind == "chi2_mixture":
        out = np.ones_like(x)
    else:
        x0 = spec.js_knot
        safe = np.maximum(x, x0)
        quad = _js_smooth_prime(x0) - spec.js_guard_curvature * (x - x0)
        out = np.where(x >= x0, _js_smooth_prime(safe), quad)
    return out if out.ndim else float(out)


def scaled_phi(spec: PhiSpec, x):
    """(phi(alpha x) - phi(0)) / alpha, the form consumed by the objective."""
    a = spec.alpha
    return (phi(spec, a * np.asarray(x, dtype=float)) - phi(spec, 0.0)) / a


def scaled_phi_prime(spec: PhiSpec, x):
    return phi_prime(spec, spec.alpha * np.asarray(x, dtype=float))


def mixture_regularizer(spec: PhiSpec, r_data, r_model, w_data=None, w_model=None) -> float:
    """beta*c*E_data[r^2] + (1-beta)*c*E_model[r^2].

    Plain means by default; pass weights to take occupancy-weighted sums
    instead (weights are used as given, not renormalized).
    """
    if spec.kind != "chi2_mixture":
        raise ValueError("mixture_regularizer requires the chi2_mixture kind")
    r_data = np.asarray(r_data, dtype=float)
    r_model = np.asarray(r_model, dtype=float)

    def side(r, w):
        if r.size == 0:
            return 0.0
        if w is None:
            return float(np.mean(r * r))
        return float(np.sum(np.asarray(w, dtype=float) * r * r))

    beta, c = spec.mixture_beta, spec.mixture_c
    return beta * c * side(r_data, w_data) + (1.0 - beta) * c * side(r_model, w_model)

"""Built-in scalar function families for the chemistry closures.

Every closure returns its value and first derivative together so the Newton
Jacobian never needs finite differences.  Families are selected by a string
key in the config; see :data:`KAPPA_FAMILIES` and :data:`OCP_FAMILIES`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

__all__ = [
    "Closure",
    "make_kappa1",
    "make_ocp",
    "KAPPA_FAMILIES",
    "OCP_FAMILIES",
]

Evaluator = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


@dataclass(frozen=True)
class Closure:
    """A named scalar function with an exact derivative.

    ``closure(x)`` returns the value, ``closure.eval(x)`` returns
    ``(value, d value / dx)``.  Arrays are evaluated elementwise.
    """

    family: str
    params: Mapping[str, Any] = field(default_factory=dict)
    _fn: Evaluator | None = field(default=None, repr=False, compare=False)

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        return self._fn(x)

    def __call__(self, x):
        return self.eval(x)[0]

    def derivative(self, x):
        return self.eval(x)[1]

    def to_dict(self) -> dict:
        return {"family": self.family, **dict(self.params)}


def _constant(value: float) -> Evaluator:
    value = float(value)

    def fn(x):
        return np.full_like(x, value), np.zeros_like(x)

    return fn


def _power_series(coeffs, powers=None, x_ref: float = 1.0, scale: float = 1.0) -> Evaluator:
    coeffs = np.asarray(coeffs, dtype=float)
    if powers is None:
        powers = np.arange(coeffs.size, dtype=float)
    powers = np.asarray(powers, dtype=float)
    if powers.shape != coeffs.shape:
        raise ValueError("polynomial: 'powers' and 'coeffs' must have equal length")
    if np.any(powers < 0):
        raise ValueError("polynomial: negative powers are not supported")

    def fn(x):
        y = x / x_ref
        val = np.zeros_like(y)
        der = np.zeros_like(y)
        for a, p in zip(coeffs, powers):
            if p == 0.0:
                val = val + a
                continue
            val = val + a * y**p
            der = der + a * p * y ** (p - 1.0)
        return scale * val, scale * der / x_ref

    return fn


def _exponential(a: float, b: float, x_ref: float = 1.0, scale: float = 1.0) -> Evaluator:
    def fn(x):
        e = scale * a * np.exp(b * x / x_ref)
        return e, e * b / x_ref

    return fn


def _tanh_series(
    offset: float = 0.0,
    linear: float = 0.0,
    exp_terms=(),
    tanh_terms=(),
    stretch: float = 1.0,
) -> Evaluator:
    """U(x) = offset + linear*s + sum A exp(B s) + sum D tanh(E s + G), s = stretch*x."""
    exp_terms = [tuple(map(float, t)) for t in exp_terms]
    tanh_terms = [tuple(map(float, t)) for t in tanh_terms]
    for t in exp_terms:
        if len(t) != 2:
            raise ValueError("tanh_series: exp_terms entries are [A, B]")
    for t in tanh_terms:
        if len(t) != 3:
            raise ValueError("tanh_series: tanh_terms entries are [D, E, G]")

    def fn(x):
        s = stretch * x
        val = offset + linear * s
        der = np.full_like(s, linear)
        for a, b in exp_terms:
            e = a * np.exp(b * s)
            val = val + e
            der = der + b * e
        for d, e_, g in tanh_terms:
            th = np.tanh(e_ * s + g)
            val = val + d * th
            der = der + d * e_ * (1.0 - th * th)
        return val, stretch * der

    return fn


# Dualfoil (1998) curves, as distributed with common open battery-model codes.
_GRAPHITE_DUALFOIL = dict(
    offset=0.194,
    exp_terms=[[1.5, -120.0]],
    tanh_terms=[
        [0.0351, 1 / 0.083, -0.286 / 0.083],
        [-0.0045, 1 / 0.119, -0.849 / 0.119],
        [-0.035, 1 / 0.05, -0.9233 / 0.05],
        [-0.0147, 1 / 0.034, -0.5 / 0.034],
        [-0.102, 1 / 0.142, -0.194 / 0.142],
        [-0.022, 1 / 0.0164, -0.9 / 0.0164],
        [-0.011, 1 / 0.0226, -0.124 / 0.0226],
        [0.0155, 1 / 0.029, -0.105 / 0.029],
    ],
)

_LICO2_DUALFOIL = dict(
    offset=2.16216,
    stretch=1.062,
    tanh_terms=[
        [0.07645, -54.4806, 30.834],
        [2.1581, -50.294, 52.294],
        [-0.14169, -19.8543, 11.0923],
        [0.2051, -5.4888, 1.4684],
        [0.2531, -1 / 0.1316, 0.56478 / 0.1316],
        [-0.02167, 1 / 0.006, -0.525 / 0.006],
    ],
)

KAPPA_FAMILIES: dict[str, Callable[..., Evaluator]] = {
    "constant": _constant,
    "polynomial": _power_series,
    "exponential": _exponential,
}

OCP_FAMILIES: dict[str, Callable[..., Evaluator]] = {
    "constant": _constant,
    "polynomial": _power_series,
    "tanh_series": _tanh_series,
    "graphite_dualfoil1998": lambda: _tanh_series(**_GRAPHITE_DUALFOIL),
    "lico2_dualfoil1998": lambda: _tanh_series(**_LICO2_DUALFOIL),
}

# polynomial families use ``c_ref`` (kappa) in configs; map onto x_ref.
_KAPPA_ALIASES = {"c_ref": "x_ref"}


def _build(registry, spec: Mapping[str, Any], kind: str, aliases=None) -> Closure:
    if "family" not in spec:
        raise ValueError(f"{kind}: missing 'family' key")
    family = spec["family"]
    if family not in registry:
        known = ", ".join(sorted(registry))
        raise ValueError(f"{kind}: unknown family {family!r} (known: {known})")
    params = {k: v for k, v in spec.items() if k != "family"}
    kwargs = {(aliases or {}).get(k, k): v for k, v in params.items()}
    try:
        fn = registry[family](**kwargs)
    except TypeError as exc:
        raise ValueError(f"{kind}: bad parameters for family {family!r}: {exc}") from None
    return Closure(family, params, fn)


def make_kappa1(spec: Mapping[str, Any]) -> Closure:
    """Electrolyte conductivity closure kappa_1(c1) from a config table."""
    return _build(KAPPA_FAMILIES, spec, "kappa1", _KAPPA_ALIASES)


def make_ocp(spec: Mapping[str, Any]) -> Closure:
    """Open-circuit potential closure U(stoichiometry) from a config table."""
    return _build(OCP_FAMILIES, spec, "ocp")

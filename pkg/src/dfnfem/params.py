"""Physical parameter set, config ingestion and the chemistry closures.

Configs are TOML (or JSON, by extension) with the sections ``[cell]``,
``[negative]``, ``[separator]``, ``[positive]`` and ``[operating]``.  The
auxiliary sections ``[mesh]``, ``[radial]``, ``[plan]``, ``[solver]``,
``[study]`` and ``[bench]`` are passed through untouched for the other
modules.  All values are SI.
"""
from __future__ import annotations

import copy
import json
import math
import sys
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .closures import Closure, make_kappa1, make_ocp

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "SubdomainTag",
    "ELECTRODES",
    "ConfigError",
    "DomainError",
    "ElectrolyteRegion",
    "Electrode",
    "CurrentProgram",
    "ParameterSet",
    "read_config",
    "apply_overrides",
    "parameters_from_config",
    "validate_parameters",
    "load_parameters",
    "kappa2_of",
    "butler_volmer",
    "overpotential",
]

FARADAY = 96485.33212
GAS_CONSTANT = 8.314462618


class SubdomainTag(IntEnum):
    NEGATIVE = 0
    SEPARATOR = 1
    POSITIVE = 2

    @property
    def key(self) -> str:
        return self.name.lower()


ELECTRODES = (SubdomainTag.NEGATIVE, SubdomainTag.POSITIVE)


class ConfigError(ValueError):
    """Malformed config file or a violated parameter invariant."""


class DomainError(ValueError):
    """A chemistry closure was evaluated outside its admissible set.

    Raised during Newton trial states; the line search treats it as a
    signal to shorten the step.
    """

    def __init__(self, message: str, tag=None, variable: str | None = None, index=None):
        super().__init__(message)
        self.tag = tag
        self.variable = variable
        self.index = index


@dataclass(frozen=True)
class ElectrolyteRegion:
    """Coefficients that live on every subdomain."""

    thickness: float
    eps1: float
    k1: float
    kappa1: Closure
    c1_0: float


@dataclass(frozen=True)
class Electrode:
    """Coefficients defined only on the two electrodes."""

    sigma: float
    k2: float
    a1: float
    a2: float
    Rs: float
    c2max: float
    c2_0: float
    bv_k: float
    alpha_a: float
    alpha_c: float
    ocp: Closure


@dataclass(frozen=True)
class CurrentProgram:
    """Piecewise-constant applied current density (A/m^2, discharge > 0).

    ``starts[j] <= t < starts[j+1]`` uses ``values[j]``.  Times before the
    first breakpoint use the first value.
    """

    starts: tuple
    values: tuple

    def __call__(self, t: float) -> float:
        j = int(np.searchsorted(self.starts, t, side="right")) - 1
        return float(self.values[max(j, 0)])

    @classmethod
    def constant(cls, value: float) -> "CurrentProgram":
        return cls((0.0,), (float(value),))


@dataclass(frozen=True)
class ParameterSet:
    F: float
    R: float
    T0: float
    t_plus: float
    regions: Mapping[SubdomainTag, ElectrolyteRegion]
    electrodes: Mapping[SubdomainTag, Electrode]
    current: CurrentProgram
    height: float = 1.0
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def f(self) -> float:
        """F / (R T0), in 1/V."""
        return self.F / (self.R * self.T0)

    def region(self, tag) -> ElectrolyteRegion:
        return self.regions[SubdomainTag(tag)]

    def electrode(self, tag) -> Electrode:
        tag = SubdomainTag(tag)
        if tag not in self.electrodes:
            raise KeyError(f"{tag.key} is not an electrode")
        return self.electrodes[tag]

    def thicknesses(self) -> tuple[float, float, float]:
        return tuple(self.regions[t].thickness for t in SubdomainTag)


# config schema ---------------------------------------------------------------

_CELL_KEYS = {"F", "R", "T0", "t_plus", "height"}
_REGION_KEYS = {"thickness", "eps1", "k1", "kappa1", "c1_0"}
_ELECTRODE_KEYS = _REGION_KEYS | {
    "sigma", "k2", "a1", "a2", "Rs", "c2max", "c2_0", "bv_k", "alpha_a", "alpha_c", "ocp",
}
_OPERATING_KEYS = {"current", "current_program"}
_PARAM_SECTIONS = {"cell", "negative", "separator", "positive", "operating"}
_AUX_SECTIONS = {"mesh", "radial", "plan", "solver", "study", "bench"}


def read_config(path, _seen=None) -> dict:
    """Parse a TOML or JSON config file into a plain dict.

    A top-level ``extends = "other.toml"`` (relative to the file) loads that
    file first and deep-merges this one over it.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(path.read_text())
        else:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"parse error in {path}: {exc}") from None
    base = raw.pop("extends", None)
    if base is None:
        return raw
    seen = set(_seen or ()) | {path.resolve()}
    base_path = (path.parent / str(base)).resolve()
    if base_path in seen:
        raise ConfigError(f"circular 'extends' chain at {base_path}")
    return _deep_merge(read_config(base_path, seen), raw)


def _deep_merge(base: Mapping, over: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_literal(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: Mapping, overrides: Mapping[str, Any] | None) -> dict:
    """Return a copy of ``raw`` with dotted-key overrides applied.

    ``{"negative.alpha_a": 0.7}`` sets ``raw["negative"]["alpha_a"]``.  String
    values are parsed as TOML literals, so ``"0.7"`` and ``"[1, 2]"`` work.
    """
    out = copy.deepcopy(dict(raw))
    for key, value in (overrides or {}).items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        if isinstance(value, str):
            value = _parse_literal(value)
        node[parts[-1]] = value
    return out


def _check_keys(section: str, table: Mapping, allowed: set) -> None:
    if not isinstance(table, Mapping):
        raise ConfigError(f"[{section}] must be a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _require(section: str, table: Mapping, key: str) -> Any:
    if key not in table:
        raise ConfigError(f"missing key {key!r} in [{section}]")
    return table[key]


def _float(section, table, key, default=None) -> float:
    if key not in table and default is not None:
        return float(default)
    value = _require(section, table, key)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key} must be a number, got {value!r}") from None


def _closure(section, table, key, factory) -> Closure:
    spec = _require(section, table, key)
    if isinstance(spec, str):
        spec = {"family": spec}
    if isinstance(spec, (int, float)):
        spec = {"family": "constant", "value": float(spec)}
    try:
        return factory(spec)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def _current_program(table: Mapping) -> CurrentProgram:
    if "current" in table and "current_program" in table:
        raise ConfigError("[operating] give either 'current' or 'current_program', not both")
    if "current" in table:
        return CurrentProgram.constant(_float("operating", table, "current"))
    prog = _require("operating", table, "current_program")
    try:
        pairs = [(float(t), float(v)) for t, v in prog]
    except (TypeError, ValueError):
        raise ConfigError("[operating] current_program must be a list of [t_start, value]") from None
    if not pairs:
        raise ConfigError("[operating] current_program is empty")
    starts = tuple(p[0] for p in pairs)
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ConfigError("[operating] current_program start times must be strictly increasing")
    return CurrentProgram(starts, tuple(p[1] for p in pairs))


def parameters_from_config(raw: Mapping) -> ParameterSet:
    """Build a ParameterSet from a parsed config without checking invariants."""
    unknown = sorted(set(raw) - _PARAM_SECTIONS - _AUX_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    for sec in _PARAM_SECTIONS:
        if sec not in raw:
            raise ConfigError(f"missing section [{sec}]")

    cell = raw["cell"]
    _check_keys("cell", cell, _CELL_KEYS)
    regions, electrodes = {}, {}
    for tag in SubdomainTag:
        sec = tag.key
        table = raw[sec]
        allowed = _REGION_KEYS if tag == SubdomainTag.SEPARATOR else _ELECTRODE_KEYS
        _check_keys(sec, table, allowed)
        regions[tag] = ElectrolyteRegion(
            thickness=_float(sec, table, "thickness"),
            eps1=_float(sec, table, "eps1"),
            k1=_float(sec, table, "k1"),
            kappa1=_closure(sec, table, "kappa1", make_kappa1),
            c1_0=_float(sec, table, "c1_0"),
        )
        if tag == SubdomainTag.SEPARATOR:
            continue
        electrodes[tag] = Electrode(
            sigma=_float(sec, table, "sigma"),
            k2=_float(sec, table, "k2"),
            a1=_float(sec, table, "a1"),
            a2=_float(sec, table, "a2"),
            Rs=_float(sec, table, "Rs"),
            c2max=_float(sec, table, "c2max"),
            c2_0=_float(sec, table, "c2_0"),
            bv_k=_float(sec, table, "bv_k"),
            alpha_a=_float(sec, table, "alpha_a"),
            alpha_c=_float(sec, table, "alpha_c"),
            ocp=_closure(sec, table, "ocp", make_ocp),
        )
    operating = raw["operating"]
    _check_keys("operating", operating, _OPERATING_KEYS)
    return ParameterSet(
        F=_float("cell", cell, "F", FARADAY),
        R=_float("cell", cell, "R", GAS_CONSTANT),
        T0=_float("cell", cell, "T0"),
        t_plus=_float("cell", cell, "t_plus"),
        regions=regions,
        electrodes=electrodes,
        current=_current_program(operating),
        height=_float("cell", cell, "height", 1.0),
        extra={k: copy.deepcopy(raw[k]) for k in _AUX_SECTIONS if k in raw},
    )


def _positive(name: str, value: float) -> None:
    if not (math.isfinite(value) and value > 0.0):
        raise ConfigError(f"{name} must be positive, got {value!r}")


def validate_parameters(ps: ParameterSet) -> ParameterSet:
    """Check every invariant of ``ps``; return it unchanged or raise ConfigError."""
    for name in ("F", "R", "T0", "height"):
        _positive(name, getattr(ps, name))
    if not 0.0 < ps.t_plus < 1.0:
        raise ConfigError(f"t_plus out of (0,1): {ps.t_plus}")
    for tag in SubdomainTag:
        reg = ps.regions[tag]
        for name in ("thickness", "eps1", "k1", "c1_0"):
            _positive(f"{tag.key}.{name}", getattr(reg, name))
        if not np.all(reg.kappa1(np.array([reg.c1_0])) > 0.0):
            raise ConfigError(f"{tag.key}.kappa1 must be positive at c1_0")
    for tag in ELECTRODES:
        el = ps.electrodes[tag]
        for name in ("sigma", "k2", "a1", "a2", "Rs", "c2max", "bv_k"):
            _positive(f"{tag.key}.{name}", getattr(el, name))
        for name in ("alpha_a", "alpha_c"):
            v = getattr(el, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{tag.key}.{name}: {name} out of (0,1), got {v}")
        if not 0.0 < el.c2_0 < el.c2max:
            raise ConfigError(f"{tag.key}.c2_0 out of (0, c2max): {el.c2_0} vs {el.c2max}")
        u = el.ocp.eval(np.array([el.c2_0 / el.c2max]))
        if not all(np.isfinite(x).all() for x in u):
            raise ConfigError(f"{tag.key}.ocp is not finite at the initial stoichiometry")
    for v in ps.current.values:
        if not math.isfinite(v):
            raise ConfigError("current program values must be finite")
    return ps


def load_parameters(path, overrides: Mapping[str, Any] | None = None) -> ParameterSet:
    """Read, override, build and validate a parameter set."""
    raw = apply_overrides(read_config(path), overrides)
    return validate_parameters(parameters_from_config(raw))


# chemistry ------------------------------------------------------------------

def kappa2_of(ps: ParameterSet, tag, c1):
    """Diffusional conductivity (2 R T0 / F) kappa_1(c1) (1 - t_plus)."""
    val, _ = kappa_pair(ps, tag, c1)
    return val[1]


def kappa_pair(ps: ParameterSet, tag, c1):
    """Return ``((kappa1, kappa2), (dkappa1/dc1, dkappa2/dc1))``."""
    c1 = np.asarray(c1, dtype=float)
    if np.any(~(c1 > 0.0)):
        raise DomainError("c1 must be positive", tag, "c1", int(np.argmin(c1)) if c1.ndim else None)
    k1, dk1 = ps.region(tag).kappa1.eval(c1)
    s = 2.0 * ps.R * ps.T0 / ps.F * (1.0 - ps.t_plus)
    return (k1, s * k1), (dk1, s * dk1)


def butler_volmer(ps: ParameterSet, tag, c1, c2_surf, eta):
    """Butler-Volmer reaction rate and its exact partial derivatives.

    Parameters
    ----------
    ps : ParameterSet
    tag : SubdomainTag
        Electrode the evaluation belongs to.
    c1, c2_surf, eta : array_like
        Electrolyte concentration, particle surface concentration and
        overpotential; broadcast against each other.

    Returns
    -------
    J, dJ_dc1, dJ_dc2, dJ_deta : ndarray

    Raises
    ------
    DomainError
        If ``c1 <= 0``, ``c2_surf`` is outside ``(0, c2max)`` or the
        exponentials overflow.
    """
    el = ps.electrode(tag)
    c1, c2, eta = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (c1, c2_surf, eta)))
    bad = ~(c1 > 0.0)
    if bad.any():
        raise DomainError("c1 must be positive", tag, "c1", int(np.flatnonzero(bad)[0]))
    gap = el.c2max - c2
    bad = ~((c2 > 0.0) & (gap > 0.0))
    if bad.any():
        raise DomainError("c2_surf out of (0, c2max)", tag, "c2_surf", int(np.flatnonzero(bad)[0]))
    aa, ac, f = el.alpha_a, el.alpha_c, ps.f
    with np.errstate(over="ignore"):
        ea = np.exp(aa * f * eta)
        ec = np.exp(-ac * f * eta)
    if not (np.all(np.isfinite(ea)) and np.all(np.isfinite(ec))):
        raise DomainError("overpotential too large for the kinetics", tag, "eta")
    pref = el.bv_k * c1**aa * gap**aa * c2**ac
    J = pref * (ea - ec)
    dJ_dc1 = aa * J / c1
    dJ_dc2 = J * (ac / c2 - aa / gap)
    dJ_deta = pref * f * (aa * ea + ac * ec)
    return J, dJ_dc1, dJ_dc2, dJ_deta


def ocp_pair(ps: ParameterSet, tag, c2_surf):
    """Open-circuit potential U(c2/c2max) and dU/dc2."""
    el = ps.electrode(tag)
    c2 = np.asarray(c2_surf, dtype=float)
    bad = ~((c2 > 0.0) & (c2 < el.c2max))
    if bad.any():
        raise DomainError("c2_surf out of (0, c2max)", tag, "c2_surf", int(np.flatnonzero(bad.ravel())[0]))
    u, du = el.ocp.eval(c2 / el.c2max)
    return u, du / el.c2max


def overpotential(ps: ParameterSet, tag, phi1, phi2, c2_surf):
    """eta = phi2 - phi1 - U(c2_surf / c2max)."""
    u, _ = ocp_pair(ps, tag, c2_surf)
    return np.asarray(phi2, dtype=float) - np.asarray(phi1, dtype=float) - u

"""Grounded hinge-loss energy models over [0,1] target variables.

A grounded model is a weighted sum of hinged linear potentials plus hard
linear inequality constraints. Each potential reads three input kinds:
target variables y (the free variables of inference), fixed symbolic inputs
x, and neural slot values g. Potentials are grouped into partitions that
share a single nonnegative weight, so the energy is

    E(y, g) = w_sy . Phi(y, g),   Phi[i] = sum of potential values in
                                           partition i,

and the feasible set is the unit box intersected with the hard constraints.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ModelError",
    "HingePotential",
    "HardConstraint",
    "GroundedModel",
    "validate",
    "check_target",
    "potential_value",
    "potential_vector",
    "energy",
    "is_feasible",
    "replace_weights",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]


class ModelError(ValueError):
    """Raised when a grounded model or target vector fails validation."""


def _coeffs(obj) -> dict[int, float]:
    # accepts {int: float} or JSON-style {str: float}; rejects junk keys
    out = {}
    for k, v in dict(obj).items():
        out[int(k)] = float(v)
    return out


@dataclass(frozen=True)
class HingePotential:
    """One term (max{a_y.y + a_x.x + a_g.g + b, 0})^p of the energy."""

    y: dict[int, float] = field(default_factory=dict)
    x: dict[int, float] = field(default_factory=dict)
    g: dict[int, float] = field(default_factory=dict)
    b: float = 0.0
    p: int = 1
    partition: int = 0

    def __post_init__(self):
        object.__setattr__(self, "y", _coeffs(self.y))
        object.__setattr__(self, "x", _coeffs(self.x))
        object.__setattr__(self, "g", _coeffs(self.g))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "partition", int(self.partition))


@dataclass(frozen=True)
class HardConstraint:
    """Linear inequality a_y.y + a_x.x + a_g.g + b <= 0 on the targets."""

    y: dict[int, float] = field(default_factory=dict)
    x: dict[int, float] = field(default_factory=dict)
    g: dict[int, float] = field(default_factory=dict)
    b: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "y", _coeffs(self.y))
        object.__setattr__(self, "x", _coeffs(self.x))
        object.__setattr__(self, "g", _coeffs(self.g))
        object.__setattr__(self, "b", float(self.b))


@dataclass
class GroundedModel:
    n_y: int
    x_sy: np.ndarray
    n_g: int
    r: int
    w_sy: np.ndarray
    potentials: list[HingePotential]
    constraints: list[HardConstraint]

    def __post_init__(self):
        self.n_y = int(self.n_y)
        self.n_g = int(self.n_g)
        self.r = int(self.r)
        self.x_sy = np.asarray(self.x_sy, dtype=float)
        self.w_sy = np.asarray(self.w_sy, dtype=float)
        self.potentials = list(self.potentials)
        self.constraints = list(self.constraints)

    # method aliases for the module-level helpers
    def validate(self):
        validate(self)

    def replace_weights(self, w_sy):
        return replace_weights(self, w_sy)


def _check_term(term, model: GroundedModel, what: str, idx: int):
    for j, a in term.y.items():
        if not 0 <= j < model.n_y:
            raise ModelError(f"{what} {idx}: target index {j} out of range")
        if not np.isfinite(a):
            raise ModelError(f"{what} {idx}: non-finite target coefficient")
    for j, a in term.x.items():
        if not 0 <= j < len(model.x_sy):
            raise ModelError(f"{what} {idx}: symbolic-input index {j} out of range")
        if not np.isfinite(a):
            raise ModelError(f"{what} {idx}: non-finite input coefficient")
    for j, a in term.g.items():
        if not 0 <= j < model.n_g:
            raise ModelError(f"{what} {idx}: neural-slot index {j} out of range")
        if not np.isfinite(a):
            raise ModelError(f"{what} {idx}: non-finite slot coefficient")
    if not np.isfinite(term.b):
        raise ModelError(f"{what} {idx}: non-finite offset")
    if not (term.y or term.x or term.g):
        raise ModelError(f"{what} {idx}: all coefficient maps are empty")


def validate(model: GroundedModel):
    """Raise ModelError unless the model is structurally sound."""
    if model.n_y < 0 or model.n_g < 0:
        raise ModelError("n_y and n_g must be nonnegative")
    if model.x_sy.ndim != 1:
        raise ModelError("x_sy must be a flat array")
    if model.x_sy.size and (model.x_sy.min() < -1e-9 or model.x_sy.max() > 1 + 1e-9):
        raise ModelError("symbolic inputs must lie in [0,1]")
    if model.r != len(model.w_sy):
        raise ModelError("r must equal len(w_sy)")
    if model.w_sy.size and (not np.all(np.isfinite(model.w_sy)) or model.w_sy.min() < 0):
        raise ModelError("weights must be finite and nonnegative")
    for k, pot in enumerate(model.potentials):
        _check_term(pot, model, "potential", k)
        if pot.p not in (1, 2):
            raise ModelError(f"potential {k}: exponent must be 1 or 2")
        if not 0 <= pot.partition < model.r:
            raise ModelError(f"potential {k}: partition {pot.partition} out of range")
    for k, con in enumerate(model.constraints):
        _check_term(con, model, "constraint", k)


def check_target(model: GroundedModel, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (model.n_y,):
        raise ModelError(f"target vector must have shape ({model.n_y},)")
    if y.size and (y.min() < -1e-9 or y.max() > 1 + 1e-9):
        raise ModelError("target values must lie in [0,1]")
    return y


def _affine(term, y, x, g) -> float:
    v = term.b
    for j, a in term.y.items():
        v += a * y[j]
    for j, a in term.x.items():
        v += a * x[j]
    if term.g:
        if g is None:
            raise ModelError("model uses neural slots but no g values were given")
        for j, a in term.g.items():
            v += a * g[j]
    return v


def potential_value(pot: HingePotential, y, x, g=None) -> float:
    """Hinged value (max{a.inputs + b, 0})^p of one potential."""
    h = max(_affine(pot, y, x, g), 0.0)
    return h * h if pot.p == 2 else h


def potential_vector(model: GroundedModel, y, g=None, x_sy=None) -> np.ndarray:
    """Partition-aggregated potential values Phi(y, g), shape (r,)."""
    x = model.x_sy if x_sy is None else np.asarray(x_sy, dtype=float)
    phi = np.zeros(model.r)
    for pot in model.potentials:
        phi[pot.partition] += potential_value(pot, y, x, g)
    return phi


def energy(model: GroundedModel, y, g=None, x_sy=None, w_sy=None) -> float:
    w = model.w_sy if w_sy is None else np.asarray(w_sy, dtype=float)
    return float(w @ potential_vector(model, y, g, x_sy))


def is_feasible(model: GroundedModel, y, g=None, x_sy=None, tol=1e-9) -> bool:
    """Box membership plus every hard constraint within tol."""
    y = np.asarray(y, dtype=float)
    if y.shape != (model.n_y,):
        return False
    if y.size and (y.min() < -tol or y.max() > 1 + tol):
        return False
    x = model.x_sy if x_sy is None else np.asarray(x_sy, dtype=float)
    for con in model.constraints:
        if _affine(con, y, x, g) > tol:
            return False
    return True


def replace_weights(model: GroundedModel, w_sy) -> GroundedModel:
    w = np.asarray(w_sy, dtype=float)
    if w.shape != (model.r,):
        raise ModelError("weight vector has the wrong length")
    return replace(model, w_sy=w)


# ---------------------------------------------------------------------------
# file format

def _term_dict(term) -> dict:
    d = {
        "y": {str(k): v for k, v in term.y.items()},
        "x": {str(k): v for k, v in term.x.items()},
        "g": {str(k): v for k, v in term.g.items()},
        "b": term.b,
    }
    if isinstance(term, HingePotential):
        d["p"] = term.p
        d["partition"] = term.partition
    return d


def model_to_dict(model: GroundedModel) -> dict:
    return {
        "n_y": model.n_y,
        "x_sy": [float(v) for v in model.x_sy],
        "n_g": model.n_g,
        "r": model.r,
        "w_sy": [float(v) for v in model.w_sy],
        "potentials": [_term_dict(p) for p in model.potentials],
        "constraints": [_term_dict(c) for c in model.constraints],
    }


def model_from_dict(d: dict) -> GroundedModel:
    try:
        model = GroundedModel(
            n_y=d["n_y"],
            x_sy=np.asarray(d.get("x_sy", []), dtype=float),
            n_g=d.get("n_g", 0),
            r=d["r"],
            w_sy=np.asarray(d["w_sy"], dtype=float),
            potentials=[
                HingePotential(
                    y=p.get("y", {}), x=p.get("x", {}), g=p.get("g", {}),
                    b=p.get("b", 0.0), p=p.get("p", 1),
                    partition=p.get("partition", 0),
                )
                for p in d.get("potentials", [])
            ],
            constraints=[
                HardConstraint(
                    y=c.get("y", {}), x=c.get("x", {}), g=c.get("g", {}),
                    b=c.get("b", 0.0),
                )
                for c in d.get("constraints", [])
            ],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed model document: {exc}") from exc
    validate(model)
    return model


def save_model(model: GroundedModel, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> GroundedModel:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: not valid JSON: {exc}") from exc
    return model_from_dict(d)

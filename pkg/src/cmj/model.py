"""Reproduction models: displacement laws, clutches, offspring laws.

A model has ``p`` types labelled ``1..p``.  Each type carries a finite mixture
of clutches; a clutch lists ``(child_type, count, displacement)`` entries and
every one of the ``count`` children draws an independent displacement.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np

SCHEMA_VERSION = 1


class ModelError(ValueError):
    """Malformed model description; ``path`` points into the JSON document."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


# --------------------------------------------------------------------------
# displacement laws
# --------------------------------------------------------------------------

# integer codes shared with the numba simulation kernel
KIND_DETERMINISTIC = 0
KIND_EXPONENTIAL = 1
KIND_GAMMA = 2
KIND_UNIFORM = 3
KIND_TILTED_UNIFORM = 4


@dataclass(frozen=True)
class Deterministic:
    value: float

    kind = "deterministic"
    code = KIND_DETERMINISTIC

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ModelError(f"deterministic displacement must be >= 0, got {self.value}")

    @property
    def params(self) -> tuple[float, float]:
        return (self.value, 0.0)

    @property
    def mean(self) -> float:
        return self.value

    def laplace(self, theta: float) -> float:
        return math.exp(-theta * self.value)

    def laplace_derivative(self, theta: float) -> float:
        return -self.value * math.exp(-theta * self.value)

    def cdf(self, t: float) -> float:
        return 1.0 if t >= self.value else 0.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.value)

    def tilted(self, alpha: float) -> "DisplacementLaw":
        return self

    def to_json(self) -> dict:
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class Exponential:
    rate: float

    kind = "exponential"
    code = KIND_EXPONENTIAL

    def __post_init__(self):
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise ModelError(f"exponential rate must be > 0, got {self.rate}")

    @property
    def params(self) -> tuple[float, float]:
        return (self.rate, 0.0)

    @property
    def mean(self) -> float:
        return 1.0 / self.rate

    def laplace(self, theta: float) -> float:
        return self.rate / (self.rate + theta)

    def laplace_derivative(self, theta: float) -> float:
        return -self.rate / (self.rate + theta) ** 2

    def cdf(self, t: float) -> float:
        return -math.expm1(-self.rate * t) if t > 0 else 0.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.exponential(1.0 / self.rate, size)

    def tilted(self, alpha: float) -> "DisplacementLaw":
        return Exponential(self.rate + alpha)

    def to_json(self) -> dict:
        return {"kind": self.kind, "rate": self.rate}


@dataclass(frozen=True)
class Gamma:
    shape: float
    rate: float

    kind = "gamma"
    code = KIND_GAMMA

    def __post_init__(self):
        if not (math.isfinite(self.shape) and self.shape > 0):
            raise ModelError(f"gamma shape must be > 0, got {self.shape}")
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise ModelError(f"gamma rate must be > 0, got {self.rate}")

    @property
    def params(self) -> tuple[float, float]:
        return (self.shape, self.rate)

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    def laplace(self, theta: float) -> float:
        return (self.rate / (self.rate + theta)) ** self.shape

    def laplace_derivative(self, theta: float) -> float:
        return -self.shape / (self.rate + theta) * self.laplace(theta)

    def cdf(self, t: float) -> float:
        if t <= 0:
            return 0.0
        from scipy.special import gammainc

        return float(gammainc(self.shape, self.rate * t))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.gamma(self.shape, 1.0 / self.rate, size)

    def tilted(self, alpha: float) -> "DisplacementLaw":
        return Gamma(self.shape, self.rate + alpha)

    def to_json(self) -> dict:
        return {"kind": self.kind, "shape": self.shape, "rate": self.rate}


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    kind = "uniform"
    code = KIND_UNIFORM

    def __post_init__(self):
        if not (math.isfinite(self.low) and self.low >= 0):
            raise ModelError(f"uniform low must be >= 0, got {self.low}")
        if not (math.isfinite(self.high) and self.high > self.low):
            raise ModelError(f"uniform high must exceed low, got [{self.low}, {self.high}]")

    @property
    def params(self) -> tuple[float, float]:
        return (self.low, self.high)

    @property
    def mean(self) -> float:
        return 0.5 * (self.low + self.high)

    def laplace(self, theta: float) -> float:
        a, b = self.low, self.high
        x = theta * (b - a)
        if x < 1e-8:
            # series of (1 - e^{-x})/x about 0
            return math.exp(-theta * a) * (1.0 - x / 2.0 + x * x / 6.0)
        return math.exp(-theta * a) * (-math.expm1(-x)) / x

    def laplace_derivative(self, theta: float) -> float:
        a, b = self.low, self.high
        w = b - a
        x = theta * w
        if x < 1e-5:
            # d/dθ of e^{-θa}(1 - x/2 + x²/6 - x³/24)
            g = 1.0 - x / 2.0 + x * x / 6.0 - x**3 / 24.0
            dg = w * (-0.5 + x / 3.0 - x * x / 8.0)
            return math.exp(-theta * a) * (dg - a * g)
        # L(θ) = (e^{-θa} - e^{-θb}) / (θ w)
        num = math.exp(-theta * a) - math.exp(-theta * b)
        dnum = -a * math.exp(-theta * a) + b * math.exp(-theta * b)
        return (dnum * theta - num) / (theta * theta * w)

    def cdf(self, t: float) -> float:
        if t <= self.low:
            return 0.0
        if t >= self.high:
            return 1.0
        return (t - self.low) / (self.high - self.low)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size)

    def tilted(self, alpha: float) -> "DisplacementLaw":
        if alpha == 0:
            return self
        return TiltedUniform(self.low, self.high, alpha)

    def to_json(self) -> dict:
        return {"kind": self.kind, "low": self.low, "high": self.high}


@dataclass(frozen=True)
class TiltedUniform:
    """Density proportional to ``exp(-tilt * t)`` on ``[low, high]``.

    Only arises as the exponential tilt of :class:`Uniform`; it is not part of
    the model JSON schema.
    """

    low: float
    high: float
    tilt: float

    kind = "tilted_uniform"
    code = KIND_TILTED_UNIFORM

    @property
    def params(self) -> tuple[float, float]:
        return (self.low, self.high)

    @property
    def _norm(self) -> float:
        return -math.expm1(-self.tilt * (self.high - self.low))

    @property
    def mean(self) -> float:
        w = self.high - self.low
        lam = self.tilt
        # mean of an exponential(lam) truncated to [0, w], shifted by low
        return self.low + 1.0 / lam - w * math.exp(-lam * w) / self._norm

    def laplace(self, theta: float) -> float:
        base = Uniform(self.low, self.high)
        return base.laplace(theta + self.tilt) / base.laplace(self.tilt)

    def laplace_derivative(self, theta: float) -> float:
        base = Uniform(self.low, self.high)
        return base.laplace_derivative(theta + self.tilt) / base.laplace(self.tilt)

    def cdf(self, t: float) -> float:
        if t <= self.low:
            return 0.0
        if t >= self.high:
            return 1.0
        return -math.expm1(-self.tilt * (t - self.low)) / self._norm

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size)
        return self.low - np.log1p(-u * self._norm) / self.tilt

    def tilted(self, alpha: float) -> "DisplacementLaw":
        return TiltedUniform(self.low, self.high, self.tilt + alpha)

    def to_json(self) -> dict:
        return {"kind": self.kind, "low": self.low, "high": self.high, "tilt": self.tilt}


DisplacementLaw = Union[Deterministic, Exponential, Gamma, Uniform, TiltedUniform]


def laplace(law: DisplacementLaw, theta: float) -> float:
    """``E[exp(-theta X)]`` in closed form."""
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    return law.laplace(theta)


def laplace_derivative(law: DisplacementLaw, theta: float) -> float:
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    return law.laplace_derivative(theta)


def cdf(law: DisplacementLaw, t: float) -> float:
    return law.cdf(t)


# --------------------------------------------------------------------------
# clutches and models
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClutchEntry:
    child_type: int
    count: int
    displacement: DisplacementLaw


@dataclass(frozen=True)
class Clutch:
    weight: float
    entries: tuple[ClutchEntry, ...] = ()

    @property
    def size(self) -> int:
        return sum(e.count for e in self.entries)


@dataclass(frozen=True)
class OffspringLaw:
    clutches: tuple[Clutch, ...]

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.clutches])

    @property
    def max_clutch(self) -> int:
        return max(c.size for c in self.clutches)

    @property
    def mean_count(self) -> float:
        return sum(c.weight * c.size for c in self.clutches)


@dataclass(frozen=True)
class ModelSpec:
    p: int
    laws: tuple[OffspringLaw, ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.p < 1:
            raise ModelError("number of types must be >= 1", "$.types")
        if len(self.laws) != self.p:
            raise ModelError(f"expected {self.p} offspring laws, got {len(self.laws)}", "$.laws")
        for i, law in enumerate(self.laws):
            base = f"$.laws[{i}]"
            if not law.clutches:
                raise ModelError("empty clutch list", base)
            for c_idx, clutch in enumerate(law.clutches):
                if not (clutch.weight > 0 and math.isfinite(clutch.weight)):
                    raise ModelError(f"weight must be positive, got {clutch.weight}", f"{base}[{c_idx}].weight")
                for e_idx, entry in enumerate(clutch.entries):
                    path = f"{base}[{c_idx}].clutch[{e_idx}]"
                    if not 1 <= entry.child_type <= self.p:
                        raise ModelError(f"child type {entry.child_type} outside 1..{self.p}", path + ".type")
                    if entry.count < 1:
                        raise ModelError(f"count must be >= 1, got {entry.count}", path + ".count")
            total = float(sum(c.weight for c in law.clutches))
            if abs(total - 1.0) > 1e-12:
                raise ModelError(f"clutch weights sum to {total!r}, not 1", base)

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "types": self.p,
            "laws": [
                [
                    {
                        "weight": c.weight,
                        "clutch": [
                            {"type": e.child_type, "count": e.count, "displacement": e.displacement.to_json()}
                            for e in c.entries
                        ],
                    }
                    for c in law.clutches
                ]
                for law in self.laws
            ],
        }

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def all_deterministic(self) -> bool:
        return all(
            isinstance(e.displacement, Deterministic)
            for law in self.laws
            for c in law.clutches
            for e in c.entries
        )


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------


def _number(obj: Any, key: str, path: str) -> float:
    if key not in obj:
        raise ModelError(f"missing field {key!r}", path)
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ModelError(f"expected a number, got {val!r}", f"{path}.{key}")
    return float(val)


def _integer(obj: Any, key: str, path: str) -> int:
    if key not in obj:
        raise ModelError(f"missing field {key!r}", path)
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ModelError(f"expected an integer, got {val!r}", f"{path}.{key}")
    return val


def parse_displacement(obj: Any, path: str = "$") -> DisplacementLaw:
    if not isinstance(obj, dict):
        raise ModelError("displacement must be an object", path)
    kind = obj.get("kind")
    try:
        if kind == "deterministic":
            return Deterministic(_number(obj, "value", path))
        if kind == "exponential":
            return Exponential(_number(obj, "rate", path))
        if kind == "gamma":
            return Gamma(_number(obj, "shape", path), _number(obj, "rate", path))
        if kind == "uniform":
            return Uniform(_number(obj, "low", path), _number(obj, "high", path))
    except ModelError as exc:
        if exc.path == "$":
            raise ModelError(str(exc).split(": ", 1)[1], path) from None
        raise
    raise ModelError(f"unknown displacement kind {kind!r}", f"{path}.kind")


def parse_model(doc: Any, name: str = "") -> ModelSpec:
    """Build a :class:`ModelSpec` from a decoded JSON document."""
    if not isinstance(doc, dict):
        raise ModelError("model must be a JSON object")
    schema = doc.get("schema")
    if schema != SCHEMA_VERSION:
        raise ModelError(f"unsupported schema {schema!r}, expected {SCHEMA_VERSION}", "$.schema")
    p = _integer(doc, "types", "$")
    if p < 1:
        raise ModelError("number of types must be >= 1", "$.types")
    raw_laws = doc.get("laws")
    if not isinstance(raw_laws, list):
        raise ModelError("expected a list of offspring laws", "$.laws")
    laws = []
    for i, raw_law in enumerate(raw_laws):
        base = f"$.laws[{i}]"
        if not isinstance(raw_law, list):
            raise ModelError("expected a list of clutches", base)
        if not raw_law:
            raise ModelError("empty clutch list", base)
        clutches = []
        for c_idx, raw_clutch in enumerate(raw_law):
            cpath = f"{base}[{c_idx}]"
            if not isinstance(raw_clutch, dict):
                raise ModelError("clutch must be an object", cpath)
            weight = _number(raw_clutch, "weight", cpath)
            raw_entries = raw_clutch.get("clutch", [])
            if not isinstance(raw_entries, list):
                raise ModelError("expected a list of entries", cpath + ".clutch")
            entries = []
            for e_idx, raw in enumerate(raw_entries):
                epath = f"{cpath}.clutch[{e_idx}]"
                if not isinstance(raw, dict):
                    raise ModelError("entry must be an object", epath)
                child_type = _integer(raw, "type", epath)
                count = _integer(raw, "count", epath)
                if not 1 <= child_type <= p:
                    raise ModelError(f"child type {child_type} outside 1..{p}", epath + ".type")
                if count < 1:
                    raise ModelError(f"count must be >= 1, got {count}", epath + ".count")
                if "displacement" not in raw:
                    raise ModelError("missing field 'displacement'", epath)
                disp = parse_displacement(raw["displacement"], epath + ".displacement")
                entries.append(ClutchEntry(child_type, count, disp))
            clutches.append(Clutch(weight, tuple(entries)))
        laws.append(OffspringLaw(tuple(clutches)))
    return ModelSpec(p, tuple(laws), name=name)


def load_model(path: str | Path) -> ModelSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON: {exc}") from None
    return parse_model(doc, name=path.stem)


def dump_model(spec: ModelSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=2) + "\n")


# --------------------------------------------------------------------------
# first-generation sampling (numpy, used for Monte Carlo diagnostics)
# --------------------------------------------------------------------------


@dataclass
class FirstGeneration:
    """Flattened children of ``n`` independent type-``i`` individuals."""

    n: int
    owner: np.ndarray  # sample index of each child
    child_type: np.ndarray  # 1-based
    displacement: np.ndarray


def sample_first_generation(spec: ModelSpec, i: int, n: int, rng: np.random.Generator) -> FirstGeneration:
    law = spec.laws[i - 1]
    choice = rng.choice(len(law.clutches), size=n, p=law.weights / law.weights.sum())
    owners, types, disps = [], [], []
    for c_idx, clutch in enumerate(law.clutches):
        who = np.flatnonzero(choice == c_idx)
        if who.size == 0:
            continue
        for entry in clutch.entries:
            rep = np.repeat(who, entry.count)
            owners.append(rep)
            types.append(np.full(rep.size, entry.child_type))
            disps.append(entry.displacement.sample(rng, rep.size))
    if not owners:
        empty = np.empty(0)
        return FirstGeneration(n, empty.astype(np.int64), empty.astype(np.int64), empty)
    owner = np.concatenate(owners)
    order = np.argsort(owner, kind="stable")
    return FirstGeneration(
        n, owner[order], np.concatenate(types)[order], np.concatenate(disps)[order]
    )


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


@dataclass
class ValidationReport:
    irreducible: bool
    rho0: float
    supercritical: bool
    lattice_warning: bool
    a5: list[dict] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "irreducible": self.irreducible,
            "rho0": self.rho0,
            "supercritical": self.supercritical,
            "lattice_warning": self.lattice_warning,
            "a5": self.a5,
            "errors": self.errors,
            "warnings": self.warnings,
        }


def support_graph(spec: ModelSpec) -> np.ndarray:
    adj = np.zeros((spec.p, spec.p), dtype=bool)
    for i, law in enumerate(spec.laws):
        for c in law.clutches:
            for e in c.entries:
                adj[i, e.child_type - 1] = True
    return adj


def is_irreducible(spec: ModelSpec) -> bool:
    adj = support_graph(spec)
    reach = adj | np.eye(spec.p, dtype=bool)
    # transitive closure by repeated squaring
    for _ in range(max(1, int(math.ceil(math.log2(spec.p))) + 1)):
        reach = reach | ((reach.astype(np.int64) @ reach.astype(np.int64)) > 0)
    return bool(reach.all())


def validate(spec: ModelSpec, seed: int = 0, a5_samples: int = 100_000) -> ValidationReport:
    """Check the standing assumptions that can be checked.

    Weight/count problems raise :class:`ModelError` when the ModelSpec is built;
    structural problems (reducibility, subcriticality) land in ``errors``.
    """
    from .spectral import malthusian, pf_eigen, repro_matrix, SpectralError

    irreducible = is_irreducible(spec)
    M0 = repro_matrix(spec, 0.0)
    rho0 = float(np.max(np.abs(np.linalg.eigvals(M0))))
    errors: list[str] = []
    warnings: list[str] = []
    if not irreducible:
        errors.append("M(0) is reducible: some type cannot reach another")
    else:
        try:
            rho0, _, _ = pf_eigen(M0)
        except SpectralError as exc:
            errors.append(str(exc))
    supercritical = irreducible and rho0 > 1.0 + 1e-12
    if irreducible and not supercritical:
        errors.append(f"not supercritical: rho(0) = {rho0:.12g} <= 1")
    lattice = spec.all_deterministic()
    if lattice:
        warnings.append("every displacement is deterministic: the process may be lattice")

    a5: list[dict] = []
    if supercritical:
        try:
            spectral = malthusian(spec)
        except SpectralError as exc:
            errors.append(str(exc))
        else:
            ss = np.random.SeedSequence(seed)
            for i, child_ss in enumerate(ss.spawn(spec.p), start=1):
                rng = np.random.default_rng(child_ss)
                gen = sample_first_generation(spec, i, a5_samples, rng)
                x = np.bincount(
                    gen.owner, weights=np.exp(-spectral.alpha * gen.displacement), minlength=a5_samples
                )
                y = x * np.log(np.maximum(x, 1.0))
                a5.append(
                    {
                        "type": i,
                        "mean_x_log_x": float(y.mean()),
                        "se": float(y.std(ddof=1) / math.sqrt(a5_samples)),
                        "samples": a5_samples,
                    }
                )
    return ValidationReport(irreducible, float(rho0), supercritical, lattice, a5, errors, warnings)


# --------------------------------------------------------------------------
# bundled models
# --------------------------------------------------------------------------

BUNDLED = ("binary_exp", "binary_det", "alternating", "three_type", "single_mixed")


def bundled_path(name: str) -> Path:
    from importlib.resources import files

    return Path(str(files("cmj") / "models" / f"{name}.json"))


def bundled_model(name: str) -> ModelSpec:
    """Load one of the models shipped with the package (see ``BUNDLED``)."""
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled model {name!r}; choose from {', '.join(BUNDLED)}")
    return load_model(bundled_path(name))


def resolve_model(ref: str) -> ModelSpec:
    """A path to a model JSON file, or the name of a bundled model."""
    if ref in BUNDLED and not Path(ref).exists():
        return bundled_model(ref)
    if not Path(ref).exists():
        raise ModelError(f"no model file {ref!r} and no bundled model of that name ({', '.join(BUNDLED)})")
    return load_model(ref)

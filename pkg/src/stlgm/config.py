"""TOML run configuration: parsing, validation, and re-emission.

Validation walks the whole document before reporting, so one pass surfaces
every problem: unknown keys anywhere are hard errors, and all messages are
joined into a single SchemaError. Each command requires only its own
blocks; load_config accepts any subset and the CLI checks for the blocks
it needs.

emit_toml writes a restricted TOML dialect (strings, booleans, integers,
floats, homogeneous arrays, nested tables) chosen so that the manifest's
echoed configuration re-parses to exactly the mapping that was emitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import tomli

from .covariance import ComponentPriors, GammaPrior, NormalPrior, PriorSpec
from .errors import SchemaError

__all__ = [
    "DataConfig",
    "ModelConfig",
    "McmcConfig",
    "PredictConfig",
    "CvConfig",
    "HtConfig",
    "VariogramConfig",
    "SimulateConfig",
    "RunConfig",
    "load_config",
    "parse_config",
    "emit_toml",
]


@dataclass(frozen=True)
class DataConfig:
    path: str
    root: int


@dataclass(frozen=True)
class ModelConfig:
    components: int
    neighbors: int
    jitter: Optional[float]


@dataclass(frozen=True)
class McmcConfig:
    iterations: int
    burn_in: Optional[int]
    thin: int
    seed: int


@dataclass(frozen=True)
class PredictConfig:
    posterior_y: str
    fields_y: str
    posterior_z: str
    fields_z: str
    region: List[Tuple[float, float]]
    spacing: float
    years: List[float]
    seed: int
    change: Optional[Tuple[float, float]]


@dataclass(frozen=True)
class CvConfig:
    folds: int
    seed: int


@dataclass(frozen=True)
class HtConfig:
    cycles: List[float]


@dataclass(frozen=True)
class VariogramConfig:
    space_edges: List[float]
    time_edges: List[float]


@dataclass(frozen=True)
class SimulateConfig:
    n_plots: int
    extent: float
    years: List[float]
    visits: int
    root: int
    seed: int
    alpha_y: float
    tau: float
    sigma: List[float]
    phi: List[float]
    lam: List[float]
    alpha_z: Optional[float]
    z_sigma: Optional[List[float]]
    z_phi: Optional[List[float]]
    z_lam: Optional[List[float]]


@dataclass(frozen=True)
class RunConfig:
    data: Optional[DataConfig]
    model: Optional[ModelConfig]
    priors_y: Optional[PriorSpec]
    priors_z: Optional[PriorSpec]
    mcmc: Optional[McmcConfig]
    predict: Optional[PredictConfig]
    cv: Optional[CvConfig]
    ht: Optional[HtConfig]
    variogram: Optional[VariogramConfig]
    simulate: Optional[SimulateConfig]
    raw: dict

    def require(self, command: str, *blocks: str):
        """Error listing every block the command needs but the file lacks."""
        missing = [b for b in blocks if getattr(self, b.replace(".", "_")) is None]
        if missing:
            named = ", ".join(f"[{b.replace('_', '.')}]" for b in missing)
            raise SchemaError(f"command {command!r} requires block(s) {named}")
        return self


# ------------------------------------------------------------- field checks

class _Errors:
    def __init__(self):
        self.items: List[str] = []

    def add(self, path: str, problem: str) -> None:
        self.items.append(f"{path}: {problem}")

    def raise_if_any(self) -> None:
        if self.items:
            raise SchemaError("; ".join(self.items))


def _finite_float(value, path, errs):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errs.add(path, f"expected a number, got {type(value).__name__}")
        return None
    value = float(value)
    if not math.isfinite(value):
        errs.add(path, "must be finite")
        return None
    return value


def _positive_float(value, path, errs):
    value = _finite_float(value, path, errs)
    if value is not None and value <= 0:
        errs.add(path, f"must be positive, got {value}")
        return None
    return value


def _non_negative_float(value, path, errs):
    value = _finite_float(value, path, errs)
    if value is not None and value < 0:
        errs.add(path, f"must be >= 0, got {value}")
        return None
    return value


def _integer(value, path, errs):
    if isinstance(value, bool) or not isinstance(value, int):
        errs.add(path, f"expected an integer, got {type(value).__name__}")
        return None
    return value


def _positive_int(value, path, errs):
    value = _integer(value, path, errs)
    if value is not None and value < 1:
        errs.add(path, f"must be >= 1, got {value}")
        return None
    return value


def _non_negative_int(value, path, errs):
    value = _integer(value, path, errs)
    if value is not None and value < 0:
        errs.add(path, f"must be >= 0, got {value}")
        return None
    return value


def _seed(value, path, errs):
    value = _integer(value, path, errs)
    if value is not None and value < 0:
        errs.add(path, f"must be >= 0, got {value}")
        return None
    return value


def _string(value, path, errs):
    if not isinstance(value, str) or not value:
        errs.add(path, "expected a non-empty string")
        return None
    return value


def _float_list(value, path, errs, minimum=1):
    if not isinstance(value, list) or len(value) < minimum:
        errs.add(path, f"expected a list of at least {minimum} number(s)")
        return None
    out = []
    for i, v in enumerate(value):
        f = _finite_float(v, f"{path}[{i}]", errs)
        if f is None:
            return None
        out.append(f)
    return out


def _increasing_list(value, path, errs, minimum=2):
    out = _float_list(value, path, errs, minimum=minimum)
    if out is None:
        return None
    if any(b <= a for a, b in zip(out, out[1:])):
        errs.add(path, "values must be strictly increasing")
        return None
    return out


def _pair(value, path, errs):
    out = _float_list(value, path, errs, minimum=2)
    if out is None:
        return None
    if len(out) != 2:
        errs.add(path, f"expected exactly two numbers, got {len(out)}")
        return None
    return (out[0], out[1])


def _mean_sd_pair(value, path, errs):
    pair = _pair(value, path, errs)
    if pair is None:
        return None
    if pair[0] <= 0 or pair[1] <= 0:
        errs.add(path, f"mean and sd must be positive, got {list(pair)}")
        return None
    return pair


def _ring(value, path, errs):
    if not isinstance(value, list) or len(value) < 3:
        errs.add(path, "expected at least three [x, y] vertices")
        return None
    out = []
    for i, v in enumerate(value):
        p = _pair(v, f"{path}[{i}]", errs)
        if p is None:
            return None
        out.append(p)
    return out


def _walk(block, path, fields, errs):
    """Check one table against {key: (required, checker)}; returns parsed."""
    if not isinstance(block, dict):
        errs.add(path, "expected a table")
        return None
    parsed = {}
    for key, value in block.items():
        if key not in fields:
            errs.add(f"{path}.{key}", "unknown key")
    for key, (required, checker) in fields.items():
        if key in block:
            parsed[key] = checker(block[key], f"{path}.{key}", errs)
        elif required:
            errs.add(f"{path}.{key}", "missing required key")
            parsed[key] = None
        else:
            parsed[key] = None
    return parsed


# ------------------------------------------------------------------ blocks

def _parse_data(block, errs):
    p = _walk(block, "data", {
        "path": (True, _string),
        "root": (True, _positive_int),
    }, errs)
    if p is None or any(v is None for v in (p["path"], p["root"])):
        return None
    return DataConfig(path=p["path"], root=p["root"])


def _parse_model(block, errs):
    p = _walk(block, "model", {
        "components": (True, _positive_int),
        "neighbors": (True, _positive_int),
        "jitter": (False, _non_negative_float),
    }, errs)
    if p is None or p["components"] is None or p["neighbors"] is None:
        return None
    return ModelConfig(components=p["components"], neighbors=p["neighbors"],
                       jitter=p["jitter"])


def _parse_mcmc(block, errs):
    p = _walk(block, "mcmc", {
        "iterations": (True, _positive_int),
        "burn_in": (False, _non_negative_int),
        "thin": (False, _positive_int),
        "seed": (True, _seed),
    }, errs)
    if p is None or p["iterations"] is None or p["seed"] is None:
        return None
    iterations = p["iterations"]
    burn_in = p["burn_in"]
    thin = p["thin"] if p["thin"] is not None else 1
    eff_burn = burn_in if burn_in is not None else iterations // 2
    if eff_burn > iterations:
        errs.add("mcmc.burn_in", f"exceeds iterations ({eff_burn} > {iterations})")
        return None
    if (iterations - eff_burn) % thin:
        errs.add(
            "mcmc.thin",
            f"iterations - burn_in ({iterations - eff_burn}) is not divisible "
            f"by thin ({thin})",
        )
        return None
    return McmcConfig(iterations=iterations, burn_in=burn_in, thin=thin,
                      seed=p["seed"])


def _parse_priors(block, label, want_tau, n_components, errs):
    fields = {
        "alpha_mean": (True, _finite_float),
        "alpha_sd": (True, _positive_float),
        "sigma": (True, lambda v, pa, e: _pair_table(v, pa, e)),
        "phi": (True, lambda v, pa, e: _pair_table(v, pa, e)),
        "lambda": (True, lambda v, pa, e: _pair_table(v, pa, e)),
    }
    if want_tau:
        fields["tau"] = (True, _mean_sd_pair)
    p = _walk(block, label, fields, errs)
    if p is None:
        return None
    needed = ["alpha_mean", "alpha_sd", "sigma", "phi", "lambda"]
    if want_tau:
        needed.append("tau")
    if any(p[k] is None for k in needed):
        return None
    comps = []
    for name in ("sigma", "phi", "lambda"):
        if len(p[name]) != n_components:
            errs.add(
                f"{label}.{name}",
                f"has {len(p[name])} entries but model.components = {n_components}",
            )
            return None
    for s, ph, lm in zip(p["sigma"], p["phi"], p["lambda"]):
        comps.append(ComponentPriors(
            sigma=GammaPrior(*s), phi=GammaPrior(*ph), lam=GammaPrior(*lm)
        ))
    return PriorSpec(
        alpha=NormalPrior(p["alpha_mean"], p["alpha_sd"]),
        components=tuple(comps),
        tau=GammaPrior(*p["tau"]) if want_tau else None,
    )


def _pair_table(value, path, errs):
    if not isinstance(value, list) or not value:
        errs.add(path, "expected a list of [mean, sd] pairs")
        return None
    out = []
    for i, v in enumerate(value):
        pair = _mean_sd_pair(v, f"{path}[{i}]", errs)
        if pair is None:
            return None
        out.append(pair)
    return out


def _parse_predict(block, errs):
    p = _walk(block, "predict", {
        "posterior_y": (True, _string),
        "fields_y": (True, _string),
        "posterior_z": (True, _string),
        "fields_z": (True, _string),
        "region": (True, _ring),
        "spacing": (True, _positive_float),
        "years": (True, lambda v, pa, e: _float_list(v, pa, e, minimum=1)),
        "seed": (True, _seed),
        "change": (False, _pair),
    }, errs)
    if p is None:
        return None
    needed = ["posterior_y", "fields_y", "posterior_z", "fields_z", "region",
              "spacing", "years", "seed"]
    if any(p[k] is None for k in needed):
        return None
    if p["change"] is not None:
        for year in p["change"]:
            if year not in p["years"]:
                errs.add("predict.change",
                         f"year {year} is not in predict.years")
                return None
    return PredictConfig(
        posterior_y=p["posterior_y"], fields_y=p["fields_y"],
        posterior_z=p["posterior_z"], fields_z=p["fields_z"],
        region=p["region"], spacing=p["spacing"], years=p["years"],
        seed=p["seed"], change=p["change"],
    )


def _parse_cv(block, errs):
    p = _walk(block, "cv", {
        "folds": (True, _positive_int),
        "seed": (True, _seed),
    }, errs)
    if p is None or p["folds"] is None or p["seed"] is None:
        return None
    if p["folds"] < 2:
        errs.add("cv.folds", f"must be >= 2, got {p['folds']}")
        return None
    return CvConfig(folds=p["folds"], seed=p["seed"])


def _parse_ht(block, errs):
    p = _walk(block, "ht", {
        "cycles": (True, lambda v, pa, e: _increasing_list(v, pa, e)),
    }, errs)
    if p is None or p["cycles"] is None:
        return None
    return HtConfig(cycles=p["cycles"])


def _parse_variogram(block, errs):
    p = _walk(block, "variogram", {
        "space_edges": (True, lambda v, pa, e: _increasing_list(v, pa, e)),
        "time_edges": (True, lambda v, pa, e: _increasing_list(v, pa, e)),
    }, errs)
    if p is None or p["space_edges"] is None or p["time_edges"] is None:
        return None
    return VariogramConfig(space_edges=p["space_edges"],
                           time_edges=p["time_edges"])


def _parse_simulate(block, errs):
    pos_list = lambda v, pa, e: _positive_list(v, pa, e)
    p = _walk(block, "simulate", {
        "n_plots": (True, _positive_int),
        "extent": (True, _positive_float),
        "years": (True, lambda v, pa, e: _float_list(v, pa, e, minimum=1)),
        "visits": (True, _positive_int),
        "root": (True, _positive_int),
        "seed": (True, _seed),
        "alpha_y": (True, _finite_float),
        "tau": (True, _non_negative_float),
        "sigma": (True, pos_list),
        "phi": (True, pos_list),
        "lambda": (True, pos_list),
        "alpha_z": (False, _finite_float),
        "z_sigma": (False, pos_list),
        "z_phi": (False, pos_list),
        "z_lambda": (False, pos_list),
    }, errs)
    if p is None:
        return None
    needed = ["n_plots", "extent", "years", "visits", "root", "seed",
              "alpha_y", "tau", "sigma", "phi", "lambda"]
    if any(p[k] is None for k in needed):
        return None
    if not (len(p["sigma"]) == len(p["phi"]) == len(p["lambda"])):
        errs.add("simulate.sigma", "sigma, phi, lambda must have equal length")
        return None
    z_keys = ("alpha_z", "z_sigma", "z_phi", "z_lambda")
    given = [k for k in z_keys if p[k] is not None]
    if given and len(given) != len(z_keys):
        errs.add("simulate.alpha_z",
                 "alpha_z, z_sigma, z_phi, z_lambda must be given together")
        return None
    if given and not (len(p["z_sigma"]) == len(p["z_phi"]) == len(p["z_lambda"])):
        errs.add("simulate.z_sigma",
                 "z_sigma, z_phi, z_lambda must have equal length")
        return None
    if p["visits"] > len(p["years"]):
        errs.add("simulate.visits",
                 f"exceeds the {len(p['years'])} available years")
        return None
    return SimulateConfig(
        n_plots=p["n_plots"], extent=p["extent"], years=p["years"],
        visits=p["visits"], root=p["root"], seed=p["seed"],
        alpha_y=p["alpha_y"], tau=p["tau"], sigma=p["sigma"], phi=p["phi"],
        lam=p["lambda"], alpha_z=p["alpha_z"], z_sigma=p["z_sigma"],
        z_phi=p["z_phi"], z_lam=p["z_lambda"],
    )


def _positive_list(value, path, errs):
    out = _float_list(value, path, errs, minimum=1)
    if out is None:
        return None
    bad = [v for v in out if v <= 0]
    if bad:
        errs.add(path, f"all values must be positive, got {bad}")
        return None
    return out


def parse_config(doc: dict) -> RunConfig:
    """Validate a parsed TOML mapping, reporting every problem at once."""
    errs = _Errors()
    if not isinstance(doc, dict):
        raise SchemaError("configuration must be a table at top level")
    known = {"data", "model", "priors", "mcmc", "predict", "cv", "ht",
             "variogram", "simulate"}
    for key in doc:
        if key not in known:
            errs.add(key, "unknown block")
    priors_y = priors_z = None
    if "priors" in doc:
        pr = doc["priors"]
        if not isinstance(pr, dict):
            errs.add("priors", "expected a table with y and/or z subtables")
        else:
            for key in pr:
                if key not in ("y", "z"):
                    errs.add(f"priors.{key}", "unknown block")
            n_comp = None
            if isinstance(doc.get("model"), dict):
                c = doc["model"].get("components")
                if isinstance(c, int) and not isinstance(c, bool) and c >= 1:
                    n_comp = c
            if n_comp is None:
                if "y" in pr or "z" in pr:
                    errs.add("model.components",
                             "needed to validate prior tables")
            else:
                if "y" in pr:
                    priors_y = _parse_priors(pr["y"], "priors.y", True,
                                             n_comp, errs)
                if "z" in pr:
                    priors_z = _parse_priors(pr["z"], "priors.z", False,
                                             n_comp, errs)
    sections = {
        "data": _parse_data, "model": _parse_model, "mcmc": _parse_mcmc,
        "predict": _parse_predict, "cv": _parse_cv, "ht": _parse_ht,
        "variogram": _parse_variogram, "simulate": _parse_simulate,
    }
    parsed = {}
    for name, parser in sections.items():
        parsed[name] = parser(doc[name], errs) if name in doc else None
    errs.raise_if_any()
    return RunConfig(
        data=parsed["data"], model=parsed["model"], priors_y=priors_y,
        priors_z=priors_z, mcmc=parsed["mcmc"], predict=parsed["predict"],
        cv=parsed["cv"], ht=parsed["ht"], variogram=parsed["variogram"],
        simulate=parsed["simulate"], raw=doc,
    )


def load_config(path) -> RunConfig:
    """Parse and validate a TOML configuration file."""
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise SchemaError(f"configuration is not valid TOML: {exc}") from exc
    return parse_config(doc)


# ----------------------------------------------------------------- emitter

_STRING_ESCAPES = {
    "\b": "\\b", "\t": "\\t", "\n": "\\n", "\f": "\\f", "\r": "\\r",
    '"': '\\"', "\\": "\\\\",
}


def _format_string(text: str) -> str:
    # json.dumps is close but wrong: it encodes astral characters as
    # surrogate pairs, which are not valid \u escapes in this format
    parts = ['"']
    for ch in text:
        if ch in _STRING_ESCAPES:
            parts.append(_STRING_ESCAPES[ch])
        elif ord(ch) < 0x20 or ord(ch) == 0x7F:
            parts.append(f"\\u{ord(ch):04X}")
        else:
            parts.append(ch)
    parts.append('"')
    return "".join(parts)


def _format_key(key: str) -> str:
    # bare keys are ASCII-only; isalnum alone would pass unicode letters
    if key and all(c.isascii() and (c.isalnum() or c in "-_") for c in key):
        return key
    return _format_string(key)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        text = repr(value)
        # a bare integer literal would re-parse as int; force a float form
        if "e" not in text and "E" not in text and "." not in text:
            text += ".0"
        return text
    if isinstance(value, str):
        return _format_string(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise SchemaError(f"cannot emit value of type {type(value).__name__}")


def _emit_table(out: List[str], table: dict, prefix: str) -> None:
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    if scalars and prefix:
        out.append(f"[{prefix}]")
    for key, value in scalars.items():
        out.append(f"{_format_key(key)} = {_format_value(value)}")
    if scalars:
        out.append("")
    for key, value in subtables.items():
        child = f"{prefix}.{_format_key(key)}" if prefix else _format_key(key)
        if not value:
            out.append(f"[{child}]")
            out.append("")
            continue
        _emit_table(out, value, child)


def emit_toml(doc: dict) -> str:
    """Serialize a mapping so tomli parses it back to an equal mapping."""
    out: List[str] = []
    _emit_table(out, doc, "")
    return "\n".join(out).rstrip() + "\n"

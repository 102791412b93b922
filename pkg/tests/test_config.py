"""Configuration schema walker and TOML emitter."""

import math

import pytest
import tomli
from hypothesis import given, settings
from hypothesis import strategies as st

from stlgm.config import emit_toml, load_config, parse_config
from stlgm.covariance import PriorSpec
from stlgm.errors import SchemaError


def full_doc():
    return {
        "data": {"path": "plots.csv", "root": 2},
        "model": {"components": 2, "neighbors": 15, "jitter": 1e-8},
        "priors": {
            "y": {
                "alpha_mean": 5.0,
                "alpha_sd": 10.0,
                "tau": [1.0, 1.0],
                "sigma": [[2.0, 1.9], [4.0, 3.9]],
                "phi": [[50.0, 10.0], [10.0, 5.0]],
                "lambda": [[100.0, 90.0], [100.0, 90.0]],
            },
            "z": {
                "alpha_mean": 1.5,
                "alpha_sd": 0.31622776601683794,
                "sigma": [[4.0, 3.9], [8.0, 7.9]],
                "phi": [[50.0, 10.0], [10.0, 5.0]],
                "lambda": [[100.0, 90.0], [100.0, 90.0]],
            },
        },
        "mcmc": {"iterations": 1000, "burn_in": 500, "thin": 5, "seed": 42},
        "predict": {
            "posterior_y": "y.csv",
            "fields_y": "y.bin",
            "posterior_z": "z.csv",
            "fields_z": "z.bin",
            "region": [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]],
            "spacing": 1.0,
            "years": [2000.0, 2005.0],
            "seed": 7,
            "change": [2000.0, 2005.0],
        },
        "cv": {"folds": 10, "seed": 3},
        "ht": {"cycles": [1999.0, 2004.0, 2009.0]},
        "variogram": {
            "space_edges": [0.0, 5.0, 10.0],
            "time_edges": [0.0, 2.0],
        },
        "simulate": {
            "n_plots": 100,
            "extent": 50.0,
            "years": [2000.0, 2001.0, 2002.0],
            "visits": 2,
            "root": 2,
            "seed": 1,
            "alpha_y": 5.0,
            "tau": 0.1,
            "sigma": [1.0, 0.5],
            "phi": [40.0, 8.0],
            "lambda": [90.0, 30.0],
            "alpha_z": 1.0,
            "z_sigma": [2.0],
            "z_phi": [20.0],
            "z_lambda": [50.0],
        },
    }


def test_full_document_parses():
    cfg = parse_config(full_doc())
    assert cfg.data.path == "plots.csv"
    assert cfg.data.root == 2
    assert cfg.model.components == 2
    assert cfg.model.jitter == 1e-8
    assert isinstance(cfg.priors_y, PriorSpec)
    assert cfg.priors_y.L == 2
    assert cfg.priors_y.tau is not None
    assert cfg.priors_z.tau is None
    assert cfg.priors_z.alpha.mean == 1.5
    assert cfg.priors_y.components[1].sigma.mean == 4.0
    assert cfg.mcmc.thin == 5
    assert cfg.predict.change == (2000.0, 2005.0)
    assert cfg.cv.folds == 10
    assert cfg.ht.cycles == [1999.0, 2004.0, 2009.0]
    assert cfg.simulate.z_lam == [50.0]
    assert cfg.raw is not None


def test_partial_document_leaves_other_blocks_none():
    cfg = parse_config({"data": {"path": "a.csv", "root": 1}})
    assert cfg.data is not None
    for name in ("model", "priors_y", "priors_z", "mcmc", "predict", "cv",
                 "ht", "variogram", "simulate"):
        assert getattr(cfg, name) is None


def test_all_errors_reported_in_one_pass():
    doc = full_doc()
    doc["data"]["root"] = 0
    doc["model"]["neighbors"] = "many"
    doc["cv"]["folds"] = 1
    doc["mcmc"]["seed"] = -4
    with pytest.raises(SchemaError) as exc:
        parse_config(doc)
    message = str(exc.value)
    for fragment in ("data.root", "model.neighbors", "cv.folds", "mcmc.seed"):
        assert fragment in message


def test_unknown_keys_flagged_at_every_level():
    doc = full_doc()
    doc["extra_block"] = {"a": 1}
    doc["data"]["compression"] = "gzip"
    doc["priors"]["w"] = {}
    doc["priors"]["y"]["nu"] = 1.0
    with pytest.raises(SchemaError) as exc:
        parse_config(doc)
    message = str(exc.value)
    assert "extra_block: unknown block" in message
    assert "data.compression: unknown key" in message
    assert "priors.w: unknown block" in message
    assert "priors.y.nu: unknown key" in message


def test_mcmc_thin_divisibility():
    doc = {"mcmc": {"iterations": 100, "burn_in": 50, "thin": 7, "seed": 0}}
    with pytest.raises(SchemaError, match="not divisible"):
        parse_config(doc)


def test_mcmc_default_burn_in_used_for_divisibility():
    # effective burn-in 50, so thin must divide 50
    with pytest.raises(SchemaError, match="mcmc.thin"):
        parse_config({"mcmc": {"iterations": 100, "thin": 3, "seed": 0}})
    cfg = parse_config({"mcmc": {"iterations": 100, "thin": 5, "seed": 0}})
    assert cfg.mcmc.burn_in is None
    assert cfg.mcmc.thin == 5


def test_mcmc_burn_in_cannot_exceed_iterations():
    doc = {"mcmc": {"iterations": 10, "burn_in": 11, "seed": 0}}
    with pytest.raises(SchemaError, match="exceeds iterations"):
        parse_config(doc)


def test_prior_component_count_must_match_model():
    doc = full_doc()
    doc["priors"]["y"]["sigma"] = [[2.0, 1.9]]
    with pytest.raises(SchemaError, match="priors.y.sigma") as exc:
        parse_config(doc)
    assert "model.components = 2" in str(exc.value)


def test_z_priors_reject_tau():
    doc = full_doc()
    doc["priors"]["z"]["tau"] = [1.0, 1.0]
    with pytest.raises(SchemaError, match="priors.z.tau: unknown key"):
        parse_config(doc)


def test_y_priors_require_tau():
    doc = full_doc()
    del doc["priors"]["y"]["tau"]
    with pytest.raises(SchemaError, match="priors.y.tau: missing required key"):
        parse_config(doc)


def test_priors_need_readable_component_count():
    doc = full_doc()
    del doc["model"]
    with pytest.raises(SchemaError,
                       match="model.components: needed to validate"):
        parse_config(doc)


def test_negative_sd_rejected_in_prior_pairs():
    doc = full_doc()
    doc["priors"]["y"]["phi"][0] = [50.0, -1.0]
    with pytest.raises(SchemaError, match=r"priors.y.phi\[0\]"):
        parse_config(doc)


def test_booleans_are_not_numbers():
    doc = {"data": {"path": "a.csv", "root": True}}
    with pytest.raises(SchemaError, match="data.root"):
        parse_config(doc)


def test_predict_region_needs_three_vertices():
    doc = full_doc()
    doc["predict"]["region"] = [[0.0, 0.0], [1.0, 1.0]]
    with pytest.raises(SchemaError, match="three"):
        parse_config(doc)


def test_predict_change_years_must_be_grid_years():
    doc = full_doc()
    doc["predict"]["change"] = [2000.0, 2003.0]
    with pytest.raises(SchemaError, match="predict.change"):
        parse_config(doc)


def test_ht_cycles_must_increase():
    doc = {"ht": {"cycles": [2000.0, 2000.0]}}
    with pytest.raises(SchemaError, match="strictly increasing"):
        parse_config(doc)


def test_variogram_edges_validated():
    doc = {"variogram": {"space_edges": [0.0], "time_edges": [0.0, 1.0]}}
    with pytest.raises(SchemaError, match="space_edges"):
        parse_config(doc)


def test_simulate_occupancy_keys_together_or_neither():
    doc = full_doc()
    del doc["simulate"]["z_phi"]
    with pytest.raises(SchemaError, match="given together"):
        parse_config(doc)
    doc = full_doc()
    for key in ("alpha_z", "z_sigma", "z_phi", "z_lambda"):
        del doc["simulate"][key]
    cfg = parse_config(doc)
    assert cfg.simulate.alpha_z is None


def test_simulate_visits_bounded_by_years():
    doc = full_doc()
    doc["simulate"]["visits"] = 4
    with pytest.raises(SchemaError, match="simulate.visits"):
        parse_config(doc)


def test_require_lists_missing_blocks():
    cfg = parse_config({"data": {"path": "a.csv", "root": 1}})
    with pytest.raises(SchemaError) as exc:
        cfg.require("fit", "data", "mcmc", "priors_y")
    message = str(exc.value)
    assert "'fit'" in message
    assert "[mcmc]" in message
    assert "[priors.y]" in message
    assert "[data]" not in message
    cfg.require("ht", "data")


def test_load_config_reads_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[data]\npath = "a.csv"\nroot = 3\n')
    cfg = load_config(path)
    assert cfg.data.root == 3


def test_load_config_reports_bad_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("data = = 3\n")
    with pytest.raises(SchemaError, match="not valid TOML"):
        load_config(path)


def test_load_config_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "absent.toml")


# ---------------------------------------------------------------- emitter

def test_emit_full_document_round_trips():
    doc = full_doc()
    assert tomli.loads(emit_toml(doc)) == doc


def test_emit_quotes_awkward_keys_and_strings():
    doc = {"table one": {"key with spaces": 'va"lue\n', "": "empty key"}}
    parsed = tomli.loads(emit_toml(doc))
    assert parsed == doc


def test_emit_handles_empty_tables():
    doc = {"a": {}, "b": {"c": {}}, "d": {"e": 1}}
    assert tomli.loads(emit_toml(doc)) == doc


def test_emit_floats_distinguishable_from_ints():
    doc = {"t": {"f": 2.0, "i": 2, "big": 1e30, "tiny": 5e-324}}
    parsed = tomli.loads(emit_toml(doc))["t"]
    assert isinstance(parsed["f"], float) and parsed["f"] == 2.0
    assert isinstance(parsed["i"], int) and parsed["i"] == 2
    assert parsed["big"] == 1e30
    assert parsed["tiny"] == 5e-324


def test_emit_nonfinite_floats():
    doc = {"t": {"a": math.inf, "b": -math.inf, "c": math.nan}}
    parsed = tomli.loads(emit_toml(doc))["t"]
    assert parsed["a"] == math.inf
    assert parsed["b"] == -math.inf
    assert math.isnan(parsed["c"])


def test_emit_rejects_unsupported_types():
    with pytest.raises(SchemaError, match="cannot emit"):
        emit_toml({"a": {"b": object()}})


def _equal_with_nan(a, b):
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(
            _equal_with_nan(a[k], b[k]) for k in a
        )
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(
            _equal_with_nan(x, y) for x, y in zip(a, b)
        )
    if isinstance(a, float) and isinstance(b, float):
        return (math.isnan(a) and math.isnan(b)) or a == b
    return type(a) is type(b) and a == b


_keys = st.text(
    alphabet=st.characters(blacklist_categories=("Cs", "Cc")), max_size=8
)
_scalars = (
    st.booleans()
    | st.integers(min_value=-(2**63) + 1, max_value=2**63 - 1)
    | st.floats(allow_nan=True, allow_infinity=True)
    | st.text(max_size=12)
)
_values = _scalars | st.lists(
    _scalars | st.lists(_scalars, max_size=3), max_size=4
)
_tables = st.recursive(
    st.dictionaries(_keys, _values, max_size=4),
    lambda inner: st.dictionaries(_keys, _values | inner, max_size=4),
    max_leaves=6,
)


@settings(max_examples=150, deadline=None)
@given(doc=_tables)
def test_emit_parse_round_trip_property(doc):
    assert _equal_with_nan(tomli.loads(emit_toml(doc)), doc)

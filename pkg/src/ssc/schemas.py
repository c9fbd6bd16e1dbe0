"""
JSON schemas for experiment configs and every JSON artifact the CLI writes.

``python -m ssc.schemas DIR`` writes them to DIR as ``<name>.schema.json``.
"""

import json
import sys
from pathlib import Path

import jsonschema

_num = {"type": "number"}
_num_or_null = {"type": ["number", "null"]}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}

F_SPEC = {
    "oneOf": [
        {"type": "string", "pattern": r"^(zero|cosine|random-compatible\(\d+\)|random\(\d+\))$"},
        {"type": "array", "items": _num},
    ]
}

CONFIG = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ssc experiment config",
    "type": "object",
    "required": ["problem", "decomposition"],
    "additionalProperties": False,
    "properties": {
        "problem": {
            "type": "object",
            "required": ["kind", "dim", "n"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["quadratic", "slaplace", "perturbed"]},
                "s": {"type": "number", "exclusiveMinimum": 1},
                "eps": {"type": "number", "minimum": 0},
                "dim": {"enum": [1, 2]},
                "n": {"type": "integer", "minimum": 2},
                "f": F_SPEC,
                "u0": {"type": "string", "pattern": r"^(zero|sine|random\(\d+\))$"},
                "matrix": {"enum": ["neumann", "neumann+mass"]},
            },
        },
        "decomposition": {
            "type": "object",
            "required": ["subdomains_per_axis", "overlap_layers"],
            "additionalProperties": False,
            "properties": {
                "subdomains_per_axis": _pos_int,
                "overlap_layers": {"type": "integer", "minimum": 1},
                "coarse_factor": {"type": ["integer", "null"], "minimum": 2},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["psc", "ssc"]},
                "tau": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
                "max_outer_iters": {"type": "integer", "minimum": 0},
                "outer_tol": {"type": "number", "exclusiveMinimum": 0},
                "local_kind": {"enum": ["exact", "inexact_power"]},
                "M": {"type": "number", "exclusiveMinimum": 0},
                "s_loc": {"type": "number", "exclusiveMinimum": 1},
                "inner_max_iters": _pos_int,
                "inner_grad_tol": {"type": "number", "exclusiveMinimum": 0},
                "newton_regularization": _num_or_null,
                "seed": _int,
                "workers": _pos_int,
                "override_tau": {"type": "boolean"},
                "record_timing": {"type": "boolean"},
            },
        },
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps_values": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "threshold": {"type": "number", "exclusiveMinimum": 0},
                "samples": _pos_int,
                "seed": _int,
                "radius": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

MESH = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "P1 mesh",
    "type": "object",
    "required": ["dim", "n", "vertices", "elements"],
    "properties": {
        "dim": {"enum": [1, 2]},
        "n": _int,
        "vertices": {"type": "array", "items": {"type": "array", "items": _num}},
        "elements": {"type": "array", "items": {"type": "array", "items": _int}},
    },
}

RUN_SUMMARY = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "run summary",
    "type": "object",
    "required": ["method", "tau", "n_iters", "iters_to_tol", "converged", "descent_ok", "f_ref",
                 "final_energy", "final_zeta", "r0_empirical", "flags"],
    "properties": {
        "method": {"enum": ["psc", "ssc"]},
        "tau": _num,
        "n_iters": _int,
        "iters_to_tol": {"type": ["integer", "null"]},
        "converged": {"type": "boolean"},
        "descent_ok": {"type": "boolean"},
        "f_ref": _num,
        "final_energy": _num,
        "final_zeta": _num,
        "r0_empirical": _num,
        "flags": {"type": "array", "items": {"type": "string"}},
        "decomposition": {"type": "object"},
        "eps": _num,
    },
}

CONSTANTS = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "empirical constants",
    "type": "object",
    "required": ["proxy", "c_k0", "mu_k0", "omega", "rho", "theta", "c_tri", "c_q", "sample_counts", "seeds"],
    "properties": {
        "proxy": {"const": True},
        "c_k0": _num_or_null,
        "mu_k0": _num_or_null,
        "omega": _num_or_null,
        "rho": _num_or_null,
        "theta": _num_or_null,
        "omega_valid": {"type": ["boolean", "null"]},
        "c_tri": _num_or_null,
        "c_q": _num_or_null,
        "sample_counts": {"type": "object", "additionalProperties": _int},
        "seeds": {"type": "object", "additionalProperties": _int},
    },
}

RATES = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "observed rate against bound",
    "type": "object",
    "required": ["passed", "p", "q", "tau", "branch_final", "beta", "constants", "violations", "reestimated"],
    "properties": {
        "passed": {"type": "boolean"},
        "p": _num,
        "q": _num,
        "tau": _num,
        "branch_final": {"enum": ["linear", "sublinear"]},
        "beta": _num_or_null,
        "threshold": _num_or_null,
        "zeta0": _num,
        "r0_empirical": _num,
        "constants": CONSTANTS,
        "violations": {"type": "array", "items": _int},
        "reestimated": {"type": "boolean"},
        "note": {"type": "string"},
    },
}

SWEEP = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "eps sweep report",
    "type": "object",
    "required": ["tol", "rows", "ratio", "threshold", "kernel_decomposition", "nonincreasing_in_eps",
                 "passed", "observation"],
    "properties": {
        "tol": _num,
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["eps", "iters", "capped", "final_reduction"],
                "properties": {"eps": _num, "iters": _int, "capped": {"type": "boolean"}, "final_reduction": _num},
            },
        },
        "ratio": _num,
        "threshold": _num,
        "kernel_decomposition": {"type": "boolean"},
        "nonincreasing_in_eps": {"type": "boolean"},
        "reduction_monotone": {"type": "boolean"},
        "passed": {"type": ["boolean", "null"]},
        "observation": {"type": ["string", "null"]},
    },
}

SCHEMAS = {
    "config": CONFIG,
    "mesh": MESH,
    "run_summary": RUN_SUMMARY,
    "constants": CONSTANTS,
    "rates": RATES,
    "sweep": SWEEP,
}


def validate(name, doc):
    """Raise jsonschema.ValidationError if `doc` does not match schema `name`."""
    jsonschema.validate(doc, SCHEMAS[name])


def dump(directory):
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, schema in SCHEMAS.items():
        (out / f"{name}.schema.json").write_text(json.dumps(schema, indent=2) + "\n")


if __name__ == "__main__":
    dump(sys.argv[1] if len(sys.argv) > 1 else "schemas")

"""JSON Schemas (draft 2020-12) for every ``--format json`` output and JSON side file."""

_NUM_OR_NULL = {"type": ["number", "null"]}
_ROLE = {"enum": ["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"]}
_SHA = {"type": "string", "pattern": "^[0-9a-f]{64}$"}
_RANKING = {"type": "array", "items": {"type": "array", "prefixItems": [_ROLE, {"type": "number"}],
                                       "minItems": 2, "maxItems": 2}}


def _obj(props: dict, required: list[str] | None = None) -> dict:
    return {"type": "object", "properties": props, "required": required or list(props),
            "additionalProperties": False}


def _grid():
    return {"type": "array", "items": {"type": "array", "items": _NUM_OR_NULL, "minItems": 7, "maxItems": 7}}


DIFF = _obj({
    "schema": {"const": "gatescope.diff/1"},
    "eps": {"type": "number", "minimum": 0},
    "layers": {"type": "integer", "minimum": 0},
    "roles": {"type": "array", "items": _ROLE},
    "l2": _grid(),
    "relative_ratio": _grid(),
    "records": {"type": "array", "items": _obj({
        "layer": {"type": "integer", "minimum": 0}, "role": _ROLE, "tensor": {"type": "string"},
        "l2": _NUM_OR_NULL, "relative_ratio": _NUM_OR_NULL,
        "param_count": {"type": "integer", "minimum": 0}, "nan_count": {"type": "integer", "minimum": 0}})},
    "ranking": {"type": "object", "additionalProperties": {
        "type": "object", "additionalProperties": _RANKING}},
    "unclassified": {"type": "array", "items": {"type": "string"}},
    "missing": {"type": "array", "items": {"type": "string"}},
    "warnings": {"type": "array", "items": {"type": "string"}},
})

HISTOGRAM = _obj({
    "schema": {"const": "gatescope.histogram/1"},
    "eps": {"type": "number"},
    "roles": {"type": "object", "additionalProperties": _obj({
        "edges": {"type": "array", "items": {"type": "number"}},
        "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "sampled": {"type": "integer"}, "total": {"type": "integer"}})},
})

WRITE = _obj({
    "schema": {"const": "gatescope.write/1"},
    "command": {"enum": ["transplant", "merge-lora", "init-toy"]},
    "output": {"type": "string"},
    "sha256": _SHA,
    "tensors": {"type": "integer", "minimum": 0},
    "changed": {"type": "array", "items": {"type": "string"}},
})

SYNTH = _obj({
    "schema": {"const": "gatescope.synth/1"},
    "base": {"type": "string"}, "adapted": {"type": "string"},
    "base_sha256": _SHA, "adapted_sha256": _SHA,
})

TRAIN = _obj({
    "schema": {"const": "gatescope.train/1"},
    "selection": {"type": "string"},
    "trainable_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    "config": {"type": "object"},
    "steps": {"type": "integer", "minimum": 1},
    "initial_loss": {"type": "number"},
    "final_loss": {"type": "number"},
    "eval_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
    "base_digest": _SHA,
})

COMPARE = _obj({
    "schema": {"const": "gatescope.compare/1"},
    "rows": {"type": "array", "items": _obj({
        "selection": {"type": "string"}, "final_loss": {"type": "number"},
        "eval_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "trainable_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "initial_loss": {"type": "number"}, "adapters": {"type": "integer", "minimum": 0}})},
})

FRACTION = _obj({
    "schema": {"const": "gatescope.fraction/1"},
    "dims": {"type": "string"},
    "selection": {"type": "string"},
    "rank": {"type": "integer", "minimum": 1},
    "selected_params_per_layer": {"type": "integer", "minimum": 0},
    "total_params_per_layer": {"type": "integer", "minimum": 1},
    "numerator": {"type": "integer", "minimum": 0},
    "denominator": {"type": "integer", "minimum": 1},
    "fraction": {"type": "number", "minimum": 0, "maximum": 1},
})

REPORT = _obj({
    "schema": {"const": "gatescope.report/1"},
    "statistic": {"enum": ["l2", "relative_ratio"]},
    "aggregation": {"enum": ["mean", "median", "max"]},
    "reports": {"type": "array", "items": _obj({
        "report": {"type": "string"}, "layers": {"type": "integer"}, "ranking": _RANKING})},
})

SCHEMAS = {s["properties"]["schema"]["const"]: s
           for s in (DIFF, HISTOGRAM, WRITE, SYNTH, TRAIN, COMPARE, FRACTION, REPORT)}

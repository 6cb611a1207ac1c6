"""JSON Schemas for every JSON document the command suite writes."""

_num01 = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

METRICS_REPORT = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MetricsReport",
    "type": "object",
    "required": ["max_f", "mean_f", "mae", "max_e", "mean_e", "s_measure", "accuracy",
                 "f_beta_cls", "fps", "param_count", "model_bytes", "n_images", "extra"],
    "properties": {
        "max_f": _num01, "mean_f": _num01, "mae": _num01,
        "max_e": _num01, "mean_e": _num01, "s_measure": _num01,
        "accuracy": _num01, "f_beta_cls": _num01,
        "fps": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "param_count": {"type": ["integer", "null"], "minimum": 0},
        "model_bytes": {"type": ["integer", "null"], "minimum": 0},
        "n_images": {"type": "integer", "minimum": 0},
        "extra": {"type": "object"},
    },
    "additionalProperties": False,
}

INFER_REPORT = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "PipelineResult",
    "type": "object",
    "required": ["threshold", "images", "summary"],
    "properties": {
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "status"],
                "properties": {
                    "id": {"type": "string"},
                    "status": {"enum": ["ok", "error"]},
                    "label": {"enum": ["normal", "abnormal", "no-rope-found"]},
                    "confidence": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "saliency": {"type": "string"},
                    "mask": {"type": "string"},
                    "overlay": {"type": "string"},
                    "extracted": {"type": ["string", "null"]},
                    "error": {"type": "string"},
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["n_images", "n_errors", "counts"],
            "properties": {
                "n_images": {"type": "integer", "minimum": 0},
                "n_errors": {"type": "integer", "minimum": 0},
                "counts": {"type": "object", "additionalProperties": {"type": "integer"}},
                "metrics": {"oneOf": [METRICS_REPORT, {"type": "null"}]},
            },
        },
    },
}

PROVENANCE = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "AugmentationProvenance",
    "type": "array",
    "items": {
        "type": "object",
        "required": ["id", "source_id", "bg_id", "placement"],
        "properties": {
            "id": {"type": "string"},
            "source_id": {"type": "string"},
            "bg_id": {"type": "string"},
            "placement": {
                "type": "object",
                "required": ["scale", "rotation", "tx", "ty", "seed"],
                "properties": {
                    "scale": {"type": "number", "minimum": 0.5, "maximum": 1.5},
                    "rotation": {"type": "number", "minimum": -25, "maximum": 25},
                    "tx": {"type": "number", "minimum": -0.25, "maximum": 0.25},
                    "ty": {"type": "number", "minimum": -0.25, "maximum": 0.25},
                    "seed": {"type": "integer"},
                },
            },
        },
    },
}

MANIFEST = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "DatasetManifest",
    "type": "object",
    "required": ["entries"],
    "properties": {
        "split": {"enum": ["train", "test"]},
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "color", "mask"],
                "properties": {
                    "id": {"type": "string"},
                    "color": {"type": "string"},
                    "mask": {"type": "string"},
                    "depth": {"type": ["string", "null"]},
                    "label": {"enum": ["normal", "abnormal"]},
                },
            },
        },
    },
}

REPARAM_REPORT = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ReparamReport",
    "type": "object",
    "required": ["params_before", "params_after", "max_abs_deviation", "already_fused"],
    "properties": {
        "params_before": {"type": "integer"},
        "params_after": {"type": "integer"},
        "max_abs_deviation": {"type": "number", "minimum": 0},
        "already_fused": {"type": "boolean"},
    },
}

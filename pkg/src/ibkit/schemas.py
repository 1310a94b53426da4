"""JSON schemas for the machine-readable CLI inputs and outputs."""

TRAIN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "model_kind": {"enum": ["mlp", "ib", "fused"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "steps": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "p_drop": {"type": "number", "minimum": 0, "maximum": 1},
        "lambda_init": {"type": "number"},
        "crop_jitter": {"type": "integer", "minimum": 0},
        "color_jitter": {"type": "number", "minimum": 0},
        "dim": {"type": "integer", "minimum": 1},
        "heads": {"type": "integer", "minimum": 1},
        "n_train": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}

GRID_SCHEMA = {
    "type": "object",
    "properties": {
        "kinds": {"type": "array", "items": {"type": "string"}},
        "severities": {"type": "array",
                       "items": {"type": "integer", "minimum": 1, "maximum": 5}},
        "eval_seed": {"type": "integer"},
        "n_eval": {"type": "integer", "minimum": 1},
        "purity_scenes": {"type": "integer", "minimum": 0},
    },
    "required": ["kinds", "severities"],
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "schema_version": {"type": "integer"},
        "model_kind": {"type": "string"},
        "clean_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "eval_seed": {"type": "integer"},
        "n_scenes": {"type": "integer"},
        "config_hash": {"type": ["string", "null"]},
        "generated_at": {"type": "string"},
        "cells": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "kind": {"type": "string"},
                    "severity": {"type": "integer", "minimum": 1, "maximum": 5},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "feature_consistency": {"type": "number",
                                            "minimum": -1, "maximum": 1},
                    "encoder_consistency": {"type": "number",
                                            "minimum": -1, "maximum": 1},
                    "grouping_purity": {"type": ["number", "null"],
                                        "minimum": 0, "maximum": 1},
                },
                "required": ["kind", "severity", "accuracy"],
            },
        },
    },
    "required": ["schema_version", "model_kind", "clean_accuracy", "cells"],
}

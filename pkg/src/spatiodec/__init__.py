"""Spatiotemporal volume decoding with 4D convolution and mixed attention.

Submodule imports are lazy so the CLI can cap BLAS thread pools before
NumPy loads; ``from spatiodec import conv4d`` works as usual.
"""

_EXPORTS = {
    "tensor": [
        "Tape", "DiffValue", "tensor_new", "reshape", "ew", "reduce", "backward",
        "grad_check", "value_of",
    ],
    "ops": [
        "Conv3DParams", "NormParams", "conv3d", "maxpool3d", "trilinear_upsample",
        "dense", "activate", "norm", "softmax_ce", "softmax_probs", "mse",
        "init_conv3d", "init_norm",
    ],
    "_conv4d": [
        "Conv4DKernel", "Conv4DConfig", "conv4d", "conv4d_oracle", "temporal_flatten",
        "init_conv4d",
    ],
    "attention": [
        "ResUnitParams", "AttentionModuleParams", "AttentionRecord", "res_unit",
        "attention_branch", "attention_module", "init_res_unit", "init_attention_module",
    ],
    "model": [
        "ModelConfig", "Model", "build", "forward", "predict_instance", "save", "load",
        "audit_shapes", "named_tensors", "named_parameters", "parameter_count",
    ],
    "data": [
        "DatasetManifest", "ManifestEntry", "SplitPlan", "PhantomSpec", "phantom_generate",
        "desk_phantom_spec", "segment_windows", "make_splits", "read_volume", "write_volume",
        "block_response",
    ],
    "training": [
        "TrainConfig", "AdamState", "adam_step", "LrSchedule", "schedule_update", "train",
        "evaluate", "spearman", "transfer_fit", "EvalReport", "SpearmanResult",
        "run_crossval", "history_to_csv",
    ],
    "masks": ["MaskVolume", "extract_masks", "export_mask", "read_raw_mask"],
    "checks": ["run_gradcheck", "GRADCHECK_TOLERANCE"],
    "errors": ["SpatiodecError"],
}

_ATTR_TO_MODULE = {name: mod for mod, names in _EXPORTS.items() for name in names}

__all__ = sorted(_ATTR_TO_MODULE)
__version__ = "0.1.0"


def __getattr__(name):
    mod = _ATTR_TO_MODULE.get(name)
    if mod is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(f".{mod}", __name__), name)

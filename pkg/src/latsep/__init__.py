"""latsep: conditioned music source separation with latent-source attention.

A conditioned U-Net over complex-as-channels spectrograms, three block
variants (lasaft, lightsaft, lightsaft_plus), toy-scale CPU training, SDR
evaluation under a wall-clock budget, and a parameter auditor.

Submodules and API names load lazily (PEP 562) so the CLI can pin BLAS
thread-count environment variables before numpy is first imported.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("blocks", "checkpoint", "cli", "errors", "eval", "model", "nn",
               "numerics", "spectro", "train")

_API = {
    "CONDITION_NAMES": "model", "Condition": "model", "ConditionedUNet": "model",
    "ModelConfig": "model", "build": "model", "condition": "model",
    "count_parameters": "model", "desk_config": "model",
    "gradcheck_config": "model", "reference_config": "model",
    "separate_track": "model",
    "Tensor": "numerics", "Parameter": "numerics", "grad_check": "numerics",
    "no_grad": "numerics",
    "AudioClip": "spectro", "Spectrogram": "spectro", "StftConfig": "spectro",
    "istft": "spectro", "read_wav": "spectro", "stft": "spectro",
    "write_wav": "spectro",
    "Dataset": "train", "StemSet": "train", "TrainConfig": "train",
    "make_toy_dataset": "train", "mse_loss": "train", "sample_batch": "train",
    "split_dataset": "train", "train_loop": "train",
    "BudgetReport": "eval", "SdrReport": "eval", "evaluate": "eval",
    "sdr": "eval", "throughput_check": "eval",
    "save_checkpoint": "checkpoint", "load_checkpoint": "checkpoint",
}

__all__ = list(_SUBMODULES) + list(_API)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    if name in _API:
        return getattr(importlib.import_module(f".{_API[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(__all__))

import os
from typing import Any, Dict, Optional

from dotenv import dotenv_values

from ebt.errors import UsageError


# --- Loss Configuration ---
B_E = 1.0
B_B = 0.8
B_T = 0.5
RADIUS = 7          # boundary window half-size, (2r+1)x(2r+1) square
LAMBDA = 1.1        # WBCE negative-class balancing factor
EPSILON = 1e-7      # log clamp

# --- Evaluation ---
TOLERANCE = 1.0     # Euclidean pixels
N_THRESHOLDS = 99

# --- Training ---
LEARNING_RATE = 1e-4
WEIGHT_DECAY = 1e-8
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EPOCHS = 200
SEED = 42
BATCH_SIZE = 0      # 0 means full batch
CROP_SIZE = 320
DESK_CROP_SIZE = 48  # used on 64x64 synthetic canvases
CROP_RESAMPLE_EPOCHS = 5
MAX_WORKERS = 4

# --- Patchwise Inference ---
PATCH_SIZE = 320
PATCH_STRIDE = 304

# --- Synthetic Scenes ---
SYNTH_COUNT = 32
SYNTH_SIZE = 64
SYNTH_MIN_SHAPES = 2
SYNTH_MAX_SHAPES = 5
SYNTH_CONTRAST = (0.2, 0.8)
SYNTH_NOISE = 0.02

# --- Data Files ---
GT_LEVEL = 127      # 8-bit gt pixels strictly above this are edges
PYRAMID_BOUND = 640


# Keys accepted in a key=value run file, with the type each value is parsed to.
_CONFIG_KEYS = {
    "r": int,
    "b_e": float,
    "b_b": float,
    "b_t": float,
    "lambda": float,
    "epsilon": float,
    "tolerance": float,
    "thresholds": str,
    "patch": int,
    "stride": int,
    "seed": int,
    "epochs": int,
    "loss": str,
    "lr": float,
    "weight_decay": float,
    "batch_size": int,
    "crop": str,
    "count": int,
    "eval_count": int,
    "size": int,
    "min_shapes": int,
    "max_shapes": int,
    "noise": float,
    "grid_b_b": str,
    "grid_b_t": str,
    "data": str,
    "out": str,
}


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """
    Read a plain-text run file of `key=value` pairs (one per line, `#` comments)
    and return the values converted to their declared types.
    """
    if not path:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")

    raw = dotenv_values(path)
    values: Dict[str, Any] = {}
    for key, value in raw.items():
        name = key.strip().lower().replace("-", "_")
        if name not in _CONFIG_KEYS:
            raise UsageError(f"Unknown config key '{key}' in {path}")
        if value is None:
            raise UsageError(f"Config key '{key}' in {path} has no value")
        try:
            values[name] = _CONFIG_KEYS[name](value.strip())
        except ValueError as e:
            raise UsageError(f"Bad value for '{key}' in {path}: {value!r} ({e})")
    return values

"""Multi-person body mesh regression conditioned on body-center context maps."""

from .body_model import BodyModelSpec, BodyParams, SchemaError, body_forward, load_model, save_model
from .conditioning import CoNormBlock, ConditionedRegressor, ModelConfig, conorm_apply, regressor_forward
from .config import RunConfig, load_config
from .context import estimate_context, extract_local_centermaps, render_centermap
from .errors import ConfigError
from .synthdata import DatasetError, GenerationError, Scene, SceneConfig, generate_scene, read_dataset, write_dataset
from .training import NumericalError, Trainer, evaluate

__version__ = "0.1.0"

__all__ = [
    "BodyModelSpec", "BodyParams", "CoNormBlock", "ConditionedRegressor", "ConfigError", "DatasetError",
    "GenerationError", "ModelConfig", "NumericalError", "RunConfig", "Scene", "SceneConfig", "SchemaError",
    "Trainer", "body_forward", "conorm_apply", "estimate_context", "evaluate", "extract_local_centermaps",
    "generate_scene", "load_config", "load_model", "read_dataset", "regressor_forward", "render_centermap",
    "save_model", "write_dataset",
]

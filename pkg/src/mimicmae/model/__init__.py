from .config import ConfigError, ConvStage, ModelConfig, param_count
from .network import (DecoderOutput, EncoderOutput, decode, encode,
                      init_params, mimic_head)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig", "ConvStage", "ConfigError", "param_count",
    "EncoderOutput", "DecoderOutput", "init_params", "encode", "mimic_head",
    "decode", "save_checkpoint", "load_checkpoint", "CheckpointError",
]

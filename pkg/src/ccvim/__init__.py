"""Context-clustering vision Mamba (selective scan + context clusters) for medical image segmentation."""
from .config import Config, TrainConfig, load_config, parse_config
from .errors import CCViMError, ConfigError, ContractError, DimensionError, LoadError, NumericError
from .net import CCViMNet, NetworkConfig, forward
from .tensor import Tensor, backward, finite_diff_check, no_grad

__version__ = "0.1.0"

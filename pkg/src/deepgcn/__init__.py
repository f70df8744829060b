"""Deep graph convolutional networks for point-cloud segmentation, on numpy."""
from .errors import (
    ConfigError,
    ContractError,
    EmptyInputError,
    EmptyNeighborhoodError,
    InsufficientPointsError,
    InvalidHyperparameterError,
    NumericError,
    PointFileError,
    ResidualShapeError,
)
from .graph import DilationSpec, NeighborList, PointCloud, dilated_knn, knn, stochastic_dilated_knn
from .model import Model, ModelConfig, model_forward
from .train import evaluate, load_model, save_model, train

__version__ = "0.1.0"

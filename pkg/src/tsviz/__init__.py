"""Deep time-series classifiers with parametric t-SNE visualisation of their representations."""

from .autodiff import Tape, Tensor, backward, no_grad
from .data import EventMatrix, WindowedDataset, load_checkpoint, prepare_splits, save_checkpoint, synth_generate
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    NumericalError,
    ParseError,
    StateError,
    TrainingDiverged,
    TsvizError,
)
from .layers import Network, attach_embedder, build_network, preset_spec
from .metrics import EvalReport, knn_score, pca_fit, pca_project, trustworthiness
from .train import TrainConfig, predict, train_classifier
from .tsne import EmbedConfig, batch_affinities, embed, precompute_affinities, train_embedder

__version__ = "0.1.0"

from .ablation import SWEEPS, ablate
from .checkpoint import CheckpointError, decode, encode, load, save
from .data import CLASS_NAMES, Dataset, Split, SyntheticDatasetConfig, shuffle_frames, synth_dataset
from .training import (
    FULL_SCALE_PROFILE,
    desk_profile,
    Adam,
    SGDMomentum,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    predictions,
    train,
    train_pipeline,
)
from .twostream import (
    ModelConfig,
    TinyBackbone,
    TwoStreamModel,
    cross_entropy,
    flow_stream_forward,
    fuse,
    rgb_stream_forward,
)

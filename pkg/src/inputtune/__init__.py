"""Input-aware auto-tuning of tiled GEMM and convolution kernels."""

from .param_space import (
    DEFAULT_HW,
    ConvInput,
    ConvTuning,
    GemmInput,
    GemmTuning,
    HardwareDescriptor,
    Legality,
    default_bounds,
    encode_features,
    enumerate_legal,
    estimate_resources,
    is_legal,
)
from .perf_model import MlpArchitecture, PerfModel, TrainConfig, load_model, save_model, train
from .pipeline import Dataset, InferenceResult, Sample, generate_dataset, infer, load_dataset, save_dataset
from .sampler import CategoricalModel, acceptance_rate, calibrate, sample

__version__ = "0.1.0"

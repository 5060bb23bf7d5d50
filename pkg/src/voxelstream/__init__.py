"""Two-stream 3D conv/deconv video networks with a built-in autodiff core.

Three model variants (initial, combined, twostream) trained with a joint
softmax-classification + voxel-wise optical-flow loss on synthetic clips
whose ground-truth flow is known analytically.
"""

from .data import (Dataset, SynthConfig, VideoSample, batch_arrays, gen_synthetic,
                   import_flow, load_dataset, load_sample, save_dataset, save_sample)
from .errors import (ConfigError, ContractError, FormatError, GenerationError,
                     InvalidSpecError, NumericalError, PairingError, ShapeError)
from .networks import (NetworkSpec, build_model, extract_features, forward_variant,
                       load_checkpoint, save_checkpoint)
from .ops3d import (ConvSpec, conv3d, conv_output_shape, deconv3d,
                    deconv_output_shape, maxpool3d, softmax_cross_entropy,
                    voxel_flow_loss)
from .tensor import (Tape, Tensor, add, backward, channel_concat, grad_check,
                     linear, mul, no_grad, relu, reshape, scale, tensor_new,
                     tensor_sum)
from .train import (METRICS_HEADER, LinearClassifier, Metrics, TrainConfig,
                    benchmark_fps, deterministic_mode, evaluate,
                    fit_linear_classifier, inference_forward, sgd_step, train,
                    write_metrics_csv)
from .verify import run_gradient_suite

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "ConvSpec", "Dataset", "FormatError",
    "GenerationError", "InvalidSpecError", "LinearClassifier", "METRICS_HEADER",
    "Metrics", "NetworkSpec", "NumericalError", "PairingError", "ShapeError",
    "SynthConfig", "Tape", "Tensor", "TrainConfig", "VideoSample", "add",
    "backward", "batch_arrays", "benchmark_fps", "build_model", "channel_concat",
    "conv3d", "conv_output_shape", "deconv3d", "deconv_output_shape",
    "deterministic_mode", "evaluate", "extract_features", "fit_linear_classifier",
    "forward_variant", "gen_synthetic", "grad_check", "import_flow",
    "inference_forward", "linear", "load_checkpoint", "load_dataset",
    "load_sample", "maxpool3d", "mul", "no_grad", "relu", "reshape",
    "run_gradient_suite", "save_checkpoint", "save_dataset", "save_sample",
    "scale", "sgd_step", "softmax_cross_entropy", "tensor_new", "tensor_sum",
    "train", "voxel_flow_loss", "write_metrics_csv",
]

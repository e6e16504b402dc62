"""Parameter-efficient fine-tuning of a small numpy visual grounding transformer.

The package is organised as:

* ``tensor`` / ``nn``: a reverse-mode autodiff engine and layers built on it
* ``model``: the grounding model (text encoder, image encoder, decoder, box head)
* ``peft``: LoRA, adapters and BitFit with module-placement policies
* ``metrics``: IoU, Pr@tau, meanIoU, cumIoU
* ``data``: JSONL annotation and prediction files, synthetic data
* ``train``: loss, optimisers, training and evaluation loops
* ``checkpoint``: full and delta checkpoints
* ``cli``: the ``vgpeft`` command
"""

from .checkpoint import apply_delta, load_checkpoint, save_checkpoint, save_delta
from .data import (
    AnnotationRecord,
    SyntheticSpec,
    generate_synthetic,
    load_annotations,
    load_predictions,
    join_predictions,
    split_records,
    write_annotations,
    write_predictions,
)
from .errors import VGError
from .gradcheck import finite_diff_check
from .metrics import BBox, MetricsReport, PairRecord, iou, report
from .model import GroundingModel, ModelConfig, ModuleTag, build_model
from .peft import (
    ParamReport,
    PeftSpec,
    efficiency,
    inject,
    merge_lora,
    param_report,
    placement_sweep,
)
from .tensor import Parameter, Tensor, backward
from .train import TrainConfig, TrainLog, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AnnotationRecord", "BBox", "GroundingModel", "MetricsReport", "ModelConfig", "ModuleTag",
    "PairRecord", "ParamReport", "Parameter", "PeftSpec", "SyntheticSpec", "Tensor",
    "TrainConfig", "TrainLog", "VGError", "apply_delta", "backward", "build_model",
    "efficiency", "evaluate", "finite_diff_check", "generate_synthetic", "inject", "iou",
    "join_predictions", "load_annotations", "load_checkpoint", "load_predictions",
    "merge_lora", "param_report", "placement_sweep", "report", "save_checkpoint",
    "save_delta", "split_records", "train", "write_annotations", "write_predictions",
]

"""Per-layer context-length search for continuous prompts on a frozen dual encoder."""

from .autodiff import SgdConfig, Tape, Tensor, backward, no_grad, sgd_step
from .encoder import BranchConfig, DualEncoder, init_pretrained
from .supprompt import (
    AlphaMatrix,
    PromptBank,
    PromptConfiguration,
    SearchSpace,
    extract_subprompt,
    search_space_size,
)
from .search import SearchConfig, run_search
from .train import TrainConfig, evaluate, shallow_baseline, train_subprompt
from .data import FewShotTask, PlantedSpec, generate_task
from .estimators import PromptLengthSearcher, PromptedClassifier

__all__ = [
    "AlphaMatrix",
    "BranchConfig",
    "DualEncoder",
    "FewShotTask",
    "PlantedSpec",
    "PromptBank",
    "PromptConfiguration",
    "PromptLengthSearcher",
    "PromptedClassifier",
    "SearchConfig",
    "SearchSpace",
    "SgdConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "evaluate",
    "extract_subprompt",
    "generate_task",
    "init_pretrained",
    "no_grad",
    "run_search",
    "search_space_size",
    "sgd_step",
    "shallow_baseline",
    "train_subprompt",
]

"""Training stage: fit the selected per-layer prompts under a frozen encoder.

The loss is cross entropy optionally augmented with a KL distillation term
against the frozen zero-shot model's predictions; the prompts are the only
trainable parameters and are always initialized from scratch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .autodiff import (
    SgdConfig,
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy,
    kl_divergence,
    matmul,
    no_grad,
    scale,
    sgd_step,
    softmax_rows,
    transpose,
)
from .data import FewShotTask, Split, batches
from .encoder import TAU, DualEncoder
from .errors import ContractError
from .supprompt import PromptConfiguration

PROMPT_INIT_STD = 0.5
SHALLOW_LENGTH = 16


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    lr: float = 0.5
    distill_weight: float = 0.0  # 0 is the vanilla path; > 0 adds distillation
    seed: int = 0

    def __post_init__(self):
        if self.distill_weight < 0:
            raise ContractError(f"distill_weight must be >= 0, got {self.distill_weight}")


class TrainedPrompts:
    """Per-branch, per-layer prompt tensors matching a configuration."""

    def __init__(self, configuration: PromptConfiguration,
                 text: list[Optional[Tensor]], image: list[Optional[Tensor]]):
        self.configuration = configuration
        self.text = text
        self.image = image

    @classmethod
    def initialize(cls, configuration: PromptConfiguration, d_text: int, d_image: int,
                   rng: np.random.Generator, std: float = PROMPT_INIT_STD) -> "TrainedPrompts":
        def branch(lengths, d):
            return [
                Tensor(rng.normal(0.0, std, size=(c, d)), requires_grad=True) if c else None
                for c in lengths
            ]
        return cls(configuration, branch(configuration.text, d_text),
                   branch(configuration.image, d_image))

    def parameters(self) -> list[Tensor]:
        return [p for p in self.text + self.image if p is not None]

    def save(self, path, seed: int, distill_weight: float) -> None:
        header = {
            "kind": "prompts",
            "configuration": self.configuration.to_json(),
            "seed": seed,
            "lambda": distill_weight,
        }
        flat = [p.data.reshape(-1) for p in self.parameters()]
        blob = np.concatenate(flat) if flat else np.zeros(0)
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            f.write(blob.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, d_text: int, d_image: int) -> "TrainedPrompts":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl].decode("utf-8"))
        if header.get("kind") != "prompts":
            raise ContractError(f"{path} is not a prompts checkpoint")
        configuration = PromptConfiguration.from_json(header["configuration"])
        flat = np.frombuffer(raw[nl + 1:], dtype="<f8")
        out = cls.initialize(configuration, d_text, d_image, seeding.rng_from(0))
        offset = 0
        for p in out.parameters():
            n = p.data.size
            p.data = flat[offset:offset + n].reshape(p.data.shape).copy()
            offset += n
        if offset != flat.size:
            raise ContractError(f"checkpoint holds {flat.size} values, expected {offset}")
        return out


def predict_probs(model: DualEncoder, task_text: np.ndarray, images: np.ndarray,
                  prompts: Optional[TrainedPrompts]) -> Tensor:
    """(batch, classes) probabilities for image samples under given prompts."""
    text_prompts = prompts.text if prompts is not None else None
    image_prompts = prompts.image if prompts is not None else None
    text_embs = model.encode_text_stack(task_text, text_prompts)
    img_embs = model.encode_image_stack(images, image_prompts)
    sims = matmul(img_embs, transpose(text_embs))
    return softmax_rows(scale(sims, 1.0 / TAU))


def zero_shot_predict(model: DualEncoder, task: FewShotTask, images: np.ndarray) -> Tensor:
    """Frozen no-prompt predictions; never recorded on a tape."""
    with no_grad():
        return predict_probs(model, task.text_tokens, images, None)


def total_loss(pred: Tensor, labels: Sequence[int], teacher: Optional[Tensor],
               distill_weight: float) -> Tensor:
    """Cross entropy plus distill_weight times KL(teacher || pred).

    With distill_weight == 0 the KL term is skipped entirely, so the vanilla
    and distillation code paths coincide bit for bit.
    """
    ce = cross_entropy(pred, labels)
    if distill_weight == 0.0 or teacher is None:
        return ce
    return add(ce, scale(kl_divergence(teacher, pred), distill_weight))


def train_subprompt(
    model: DualEncoder,
    task: FewShotTask,
    configuration: PromptConfiguration,
    cfg: TrainConfig,
) -> tuple[TrainedPrompts, list[dict]]:
    """Fit freshly initialized prompts of the configured lengths on all shots.

    Returns the prompts and a per-epoch history of mean losses (keys: epoch,
    loss, ce, kl). The encoder weights are never touched.
    """
    if len(configuration.text) != model.text_cfg.depth or \
            len(configuration.image) != model.image_cfg.depth:
        raise ContractError("configuration depth does not match the model")
    rng = seeding.rng_from(cfg.seed, seeding.TRAIN)
    prompts = TrainedPrompts.initialize(
        configuration, model.text_cfg.hidden_dim, model.image_cfg.hidden_dim, rng
    )
    params = prompts.parameters()
    history: list[dict] = []
    opt = SgdConfig(cfg.lr)
    for epoch in range(cfg.epochs):
        losses, ces, kls = [], [], []
        for batch in batches(task.train, cfg.batch_size, (task.seed, seeding.TRAIN, epoch)):
            teacher = None
            if cfg.distill_weight > 0:
                teacher = zero_shot_predict(model, task, batch.images)
            with Tape():
                pred = predict_probs(model, task.text_tokens, batch.images, prompts)
                ce = cross_entropy(pred, batch.labels)
                if cfg.distill_weight > 0:
                    kl = kl_divergence(teacher, pred)
                    loss = add(ce, scale(kl, cfg.distill_weight))
                    kl_val = float(kl.data)
                else:
                    loss = ce
                    kl_val = 0.0
                if params:
                    backward(loss)
            if params:
                sgd_step(params, opt)
            losses.append(float(loss.data))
            ces.append(float(ce.data))
            kls.append(kl_val)
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "ce": float(np.mean(ces)),
            "kl": float(np.mean(kls)),
        })
    return prompts, history


def evaluate(model: DualEncoder, task: FewShotTask, prompts: Optional[TrainedPrompts],
             split: Optional[Split] = None) -> float:
    """Fraction of argmax-correct predictions; ties resolve to the lowest label."""
    split = split if split is not None else task.test
    if len(split) == 0:
        raise ContractError("cannot evaluate an empty split")
    with no_grad():
        probs = predict_probs(model, task.text_tokens, split.images, prompts)
    pred = probs.data.argmax(axis=1)
    return float((pred == split.labels).mean())


def shallow_configuration(model: DualEncoder) -> PromptConfiguration:
    """Depth-1 baseline: one length-16 prompt at the first layer of each branch."""
    text = (SHALLOW_LENGTH,) + (0,) * (model.text_cfg.depth - 1)
    image = (SHALLOW_LENGTH,) + (0,) * (model.image_cfg.depth - 1)
    return PromptConfiguration(text=text, image=image, space=(0, SHALLOW_LENGTH))


def shallow_baseline(model: DualEncoder, task: FewShotTask, cfg: TrainConfig) -> float:
    """Train and score the depth-1/length-16 baseline configuration."""
    prompts, _ = train_subprompt(model, task, shallow_configuration(model), cfg)
    return evaluate(model, task, prompts, task.test)

"""Bilevel searching stage: alternate first-order updates of the search
logits (on validation batches) and of the candidate prompts (on training
batches), with the encoder weights frozen throughout.

Each step performs, in order: one SGD update of both alpha matrices from the
validation loss, then one SGD update of every prompt tensor from the training
loss. Cross-contamination is prevented by discarding the other parameter
group's gradients after each half-step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import seeding
from .autodiff import SgdConfig, Tape, backward, cross_entropy, no_grad, sgd_step, zero_grads
from .data import Batch, FewShotTask, Split, batches, split_for_search
from .encoder import DualEncoder
from .errors import ContractError
from .metrics import alpha_difference, num_dominants
from .supprompt import (
    AlphaMatrix,
    PromptBank,
    PromptConfiguration,
    SearchSpace,
    extract_subprompt,
    supprompt_forward,
)

METRICS_COLUMNS = (
    "stage", "epoch", "alpha_diff_txt", "alpha_diff_img",
    "dominants_txt", "dominants_img", "train_loss", "val_loss", "kl_loss",
)


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 60
    batch_size: int = 4
    lr_alpha: float = 0.5
    lr_prompts: float = 0.5
    seed: int = 0
    reuse_train_for_val: bool = False  # fallback for odd/one-shot regimes

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class SearchState:
    model: DualEncoder
    task: FewShotTask
    space: SearchSpace
    banks: tuple[PromptBank, PromptBank]
    alphas: tuple[AlphaMatrix, AlphaMatrix]
    cfg: SearchConfig

    @classmethod
    def initialize(cls, model: DualEncoder, task: FewShotTask, space: SearchSpace,
                   cfg: SearchConfig) -> "SearchState":
        alpha_rng = seeding.rng_from(cfg.seed, seeding.ALPHA)
        bank_rng = seeding.rng_from(cfg.seed, seeding.PROMPTS)
        alphas = (
            AlphaMatrix.initialize(model.text_cfg.depth, space.num_options, alpha_rng),
            AlphaMatrix.initialize(model.image_cfg.depth, space.num_options, alpha_rng),
        )
        banks = (
            PromptBank.initialize(model.text_cfg.depth, space, model.text_cfg.hidden_dim, bank_rng),
            PromptBank.initialize(model.image_cfg.depth, space, model.image_cfg.hidden_dim, bank_rng),
        )
        return cls(model, task, space, banks, alphas, cfg)

    def alpha_parameters(self):
        return [a.tensor for a in self.alphas]

    def prompt_parameters(self):
        return self.banks[0].parameters() + self.banks[1].parameters()


@dataclass
class EpochRecord:
    epoch: int
    alpha_text: np.ndarray
    alpha_image: np.ndarray
    alpha_diff_text: float
    alpha_diff_image: float
    dominants_text: int
    dominants_image: int
    train_loss: float
    val_loss: float


@dataclass
class SearchTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def write_metrics_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRICS_COLUMNS)
            for r in self.records:
                w.writerow([
                    "search", r.epoch,
                    f"{r.alpha_diff_text:.12g}", f"{r.alpha_diff_image:.12g}",
                    r.dominants_text, r.dominants_image,
                    f"{r.train_loss:.12g}", f"{r.val_loss:.12g}", "",
                ])

    def write_alpha_csv(self, path, branch: str, space: SearchSpace) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "layer"] + [f"len_{c}" for c in space.option_lengths])
            for r in self.records:
                alpha = r.alpha_text if branch == "text" else r.alpha_image
                for layer, row in enumerate(alpha):
                    w.writerow([r.epoch, layer] + [f"{v:.12g}" for v in row])


def _forward_loss(state: SearchState, batch: Batch):
    probs = supprompt_forward(
        state.model, state.task.text_tokens, batch.images, state.banks, state.alphas
    )
    return cross_entropy(probs, batch.labels)


def search_step(state: SearchState, train_batch: Batch, val_batch: Batch,
                audit: Optional[list] = None) -> tuple[float, float]:
    """One alternation: alpha step from the val batch, prompt step from the
    train batch. Returns (val_loss, train_loss)."""
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise ContractError("search_step requires nonempty batches")
    with Tape():
        val_loss = _forward_loss(state, val_batch)
        backward(val_loss)
    if audit is not None:
        audit.append({"stage": "alpha", "batch_tag": val_batch.tag})
    sgd_step(state.alpha_parameters(), SgdConfig(state.cfg.lr_alpha))
    # the val pass also produced prompt grads; they must not leak into the
    # prompt update below
    zero_grads(state.prompt_parameters())

    with Tape():
        train_loss = _forward_loss(state, train_batch)
        backward(train_loss)
    if audit is not None:
        audit.append({"stage": "prompts", "batch_tag": train_batch.tag})
    sgd_step(state.prompt_parameters(), SgdConfig(state.cfg.lr_prompts))
    zero_grads(state.alpha_parameters())
    return float(val_loss.data), float(train_loss.data)


def run_search(
    model: DualEncoder,
    task: FewShotTask,
    space: SearchSpace,
    cfg: SearchConfig,
    audit: Optional[list] = None,
) -> tuple[PromptConfiguration, SearchTrace]:
    """Full searching stage; returns the extracted configuration and per-epoch trace."""
    if len(task.train) == 0:
        raise ContractError("task has no training data")
    if cfg.reuse_train_for_val:
        search_train = Split(task.train.images, task.train.labels, tag="search_train")
        search_val = Split(task.train.images, task.train.labels, tag="search_val")
    else:
        search_train, search_val = split_for_search(task)
    state = SearchState.initialize(model, task, space, cfg)
    trace = SearchTrace()
    for epoch in range(cfg.epochs):
        train_b = batches(search_train, cfg.batch_size, (task.seed, 11, epoch))
        val_b = batches(search_val, cfg.batch_size, (task.seed, 13, epoch))
        val_losses, train_losses = [], []
        for tb, vb in zip(train_b, val_b):
            vl, tl = search_step(state, tb, vb, audit=audit)
            val_losses.append(vl)
            train_losses.append(tl)
        a_txt, a_img = state.alphas
        trace.records.append(EpochRecord(
            epoch=epoch,
            alpha_text=a_txt.array, alpha_image=a_img.array,
            alpha_diff_text=alpha_difference(a_txt), alpha_diff_image=alpha_difference(a_img),
            dominants_text=num_dominants(a_txt), dominants_image=num_dominants(a_img),
            train_loss=float(np.mean(train_losses)), val_loss=float(np.mean(val_losses)),
        ))
    configuration = extract_subprompt(state.alphas[0], state.alphas[1], space)
    return configuration, trace


# ---------------------------------------------------------------------------
# Independent configuration-ranking oracle
# ---------------------------------------------------------------------------

def scratch_val_loss(model: DualEncoder, task: FewShotTask,
                     configuration: PromptConfiguration,
                     epochs: int = 24, lr: float = 0.5, seed: int = 0) -> float:
    """Bilevel value of one discrete configuration, measured directly.

    Trains fresh prompts of the given configuration on the search-train split
    (the inner problem) and reports cross-entropy on the search-val split
    (the outer objective). The default inner budget of 24 epochs matches the
    effective per-option training a 60-epoch search provides (every option
    receives roughly a quarter of 480 mixed steps), which is the regime the
    relaxation actually ranks. Slow but independent of the relaxation: the
    reference point for configuration-ranking claims.
    """
    from .autodiff import SgdConfig, sgd_step
    from .train import TrainedPrompts, predict_probs

    search_train, search_val = split_for_search(task)
    rng = seeding.rng_from(seed, seeding.TRAIN)
    prompts = TrainedPrompts.initialize(
        configuration, model.text_cfg.hidden_dim, model.image_cfg.hidden_dim, rng
    )
    params = prompts.parameters()
    for epoch in range(epochs):
        for batch in batches(search_train, 4, (task.seed, seeding.TRAIN, epoch)):
            with Tape():
                pred = predict_probs(model, task.text_tokens, batch.images, prompts)
                loss = cross_entropy(pred, batch.labels)
                if params:
                    backward(loss)
            if params:
                sgd_step(params, SgdConfig(lr))
    with no_grad():
        pred = predict_probs(model, task.text_tokens, search_val.images, prompts)
        return float(cross_entropy(pred, search_val.labels).data)


def scratch_enumerate_branch(model: DualEncoder, task: FewShotTask, space: SearchSpace,
                             branch: str, fixed_other: PromptConfiguration,
                             epochs: int = 24, lr: float = 0.5,
                             seed: int = 0) -> list[tuple[tuple[int, ...], float]]:
    """Exhaustive scratch-trained val loss over one branch's configurations.

    The other branch is held at ``fixed_other``. Returns (lengths, val_loss)
    sorted ascending; the brute-force ground truth for planted-optimality.
    """
    from itertools import product

    depth = model.text_cfg.depth if branch == "text" else model.image_cfg.depth
    out = []
    for lengths in product(space.option_lengths, repeat=depth):
        if branch == "text":
            cfg = PromptConfiguration(text=lengths, image=fixed_other.image,
                                      space=space.option_lengths)
        else:
            cfg = PromptConfiguration(text=fixed_other.text, image=lengths,
                                      space=space.option_lengths)
        out.append((tuple(lengths), scratch_val_loss(model, task, cfg, epochs, lr, seed)))
    out.sort(key=lambda t: t[1])
    return out


def train_uniform_bank(model: DualEncoder, task: FewShotTask, space: SearchSpace,
                       epochs: int = 30, seed: int = 0) -> SearchState:
    """Train the prompt banks under frozen uniform mixing weights.

    No alpha updates happen (lr_alpha = 0 and the logits start at zero), so
    every option receives the same mixing weight throughout: a neutral way to
    give each candidate prompt its training signal before ranking
    configurations directly.
    """
    cfg = SearchConfig(epochs=epochs, lr_alpha=0.0, seed=seed)
    state = SearchState.initialize(model, task, space, cfg)
    for a in state.alphas:
        a.tensor.data[:] = 0.0
    search_train, search_val = split_for_search(task)
    for epoch in range(epochs):
        for tb, vb in zip(batches(search_train, cfg.batch_size, (task.seed, 11, epoch)),
                          batches(search_val, cfg.batch_size, (task.seed, 13, epoch))):
            search_step(state, tb, vb)
    return state


def enumerate_branch_val_losses(
    state: SearchState,
    branch: str,
    fixed_other: PromptConfiguration,
) -> list[tuple[tuple[int, ...], float]]:
    """Validation loss of every configuration of one branch, exhaustively.

    Prompts are taken from the state's banks; the other branch stays at
    ``fixed_other``. Returns (lengths, loss) pairs sorted by loss.
    """
    from itertools import product

    from .autodiff import matmul, scale, softmax_rows, transpose
    from .encoder import TAU

    model, task, space = state.model, state.task, state.space
    text_bank, image_bank = state.banks
    _, search_val = split_for_search(task)

    def branch_prompts(bank, lengths):
        idx = {c: i for i, c in enumerate(space.option_lengths)}
        return [bank.layer_options(l)[idx[c]] for l, c in enumerate(lengths)]

    depth = model.text_cfg.depth if branch == "text" else model.image_cfg.depth
    with no_grad():
        if branch == "text":
            img_embs = model.encode_image_stack(
                search_val.images, branch_prompts(image_bank, fixed_other.image)
            )
        else:
            text_embs = model.encode_text_stack(
                task.text_tokens, branch_prompts(text_bank, fixed_other.text)
            )
        out = []
        for lengths in product(space.option_lengths, repeat=depth):
            if branch == "text":
                t_embs = model.encode_text_stack(
                    task.text_tokens, branch_prompts(text_bank, lengths)
                )
                sims = matmul(img_embs, transpose(t_embs))
            else:
                i_embs = model.encode_image_stack(
                    search_val.images, branch_prompts(image_bank, lengths)
                )
                sims = matmul(i_embs, transpose(text_embs))
            probs = softmax_rows(scale(sims, 1.0 / TAU))
            loss = cross_entropy(probs, search_val.labels)
            out.append((tuple(lengths), float(loss.data)))
    out.sort(key=lambda t: t[1])
    return out

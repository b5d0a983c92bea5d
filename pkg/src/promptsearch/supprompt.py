"""Relaxed search space over per-layer prompt context lengths.

A prompt bank holds one candidate prompt per (layer, nonzero length option);
option 0 is "no prompt". Each branch also owns a depth x options matrix of
search logits whose row-wise softmax weights the candidate block outputs, so
the whole mixture stays differentiable in both the logits and the prompts.
Discretizing by per-row argmax yields a prompt configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, mix, softmax_rows, take_rows
from .encoder import BranchConfig, DualEncoder
from .errors import ContractError, DimensionError

DEFAULT_OPTION_LENGTHS = (0, 2, 4, 6)
ALPHA_INIT_STD = 0.01
PROMPT_INIT_STD = 0.5


@dataclass(frozen=True)
class SearchSpace:
    """Ordered candidate context lengths; the first option is always 0."""

    option_lengths: tuple[int, ...] = DEFAULT_OPTION_LENGTHS

    def __post_init__(self):
        lens = tuple(int(v) for v in self.option_lengths)
        object.__setattr__(self, "option_lengths", lens)
        if not lens or lens[0] != 0:
            raise ContractError(f"first option length must be 0, got {lens}")
        if any(b <= a for a, b in zip(lens, lens[1:])):
            raise ContractError(f"option lengths must be strictly increasing, got {lens}")

    @property
    def num_options(self) -> int:
        return len(self.option_lengths)


class AlphaMatrix:
    """depth x options matrix of trainable search logits for one branch."""

    def __init__(self, tensor: Tensor):
        if tensor.data.ndim != 2:
            raise DimensionError(f"alpha logits must be a matrix, got {tuple(tensor.data.shape)}")
        if not np.isfinite(tensor.data).all():
            raise ContractError("alpha logits must be finite")
        tensor.requires_grad = True
        self.tensor = tensor

    @classmethod
    def initialize(cls, depth: int, num_options: int, rng: np.random.Generator,
                   std: float = ALPHA_INIT_STD) -> "AlphaMatrix":
        return cls(Tensor(rng.normal(0.0, std, size=(depth, num_options)), requires_grad=True))

    @property
    def depth(self) -> int:
        return self.tensor.data.shape[0]

    @property
    def num_options(self) -> int:
        return self.tensor.data.shape[1]

    @property
    def array(self) -> np.ndarray:
        return self.tensor.data.copy()

    def save_csv(self, path, space: SearchSpace) -> None:
        header = ",".join(f"len_{c}" for c in space.option_lengths)
        np.savetxt(path, self.tensor.data, delimiter=",", header=header, comments="")


class PromptBank:
    """Candidate prompts for one branch: prompts[layer][option] (option 0 is None)."""

    def __init__(self, prompts: list[list[Optional[Tensor]]], space: SearchSpace, hidden_dim: int):
        self.prompts = prompts
        self.space = space
        self.hidden_dim = hidden_dim

    @classmethod
    def initialize(cls, depth: int, space: SearchSpace, hidden_dim: int,
                   rng: np.random.Generator, std: float = PROMPT_INIT_STD) -> "PromptBank":
        prompts: list[list[Optional[Tensor]]] = []
        for _ in range(depth):
            row: list[Optional[Tensor]] = [None]
            for c in space.option_lengths[1:]:
                row.append(Tensor(rng.normal(0.0, std, size=(c, hidden_dim)), requires_grad=True))
            prompts.append(row)
        return cls(prompts, space, hidden_dim)

    @property
    def depth(self) -> int:
        return len(self.prompts)

    def layer_options(self, layer: int) -> list[Optional[Tensor]]:
        return self.prompts[layer]

    def parameters(self) -> list[Tensor]:
        return [p for row in self.prompts for p in row if p is not None]


def beta_from_alpha(alpha: AlphaMatrix) -> Tensor:
    """Row-wise softmax of the search logits; differentiable mixing weights."""
    return softmax_rows(alpha.tensor)


def mixed_block_forward(
    block, x: Tensor, bank_layer: Sequence[Optional[Tensor]], beta_row: Tensor
) -> Tensor:
    """Convex combination over all prompt options of one block's outputs."""
    return mixed_block_forward_stack(block, x, 1, bank_layer, beta_row)


def mixed_block_forward_stack(
    block, x: Tensor, n_seq: int, bank_layer: Sequence[Optional[Tensor]], beta_row: Tensor
) -> Tensor:
    # q/k/v of x do not depend on the prompt option, so they are shared.
    from .autodiff import matmul
    from .encoder import attend_and_finish

    q = matmul(x, block.w_q)
    k_x = matmul(x, block.w_k)
    v_x = matmul(x, block.w_v)
    outs = [attend_and_finish(block, x, q, k_x, v_x, prompt, n_seq) for prompt in bank_layer]
    return mix(outs, beta_row)


def encode_branch_mixed(
    cfg: BranchConfig,
    blocks,
    proj: Tensor,
    x0: Tensor,
    n_seq: int,
    bank: PromptBank,
    beta: Tensor,
) -> Tensor:
    from .autodiff import l2_normalize_rows, matmul  # local to avoid cycle noise

    x = x0
    for l, block in enumerate(blocks):
        row = take_rows(beta, [l])
        x = mixed_block_forward_stack(block, x, n_seq, bank.layer_options(l), row)
    c = cfg.base_seq_len
    pooled = take_rows(x, [i * c + cfg.pool_index for i in range(n_seq)])
    return l2_normalize_rows(matmul(pooled, proj))


def supprompt_forward(
    model: DualEncoder,
    text_tokens: np.ndarray,
    images: np.ndarray,
    banks: tuple[PromptBank, PromptBank],
    alphas: tuple[AlphaMatrix, AlphaMatrix],
    tau: float = None,
) -> Tensor:
    """Mixture forward over both branches; returns (batch, classes) probabilities.

    text_tokens: (C, text_seq_len, d_txt); images: (batch, patches, d_img).
    Differentiable with respect to every prompt and both alpha matrices.
    """
    from .encoder import TAU
    from .autodiff import matmul, scale, softmax_rows, transpose

    tau = TAU if tau is None else tau
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    text_bank, image_bank = banks
    alpha_text, alpha_image = alphas
    beta_text = beta_from_alpha(alpha_text)
    beta_image = beta_from_alpha(alpha_image)
    n_cls = text_tokens.shape[0]
    n_img = images.shape[0]
    text_embs = encode_branch_mixed(
        model.text_cfg, model.text_blocks, model.text_proj,
        model.text_input_stack(text_tokens), n_cls, text_bank, beta_text,
    )
    img_embs = encode_branch_mixed(
        model.image_cfg, model.image_blocks, model.image_proj,
        model.image_input_stack(images), n_img, image_bank, beta_image,
    )
    sims = matmul(img_embs, transpose(text_embs))
    return softmax_rows(scale(sims, 1.0 / tau))


def extract_subprompt(
    alpha_text: AlphaMatrix, alpha_image: AlphaMatrix, space: SearchSpace
) -> "PromptConfiguration":
    """Per-row argmax of each alpha matrix; ties go to the smaller option."""

    def lengths(alpha: AlphaMatrix) -> tuple[int, ...]:
        if alpha.num_options != space.num_options:
            raise ContractError(
                f"alpha has {alpha.num_options} options, space has {space.num_options}"
            )
        # np.argmax returns the first maximum, i.e. the smaller option on ties
        return tuple(space.option_lengths[int(i)] for i in np.argmax(alpha.tensor.data, axis=1))

    return PromptConfiguration(
        text=lengths(alpha_text), image=lengths(alpha_image),
        space=space.option_lengths,
    )


@dataclass(frozen=True)
class PromptConfiguration:
    """Chosen context length per layer and branch."""

    text: tuple[int, ...]
    image: tuple[int, ...]
    space: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "text", tuple(int(v) for v in self.text))
        object.__setattr__(self, "image", tuple(int(v) for v in self.image))
        object.__setattr__(self, "space", tuple(int(v) for v in self.space))
        allowed = set(self.space)
        for branch in (self.text, self.image):
            bad = [v for v in branch if v not in allowed]
            if bad:
                raise ContractError(f"lengths {bad} are not in the search space {self.space}")

    def to_json(self) -> dict:
        return {"text": list(self.text), "image": list(self.image), "space": list(self.space)}

    @classmethod
    def from_json(cls, obj: dict) -> "PromptConfiguration":
        return cls(text=tuple(obj["text"]), image=tuple(obj["image"]), space=tuple(obj["space"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PromptConfiguration":
        return cls.from_json(json.loads(Path(path).read_text()))


def search_space_size(space: SearchSpace, depth_text: int, depth_image: int) -> int:
    """t ** (text depth + image depth), exact integer."""
    return space.num_options ** (depth_text + depth_image)


def count_supprompt_params(space: SearchSpace, text_cfg: BranchConfig,
                           image_cfg: BranchConfig) -> int:
    """Total prompt values held by both banks (alpha entries counted separately)."""
    per_layer = sum(space.option_lengths[1:])
    return (text_cfg.depth * per_layer * text_cfg.hidden_dim
            + image_cfg.depth * per_layer * image_cfg.hidden_dim)


def count_subprompt_params(config: PromptConfiguration, d_text: int, d_image: int) -> int:
    return sum(config.text) * d_text + sum(config.image) * d_image


def count_alpha_params(depth_text: int, depth_image: int, num_options: int) -> int:
    return (depth_text + depth_image) * num_options

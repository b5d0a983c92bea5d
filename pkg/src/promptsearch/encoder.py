"""Miniature frozen dual-branch encoder built from cross-attention blocks.

Both branches share the same block structure: queries come from the block's
own input, keys and values from the concatenation of an optional prompt and
the input, so a prompt of any length widens attention without changing the
output length. The text branch pools the final (EOS) position, the image
branch the leading (CLS) position; a frozen linear projection maps either
branch into the shared embedding space, followed by L2 normalization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .autodiff import (
    Tensor,
    add,
    gelu,
    l2_normalize_rows,
    layer_norm,
    matmul,
    prompted_attention,
    scale,
    softmax_rows,
    take_rows,
    transpose,
)
from .errors import ContractError, DimensionError

LN_EPS = 1e-5
TAU = 0.07  # fixed, non-trainable temperature


@dataclass(frozen=True)
class BranchConfig:
    """Shape of one branch: depth, width, heads, input sequence length."""

    depth: int
    hidden_dim: int
    num_heads: int
    base_seq_len: int
    pool: str = "last"  # "last" pools the EOS slot, "first" the CLS slot

    def __post_init__(self):
        if self.depth < 1:
            raise ContractError(f"depth must be >= 1, got {self.depth}")
        if self.hidden_dim % self.num_heads != 0:
            raise ContractError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.pool not in ("first", "last"):
            raise ContractError(f"pool must be 'first' or 'last', got {self.pool!r}")

    @property
    def pool_index(self) -> int:
        return 0 if self.pool == "first" else self.base_seq_len - 1

    def to_json(self) -> dict:
        return {
            "depth": self.depth,
            "hidden_dim": self.hidden_dim,
            "num_heads": self.num_heads,
            "base_seq_len": self.base_seq_len,
            "pool": self.pool,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BranchConfig":
        return cls(**obj)


@dataclass
class BlockParams:
    """Frozen weights of one transformer block."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_ff1: Tensor
    w_ff2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    num_heads: int

    FIELDS = ("w_q", "w_k", "w_v", "w_o", "w_ff1", "w_ff2",
              "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")

    def tensors(self):
        return [getattr(self, f) for f in self.FIELDS]


def block_forward(block: BlockParams, x: Tensor, prompt: Optional[Tensor] = None) -> Tensor:
    """One block over a single sequence; see `block_forward_stack`."""
    return block_forward_stack(block, x, 1, prompt)


def block_forward_stack(
    block: BlockParams, x: Tensor, n_seq: int, prompt: Optional[Tensor] = None
) -> Tensor:
    """Cross-attention block over ``n_seq`` stacked equal-length sequences.

    The prompt (shared across the stack) contributes keys/values only, so the
    output has exactly the shape of ``x``. Post-norm residual wiring:
    attention -> residual -> layer norm -> feed-forward -> residual -> layer norm.
    """
    d = block.w_q.data.shape[0]
    if x.data.ndim != 2 or x.data.shape[1] != d:
        raise DimensionError(f"block input {tuple(x.data.shape)} does not match width {d}")
    q = matmul(x, block.w_q)
    k_x = matmul(x, block.w_k)
    v_x = matmul(x, block.w_v)
    return attend_and_finish(block, x, q, k_x, v_x, prompt, n_seq)


def attend_and_finish(
    block: BlockParams,
    x: Tensor,
    q: Tensor,
    k_x: Tensor,
    v_x: Tensor,
    prompt: Optional[Tensor],
    n_seq: int,
) -> Tensor:
    """Block body after the input projections; lets callers share q/k/v of x
    across several prompt options."""
    d = block.w_q.data.shape[0]
    if prompt is not None and prompt.data.shape[0] > 0:
        if prompt.data.shape[1] != d:
            raise DimensionError(
                f"prompt width {prompt.data.shape[1]} does not match hidden dim {d}"
            )
        k_p = matmul(prompt, block.w_k)
        v_p = matmul(prompt, block.w_v)
    else:
        k_p = v_p = None
    att = prompted_attention(q, k_x, v_x, k_p, v_p, block.num_heads, n_seq)
    r1 = add(x, matmul(att, block.w_o))
    n1 = layer_norm(r1, block.ln1_gain, block.ln1_bias, LN_EPS)
    f = matmul(gelu(matmul(n1, block.w_ff1)), block.w_ff2)
    r2 = add(n1, f)
    return layer_norm(r2, block.ln2_gain, block.ln2_bias, LN_EPS)


def encode_branch(
    cfg: BranchConfig,
    blocks: Sequence[BlockParams],
    proj: Tensor,
    x0: Tensor,
    prompts: Sequence[Optional[Tensor]],
) -> Tensor:
    """Chain the blocks over one sequence, pool, project, L2-normalize."""
    return encode_branch_stack(cfg, blocks, proj, x0, 1, prompts)


def encode_branch_stack(
    cfg: BranchConfig,
    blocks: Sequence[BlockParams],
    proj: Tensor,
    x0: Tensor,
    n_seq: int,
    prompts: Sequence[Optional[Tensor]],
) -> Tensor:
    if len(prompts) != cfg.depth:
        raise ContractError(f"got {len(prompts)} prompts for depth {cfg.depth}")
    x = x0
    for block, prompt in zip(blocks, prompts):
        x = block_forward_stack(block, x, n_seq, prompt)
    c = cfg.base_seq_len
    pooled = take_rows(x, [i * c + cfg.pool_index for i in range(n_seq)])
    return l2_normalize_rows(matmul(pooled, proj))


def logits(image_emb: Tensor, text_embs: Tensor, tau: float = TAU) -> Tensor:
    """Softmax over cosine similarities divided by tau; expects unit rows."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    emb = image_emb if image_emb.data.ndim == 2 else Tensor(image_emb.data.reshape(1, -1))
    sims = matmul(emb, transpose(text_embs))
    return softmax_rows(scale(sims, 1.0 / tau))


class DualEncoder:
    """Frozen text/image encoder pair sharing an embedding space."""

    def __init__(
        self,
        seed: int,
        text_cfg: BranchConfig,
        image_cfg: BranchConfig,
        text_blocks: list[BlockParams],
        image_blocks: list[BlockParams],
        text_proj: Tensor,
        image_proj: Tensor,
        cls_token: Tensor,
        text_pos: Tensor,
        image_pos: Tensor,
        init_std: Optional[float],
    ):
        self.seed = seed
        self.text_cfg = text_cfg
        self.image_cfg = image_cfg
        self.text_blocks = text_blocks
        self.image_blocks = image_blocks
        self.text_proj = text_proj
        self.image_proj = image_proj
        self.cls_token = cls_token
        # positional information enters only here: frozen embeddings added to
        # the branch inputs; prompts and blocks stay position-free
        self.text_pos = text_pos
        self.image_pos = image_pos
        self.init_std = init_std

    # -- forward ----------------------------------------------------------

    def text_input_stack(self, sequences: np.ndarray) -> Tensor:
        """sequences: (n, base_seq_len, d_txt) -> stacked block input rows."""
        n, c, d = sequences.shape
        if c != self.text_cfg.base_seq_len or d != self.text_cfg.hidden_dim:
            raise DimensionError(
                f"text input {(n, c, d)} does not match config "
                f"({self.text_cfg.base_seq_len}, {self.text_cfg.hidden_dim})"
            )
        return Tensor((sequences + self.text_pos.data).reshape(n * c, d))

    def image_input_stack(self, patch_grids: np.ndarray) -> Tensor:
        """patch_grids: (n, patches, d_img) -> stacked rows with CLS prepended."""
        n, p, d = patch_grids.shape
        if p + 1 != self.image_cfg.base_seq_len or d != self.image_cfg.hidden_dim:
            raise DimensionError(
                f"image input {(n, p, d)} does not match config "
                f"({self.image_cfg.base_seq_len - 1} patches, {self.image_cfg.hidden_dim})"
            )
        with_cls = np.concatenate(
            [np.broadcast_to(self.cls_token.data, (n, 1, d)), patch_grids], axis=1
        )
        return Tensor((with_cls + self.image_pos.data).reshape(n * (p + 1), d))

    def encode_text_stack(self, sequences: np.ndarray, prompts=None) -> Tensor:
        """sequences: (n, base_seq_len, d_txt) -> (n, embed_dim) unit rows."""
        x0 = self.text_input_stack(sequences)
        prompts = prompts if prompts is not None else [None] * self.text_cfg.depth
        return encode_branch_stack(self.text_cfg, self.text_blocks, self.text_proj,
                                   x0, sequences.shape[0], prompts)

    def encode_image_stack(self, patch_grids: np.ndarray, prompts=None) -> Tensor:
        """patch_grids: (n, patches, d_img); a CLS slot is prepended to each."""
        x0 = self.image_input_stack(patch_grids)
        prompts = prompts if prompts is not None else [None] * self.image_cfg.depth
        return encode_branch_stack(self.image_cfg, self.image_blocks, self.image_proj,
                                   x0, patch_grids.shape[0], prompts)

    # -- bookkeeping -------------------------------------------------------

    def weight_items(self):
        """(name, tensor) pairs in declaration order; also the checkpoint order."""
        for branch, blocks in (("text", self.text_blocks), ("image", self.image_blocks)):
            for l, blk in enumerate(blocks):
                for f in BlockParams.FIELDS:
                    yield f"{branch}.{l}.{f}", getattr(blk, f)
        yield "text.proj", self.text_proj
        yield "image.proj", self.image_proj
        yield "image.cls", self.cls_token
        yield "text.pos", self.text_pos
        yield "image.pos", self.image_pos

    def weight_checksum(self) -> str:
        h = hashlib.sha256()
        for _, t in self.weight_items():
            h.update(t.data.astype("<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        header = {
            "kind": "model",
            "seed": self.seed,
            "init_std": self.init_std,
            "text_cfg": self.text_cfg.to_json(),
            "image_cfg": self.image_cfg.to_json(),
        }
        flat = np.concatenate([t.data.reshape(-1) for _, t in self.weight_items()])
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            f.write(flat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "DualEncoder":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl].decode("utf-8"))
        if header.get("kind") != "model":
            raise ContractError(f"{path} is not a model checkpoint")
        model = init_pretrained(
            header["seed"],
            BranchConfig.from_json(header["text_cfg"]),
            BranchConfig.from_json(header["image_cfg"]),
            init_std=header["init_std"],
        )
        flat = np.frombuffer(raw[nl + 1:], dtype="<f8")
        offset = 0
        for _, t in model.weight_items():
            n = t.data.size
            t.data = flat[offset:offset + n].reshape(t.data.shape).copy()
            offset += n
        if offset != flat.size:
            raise ContractError(f"checkpoint holds {flat.size} weights, expected {offset}")
        return model


def default_text_config() -> BranchConfig:
    return BranchConfig(depth=4, hidden_dim=32, num_heads=4, base_seq_len=8, pool="last")


def default_image_config() -> BranchConfig:
    # 4x4 patch grid plus CLS
    return BranchConfig(depth=4, hidden_dim=32, num_heads=4, base_seq_len=17, pool="first")


def _init_block(rng: np.random.Generator, cfg: BranchConfig, std: float) -> BlockParams:
    d = cfg.hidden_dim
    def w(r, c):
        return Tensor(rng.normal(0.0, std, size=(r, c)))
    return BlockParams(
        w_q=w(d, d), w_k=w(d, d), w_v=w(d, d), w_o=w(d, d),
        w_ff1=w(d, 4 * d), w_ff2=w(4 * d, d),
        ln1_gain=Tensor(np.ones(d)), ln1_bias=Tensor(np.zeros(d)),
        ln2_gain=Tensor(np.ones(d)), ln2_bias=Tensor(np.zeros(d)),
        num_heads=cfg.num_heads,
    )


def init_pretrained(
    seed: int,
    text_cfg: Optional[BranchConfig] = None,
    image_cfg: Optional[BranchConfig] = None,
    init_std: Optional[float] = None,
) -> DualEncoder:
    """Deterministic frozen surrogate for a pretrained dual encoder.

    Weights are Gaussian (layer-norm gains start at one, biases at zero) and
    never receive gradients; the same seed always yields a bit-identical
    model. The default std is 1/sqrt(hidden_dim) per branch, the scale at
    which attention scores and feed-forward activations stay O(1) at these
    widths; pass an explicit ``init_std`` to override.
    """
    text_cfg = text_cfg or default_text_config()
    image_cfg = image_cfg or default_image_config()
    rng = seeding.rng_from(seed, seeding.MODEL)
    text_std = init_std if init_std is not None else 1.0 / np.sqrt(text_cfg.hidden_dim)
    image_std = init_std if init_std is not None else 1.0 / np.sqrt(image_cfg.hidden_dim)
    text_blocks = [_init_block(rng, text_cfg, text_std) for _ in range(text_cfg.depth)]
    image_blocks = [_init_block(rng, image_cfg, image_std) for _ in range(image_cfg.depth)]
    embed_dim = text_cfg.hidden_dim
    text_proj = Tensor(rng.normal(0.0, text_std, size=(text_cfg.hidden_dim, embed_dim)))
    image_proj = Tensor(rng.normal(0.0, image_std, size=(image_cfg.hidden_dim, embed_dim)))
    cls_token = Tensor(rng.normal(0.0, 1.0, size=(1, image_cfg.hidden_dim)))
    text_pos = Tensor(rng.normal(0.0, 1.0, size=(text_cfg.base_seq_len, text_cfg.hidden_dim)))
    image_pos = Tensor(rng.normal(0.0, 1.0, size=(image_cfg.base_seq_len, image_cfg.hidden_dim)))
    return DualEncoder(
        seed, text_cfg, image_cfg, text_blocks, image_blocks,
        text_proj, image_proj, cls_token, text_pos, image_pos, init_std,
    )

import numpy as np
import pytest

from promptsearch import autodiff as ad
from promptsearch.autodiff import Tape, Tensor, backward
from promptsearch.encoder import (
    BranchConfig,
    DualEncoder,
    block_forward,
    block_forward_stack,
    encode_branch,
    init_pretrained,
    logits,
)
from promptsearch.errors import ContractError, DimensionError


@pytest.fixture(scope="module")
def model():
    return init_pretrained(0)


@pytest.fixture(scope="module")
def small_cfg():
    return BranchConfig(depth=2, hidden_dim=16, num_heads=4, base_seq_len=6)


@pytest.fixture()
def block(model):
    return model.text_blocks[0]


def rand_x(rng, rows=8, d=32):
    return Tensor(rng.normal(size=(rows, d)))


class TestBlockForward:
    def test_output_shape_preserved_for_all_prompt_lengths(self, block):
        rng = np.random.default_rng(0)
        x = rand_x(rng)
        for c in range(0, 17):
            prompt = Tensor(rng.normal(size=(c, 32))) if c else Tensor(np.zeros((0, 32)))
            out = block_forward(block, x, prompt)
            assert out.data.shape == (8, 32)

    def test_absent_prompt_is_plain_self_attention(self, block):
        rng = np.random.default_rng(1)
        x = rand_x(rng)
        assert np.array_equal(block_forward(block, x, None).data,
                              block_forward(block, x).data)

    def test_empty_prompt_equals_absent_prompt(self, block):
        rng = np.random.default_rng(2)
        x = rand_x(rng)
        empty = Tensor(np.zeros((0, 32)))
        assert np.array_equal(block_forward(block, x, empty).data,
                              block_forward(block, x, None).data)

    def test_prompt_width_mismatch(self, block):
        x = Tensor(np.zeros((4, 32)))
        with pytest.raises(DimensionError):
            block_forward(block, x, Tensor(np.zeros((2, 16))))

    def test_stack_matches_per_sequence(self, block):
        rng = np.random.default_rng(3)
        xs = [rand_x(rng) for _ in range(3)]
        prompt = Tensor(rng.normal(size=(4, 32)))
        stacked = Tensor(np.vstack([x.data for x in xs]))
        out = block_forward_stack(block, stacked, 3, prompt)
        singles = np.vstack([block_forward(block, x, prompt).data for x in xs])
        assert np.allclose(out.data, singles, atol=1e-12)

    def test_prompt_changes_output(self, block):
        rng = np.random.default_rng(4)
        x = rand_x(rng)
        prompt = Tensor(rng.normal(size=(4, 32)))
        base = block_forward(block, x, None).data
        assert np.abs(block_forward(block, x, prompt).data - base).max() > 1e-6


class TestEncodeBranch:
    def test_unit_norm_output(self, model):
        rng = np.random.default_rng(5)
        x0 = Tensor(rng.normal(size=(8, 32)))
        emb = encode_branch(model.text_cfg, model.text_blocks, model.text_proj,
                            x0, [None] * 4)
        assert abs(np.linalg.norm(emb.data) - 1.0) <= 1e-10

    def test_prompt_list_length_checked(self, model):
        x0 = Tensor(np.zeros((8, 32)))
        with pytest.raises(ContractError):
            encode_branch(model.text_cfg, model.text_blocks, model.text_proj, x0, [None] * 3)

    def test_permuting_non_pooled_positions_changes_output(self, model):
        # position enters via the model's frozen positional embeddings, so
        # swapping the content of two non-pooled slots must change the pooled
        # embedding
        rng = np.random.default_rng(6)
        seq = rng.normal(size=(1, 8, 32))
        emb1 = model.encode_text_stack(seq.copy()).data
        permuted = seq.copy()
        permuted[0, [1, 2]] = permuted[0, [2, 1]]
        emb2 = model.encode_text_stack(permuted).data
        assert np.abs(emb1 - emb2).max() > 1e-9

    def test_stack_matches_single(self, model):
        rng = np.random.default_rng(7)
        seqs = rng.normal(size=(3, 8, 32))
        stack = model.encode_text_stack(seqs)
        for i in range(3):
            single = encode_branch(model.text_cfg, model.text_blocks, model.text_proj,
                                   Tensor(seqs[i] + model.text_pos.data), [None] * 4)
            assert np.allclose(stack.data[i], single.data[0], atol=1e-12)


class TestLogits:
    def test_identical_text_embeddings_give_uniform(self):
        e = np.zeros((3, 8))
        e[:, 0] = 1.0
        img = Tensor(np.eye(8)[:1])
        out = logits(img, Tensor(e), tau=0.07)
        assert np.allclose(out.data, 1 / 3, atol=1e-12)

    def test_aligned_embedding_dominates(self):
        text = Tensor(np.eye(8)[:2])
        img = Tensor(np.eye(8)[:1])
        out = logits(img, text, tau=0.07)
        expected = np.exp(1 / 0.07) / (np.exp(1 / 0.07) + 1.0)
        assert out.data[0, 0] == pytest.approx(expected, rel=1e-12)
        assert out.data[0, 0] > 0.999999

    def test_sums_to_one(self):
        rng = np.random.default_rng(8)
        t = rng.normal(size=(5, 8))
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        i = rng.normal(size=8)
        i /= np.linalg.norm(i)
        out = logits(Tensor(i.reshape(1, -1)), Tensor(t))
        assert abs(out.data.sum() - 1.0) <= 1e-12

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ContractError):
            logits(Tensor(np.ones((1, 4))), Tensor(np.ones((2, 4))), tau=0.0)


class TestInitPretrained:
    def test_same_seed_same_checksum(self):
        assert init_pretrained(3).weight_checksum() == init_pretrained(3).weight_checksum()

    def test_different_seed_different_weights(self):
        assert init_pretrained(3).weight_checksum() != init_pretrained(4).weight_checksum()

    def test_weights_are_frozen(self, model):
        assert all(not t.requires_grad for _, t in model.weight_items())

    def test_frozen_weights_get_no_gradient(self, model):
        rng = np.random.default_rng(9)
        prompt = Tensor(rng.normal(size=(2, 32)), requires_grad=True)
        x = Tensor(rng.normal(size=(8, 32)))
        with Tape():
            out = block_forward(model.text_blocks[0], x, prompt)
            backward(ad.sum_all(out))
        assert prompt.grad is not None and np.abs(prompt.grad).max() > 0
        assert all(t.grad is None for _, t in model.weight_items())

    def test_custom_dims(self, small_cfg):
        m = init_pretrained(0, small_cfg, BranchConfig(2, 16, 4, 5, pool="first"))
        assert m.text_cfg.hidden_dim == 16
        emb = m.encode_text_stack(np.random.default_rng(0).normal(size=(2, 6, 16)))
        assert emb.data.shape == (2, 16)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, model, tmp_path):
        path = tmp_path / "model.bin"
        model.save(path)
        loaded = DualEncoder.load(path)
        assert loaded.weight_checksum() == model.weight_checksum()
        assert loaded.seed == model.seed

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b'{"kind": "other"}\n')
        with pytest.raises(ContractError):
            DualEncoder.load(path)


class TestBranchConfig:
    def test_head_divisibility(self):
        with pytest.raises(ContractError):
            BranchConfig(depth=2, hidden_dim=30, num_heads=4, base_seq_len=5)

    def test_depth_positive(self):
        with pytest.raises(ContractError):
            BranchConfig(depth=0, hidden_dim=32, num_heads=4, base_seq_len=5)

    def test_pool_index(self):
        assert BranchConfig(1, 8, 2, 5, pool="last").pool_index == 4
        assert BranchConfig(1, 8, 2, 5, pool="first").pool_index == 0

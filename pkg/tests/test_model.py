import numpy as np
import pytest

import tokenfuse as tf
from tokenfuse.model import forward_batch, load_checkpoint, save_checkpoint


def small_cfg(**kwargs):
    defaults = dict(layers=2, d_model=32, n_heads=4, d_ff=64, max_len=128,
                    dropout=0.1, vocab_text=300, vocab_audio=0)
    defaults.update(kwargs)
    return tf.ModelConfig(**defaults)


class TestInit:
    def test_seeded_determinism(self):
        cfg = small_cfg()
        a = tf.init_model(cfg, seed=4)
        b = tf.init_model(cfg, seed=4)
        for name in a.tensors:
            assert np.array_equal(a.tensors[name], b.tensors[name])
        c = tf.init_model(cfg, seed=5)
        assert not np.array_equal(a.tensors["embed"], c.tensors["embed"])

    def test_embedding_row_norms_near_one(self):
        norms = []
        for seed in range(5):
            ckpt = tf.init_model(small_cfg(d_model=64, n_heads=4), seed=seed)
            norms.append(np.linalg.norm(ckpt.embedding, axis=1).mean())
        assert abs(np.mean(norms) - 1.0) < 0.1

    def test_config_validation(self):
        with pytest.raises(ValueError, match="divisible"):
            small_cfg(d_model=30)
        with pytest.raises(ValueError, match="dropout"):
            small_cfg(dropout=1.0)
        with pytest.raises(ValueError, match="positional"):
            small_cfg(pos_scheme="sinusoidal")


class TestTiedHead:
    def test_logits_are_hidden_times_embed_transpose(self):
        ckpt = tf.init_model(small_cfg(), seed=0)
        ids = np.arange(10) % 300
        logits, hidden = tf.forward(ckpt, ids, return_hidden=True)
        assert np.allclose(logits, hidden @ ckpt.embedding.T, atol=1e-5)

    def test_no_separate_output_matrix(self):
        ckpt = tf.init_model(small_cfg(), seed=0)
        assert [n for n in ckpt.tensors if "embed" in n] == ["embed"]

    def test_perturbing_embed_row_moves_its_logit_and_embedding(self):
        ckpt = tf.init_model(small_cfg(), seed=1)
        base_out = tf.forward(ckpt, np.array([1, 2, 3]))
        base_in = tf.forward(ckpt, np.array([7, 7]))
        rng = np.random.default_rng(0)
        ckpt.tensors["embed"][7] += rng.normal(0, 0.5, size=32).astype(np.float32)
        assert not np.allclose(base_out[:, 7], tf.forward(ckpt, np.array([1, 2, 3]))[:, 7])
        assert not np.allclose(base_in, tf.forward(ckpt, np.array([7, 7])))


class TestSurgery:
    def test_paper_shape_and_zero_rows(self):
        ckpt = tf.init_model(small_cfg(d_model=64, vocab_text=300), seed=3)
        joint = tf.surgery(ckpt, 1024)
        assert joint.embedding.shape == (1324, 64)
        assert np.all(joint.embedding[300:] == 0.0)

    def test_text_rows_byte_identical(self):
        ckpt = tf.init_model(small_cfg(), seed=3)
        joint = tf.surgery(ckpt, 16)
        assert joint.embedding[:300].tobytes() == ckpt.embedding.tobytes()
        for name in ckpt.tensors:
            if name != "embed":
                assert joint.tensors[name].tobytes() == ckpt.tensors[name].tobytes()

    def test_logits_invariance_and_zero_audio_logits(self):
        ckpt = tf.init_model(small_cfg(), seed=6)
        joint = tf.surgery(ckpt, 64)
        rng = np.random.default_rng(0)
        for _ in range(10):
            ids = rng.integers(0, 300, size=int(rng.integers(2, 30)))
            before = tf.forward(ckpt, ids)
            after = tf.forward(joint, ids)
            assert np.array_equal(before, after[:, :300])
            assert np.all(after[:, 300:] == 0.0)

    def test_rejects_bad_input(self):
        ckpt = tf.init_model(small_cfg(), seed=0)
        with pytest.raises(ValueError, match="positive"):
            tf.surgery(ckpt, 0)
        joint = tf.surgery(ckpt, 8)
        with pytest.raises(ValueError, match="already"):
            tf.surgery(joint, 8)


class TestForward:
    def test_softmax_rows_sum_to_one(self):
        ckpt = tf.init_model(small_cfg(), seed=2)
        logits = tf.forward(ckpt, np.arange(12))
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_causality(self):
        ckpt = tf.init_model(small_cfg(), seed=2)
        ids = np.arange(16)
        base = tf.forward(ckpt, ids)
        changed = ids.copy()
        changed[10] = 250
        after = tf.forward(ckpt, changed)
        assert np.array_equal(base[:10], after[:10])
        assert not np.allclose(base[10:], after[10:])

    def test_eval_deterministic(self):
        ckpt = tf.init_model(small_cfg(), seed=2)
        ids = np.arange(10)
        assert np.array_equal(tf.forward(ckpt, ids), tf.forward(ckpt, ids))

    def test_train_mode_dropout_seeded(self):
        ckpt = tf.init_model(small_cfg(), seed=2)
        ids = np.arange(10)
        a = tf.forward(ckpt, ids, mode="train", seed=7)
        b = tf.forward(ckpt, ids, mode="train", seed=7)
        c = tf.forward(ckpt, ids, mode="train", seed=8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_input_validation(self):
        ckpt = tf.init_model(small_cfg(), seed=0)
        with pytest.raises(ValueError, match="vocabulary"):
            tf.forward(ckpt, [300])
        with pytest.raises(ValueError, match="max_len"):
            tf.forward(ckpt, np.zeros(200, dtype=int))
        with pytest.raises(ValueError, match="mode"):
            tf.forward(ckpt, [1], mode="test")


class TestDecode:
    def test_zero_temperature_equals_greedy(self):
        ckpt = tf.init_model(small_cfg(), seed=9)
        prefix = [5, 6, 7]
        greedy = tf.decode(ckpt, prefix, max_new=12, strategy="greedy")
        cold = tf.decode(ckpt, prefix, max_new=12, strategy="temperature",
                         temperature=1e-12, seed=3)
        assert np.array_equal(greedy.ids, cold.ids)

    def test_prefix_reproduced(self):
        ckpt = tf.init_model(small_cfg(), seed=9)
        prefix = [11, 22, 33, 44]
        out = tf.decode(ckpt, prefix, max_new=5)
        assert list(out.ids[:4]) == prefix
        assert out.prefix_length == 4
        assert len(out.continuation) == 5

    def test_eos_stops_without_emitting(self):
        ckpt = tf.init_model(small_cfg(), seed=9)
        prefix = [1, 2]
        free = tf.decode(ckpt, prefix, max_new=10)
        eos = int(free.continuation[0])
        stopped = tf.decode(ckpt, prefix, max_new=10, eos_id=eos)
        assert stopped.stop_reason == "eos"
        assert len(stopped.continuation) == 0

    def test_temperature_sampling_seeded(self):
        ckpt = tf.init_model(small_cfg(), seed=9)
        a = tf.decode(ckpt, [1], max_new=8, strategy="temperature", temperature=1.0, seed=1)
        b = tf.decode(ckpt, [1], max_new=8, strategy="temperature", temperature=1.0, seed=1)
        assert np.array_equal(a.ids, b.ids)

    def test_overlength_rejected(self):
        ckpt = tf.init_model(small_cfg(), seed=0)
        with pytest.raises(ValueError, match="max_len"):
            tf.decode(ckpt, [1] * 100, max_new=100)


class TestCheckpointIO:
    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = tf.surgery(tf.init_model(small_cfg(), seed=5), 32)
        ckpt.step = 77
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ckpt, config_hash="cafe")
        back = load_checkpoint(path)
        assert back.config == ckpt.config
        assert back.step == 77
        for name in ckpt.tensors:
            assert np.array_equal(back.tensors[name], ckpt.tensors[name])
        assert path.read_bytes()[:4] == b"TFK1"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_checkpoint_shape_validation(self):
        ckpt = tf.init_model(small_cfg(), seed=0)
        tensors = {k: v.copy() for k, v in ckpt.tensors.items()}
        tensors["embed"] = tensors["embed"][:10]
        with pytest.raises(ValueError, match="shape"):
            tf.Checkpoint(ckpt.config, tensors)

    def test_checkpoint_rejects_nonfinite(self):
        ckpt = tf.init_model(small_cfg(), seed=0)
        tensors = {k: v.copy() for k, v in ckpt.tensors.items()}
        tensors["embed"][0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            tf.Checkpoint(ckpt.config, tensors)


def test_batched_forward_matches_single():
    ckpt = tf.init_model(small_cfg(), seed=1)
    rng = np.random.default_rng(2)
    ids = rng.integers(0, 300, size=(3, 9))
    batched, _, _ = forward_batch(ckpt, ids)
    for row in range(3):
        single = tf.forward(ckpt, ids[row])
        assert np.allclose(batched[row], single, atol=1e-6)

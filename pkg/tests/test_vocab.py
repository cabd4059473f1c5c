import numpy as np
import pytest

import tokenfuse as tf
from tokenfuse.quantizer import AudioTokenSeq
from tokenfuse.vocab import (
    EOS_ID,
    JointVocabulary,
    alias_for,
    load_vocab,
    save_vocab,
    stage_marker,
)


@pytest.fixture
def vocab():
    return tf.build_joint_vocab(t=300, a=1024)


def make_record(**kwargs):
    from tokenfuse.mixture import DatasetRecord

    defaults = dict(
        audio=AudioTokenSeq([5, 6, 7], codebook_id="cb1"),
        transcript="hello there",
        translated_audio=AudioTokenSeq([9, 10], codebook_id="cb1"),
        translated_transcript="bonjour",
        source_language="English",
        target_language="French",
        dataset_id="d",
    )
    defaults.update(kwargs)
    return DatasetRecord(**defaults)


class TestJointVocabulary:
    def test_layout(self, vocab):
        assert vocab.total == 1324
        assert vocab.audio_id(0) == 300
        assert vocab.audio_id(1023) == 1323
        assert vocab.is_audio_id(300) and not vocab.is_audio_id(299)

    def test_audio_inventory_is_1024_by_default(self):
        assert tf.build_joint_vocab().a == 1024

    def test_unicode_round_trip(self, vocab):
        for text in ("über 🎧", "héllo wörld", "日本語テスト", "plain ascii"):
            assert vocab.decode_text(vocab.encode_text(text)) == text

    def test_arbitrary_bytes_round_trip(self, vocab):
        rng = np.random.default_rng(0)
        for _ in range(200):
            blob = bytes(rng.integers(0, 256, size=rng.integers(0, 60)))
            assert vocab.decode_bytes(vocab.encode_bytes(blob)) == blob

    def test_merges_fire_on_tag_words(self, vocab):
        ids = vocab.encode_text("[ASR French]")
        # "[ASR" + " " + "French" + "]" with merge tokens for the words
        assert len(ids) == 4
        assert all(i >= 256 or i == 32 for i in ids)

    def test_byte_coverage_required(self):
        with pytest.raises(ValueError, match="byte"):
            tf.build_joint_vocab(t=200, a=8)

    def test_encode_never_emits_eos(self, vocab):
        rng = np.random.default_rng(1)
        for _ in range(100):
            blob = bytes(rng.integers(0, 256, size=40))
            assert EOS_ID not in vocab.encode_bytes(blob)

    def test_manifest_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        save_vocab(path, vocab)
        back = load_vocab(path)
        assert back == vocab
        text = "[S2ST English French] mixed bytes \xe9"
        assert back.encode_text(text) == vocab.encode_text(text)


class TestTaskTag:
    def test_render_paper_surface_forms(self):
        assert tf.render_tag(tf.TaskTag(("ASR",), "French")) == "[ASR French]"
        assert tf.render_tag(tf.TaskTag(("TTS",), "English")) == "[TTS English]"
        assert (
            tf.render_tag(tf.TaskTag(("S2ST",), "English", "French"))
            == "[S2ST English French]"
        )
        assert (
            tf.render_tag(tf.TaskTag(("ASR", "AST", "S2ST"), "English", "French"))
            == "[ASR AST S2ST English French]"
        )

    def test_target_language_rules(self):
        with pytest.raises(ValueError, match="target"):
            tf.TaskTag(("AST",), "English")
        with pytest.raises(ValueError, match="no target"):
            tf.TaskTag(("ASR",), "English", "French")

    def test_chain_ordering(self):
        with pytest.raises(ValueError, match="ordering"):
            tf.TaskTag(("AST", "ASR"), "English", "French")
        with pytest.raises(ValueError, match="combined"):
            tf.TaskTag(("TTS", "ASR"), "English")
        tf.TaskTag(("ASR", "AST"), "English", "French")  # valid

    def test_language_names_single_word(self):
        with pytest.raises(ValueError, match="language"):
            tf.TaskTag(("ASR",), "Middle English")

    def test_render_injective_on_samples(self):
        tags = [
            tf.TaskTag(("ASR",), lang) for lang in ("English", "French", "German")
        ]
        tags += [
            tf.TaskTag((c,), "English", "French") for c in ("AST", "S2ST", "MT")
        ]
        tags += [
            tf.TaskTag(("ASR", "AST"), "English", "French"),
            tf.TaskTag(("ASR", "AST", "S2ST"), "English", "French"),
            tf.TaskTag(("TTS",), "English"),
        ]
        rendered = [tf.render_tag(t) for t in tags]
        assert len(set(rendered)) == len(tags)

    def test_parse_round_trip(self):
        for tag in (
            tf.TaskTag(("ASR",), "French"),
            tf.TaskTag(("S2ST",), "English", "French"),
            tf.TaskTag(("ASR", "AST", "S2ST"), "English", "French"),
        ):
            assert tf.parse_tag_text(tf.render_tag(tag)) == tag

    def test_alias_parses_to_same_tag(self):
        tag = tf.TaskTag(("ASR",), "French")
        assert tf.parse_tag_text("transcribe the following French audio") == tag
        tag2 = tf.TaskTag(("AST",), "English", "French")
        assert tf.parse_tag_text(alias_for(tag2)) == tag2


class TestSerializeExample:
    def test_asr_mask_lengths(self, vocab):
        record = make_record()
        tag = tf.TaskTag(("ASR",), "English")
        ex = tf.serialize_example(record, tag, vocab)
        tag_len = len(vocab.encode_text("[ASR English]"))
        assert ex.prefix_length == tag_len + 3  # three audio tokens
        mask_on = int(np.sum(ex.loss_mask))
        marker_len = len(vocab.encode_text("[ASR]"))
        transcript_len = len(vocab.encode_text(" hello there"))
        assert mask_on == marker_len + transcript_len + 1  # + end sentinel

    def test_mask_is_step_shaped(self, vocab):
        record = make_record()
        for chain in (("ASR",), ("TTS",), ("MT",), ("ASR", "AST", "S2ST")):
            target = "French" if chain[-1] in ("AST", "S2ST", "MT") else None
            ex = tf.serialize_example(record, tf.TaskTag(chain, "English", target), vocab)
            diffs = np.diff(ex.loss_mask.astype(int))
            assert np.all(diffs >= 0)
            assert ex.loss_mask[0] == 0 and ex.loss_mask[-1] == 1

    def test_combined_has_three_spans_in_order(self, vocab):
        record = make_record()
        tag = tf.TaskTag(("ASR", "AST", "S2ST"), "English", "French")
        ex = tf.serialize_example(record, tag, vocab)
        assert [s[0] for s in ex.stage_spans] == ["ASR", "AST", "S2ST"]
        # spans partition the mask-1 region
        assert ex.stage_spans[0][1] == ex.prefix_length
        for left, right in zip(ex.stage_spans, ex.stage_spans[1:]):
            assert left[2] == right[1]
        assert ex.stage_spans[-1][2] == len(ex)

    def test_mt_has_no_audio_ids(self, vocab):
        record = make_record()
        ex = tf.serialize_example(record, tf.TaskTag(("MT",), "English", "French"), vocab)
        assert all(not vocab.is_audio_id(int(i)) for i in ex.ids)

    def test_all_ids_in_range(self, vocab):
        record = make_record()
        for chain in (("ASR",), ("AST",), ("S2ST",), ("TTS",), ("MT",)):
            target = "French" if chain[-1] in ("AST", "S2ST", "MT") else None
            ex = tf.serialize_example(record, tf.TaskTag(chain, "English", target), vocab)
            assert int(ex.ids.max()) < vocab.total
            assert int(ex.ids.min()) >= 0

    def test_ends_with_eos(self, vocab):
        ex = tf.serialize_example(make_record(), tf.TaskTag(("ASR",), "English"), vocab)
        assert ex.ids[-1] == EOS_ID
        assert ex.loss_mask[-1] == 1

    def test_missing_field_error(self, vocab):
        record = make_record(translated_audio=None)
        with pytest.raises(ValueError, match="translated_audio"):
            tf.serialize_example(
                record, tf.TaskTag(("S2ST",), "English", "French"), vocab
            )

    def test_mixed_codebooks_rejected(self, vocab):
        record = make_record(translated_audio=AudioTokenSeq([1], codebook_id="other"))
        with pytest.raises(ValueError, match="codebook"):
            tf.serialize_example(
                record, tf.TaskTag(("ASR", "AST", "S2ST"), "English", "French"), vocab
            )

    def test_audio_token_exceeding_vocab_rejected(self):
        small = tf.build_joint_vocab(t=300, a=4)
        record = make_record(audio=AudioTokenSeq([9], codebook_id="cb1"))
        with pytest.raises(ValueError, match="exceeds"):
            tf.serialize_example(record, tf.TaskTag(("ASR",), "English"), small)

    def test_alias_form_differs_only_in_tag_prefix(self, vocab):
        record = make_record()
        tag = tf.TaskTag(("ASR",), "English")
        bracket = tf.serialize_example(record, tag, vocab)
        alias = tf.serialize_example(record, tag, vocab, tag_text=alias_for(tag))
        tag_len_b = len(vocab.encode_text(tf.render_tag(tag)))
        tag_len_a = len(vocab.encode_text(alias_for(tag)))
        assert np.array_equal(bracket.ids[tag_len_b:], alias.ids[tag_len_a:])
        assert int(np.sum(bracket.loss_mask)) == int(np.sum(alias.loss_mask))


class TestParseStages:
    def test_two_stage_split(self, vocab):
        ids = vocab.encode_text("[ASR] hello [AST] bonjour")
        parsed = tf.parse_stages(ids, vocab)
        assert [(p.stage, p.text(vocab)) for p in parsed] == [
            ("ASR", "hello"),
            ("AST", "bonjour"),
        ]

    def test_single_stage_marker_at_start(self, vocab):
        ids = vocab.encode_text("[ASR] one two three")
        parsed = tf.parse_stages(ids, vocab)
        assert len(parsed) == 1
        assert parsed[0].text(vocab) == "one two three"

    def test_spans_partition_sequence(self, vocab):
        ids = vocab.encode_text("[ASR] hi [AST] salut [S2ST]") + [
            vocab.audio_id(3),
            vocab.audio_id(4),
        ]
        parsed = tf.parse_stages(ids, vocab)
        assert parsed[0].span[0] == 0
        for left, right in zip(parsed, parsed[1:]):
            assert left.span[1] == right.span[0]
        assert parsed[-1].span[1] == len(ids)
        assert np.array_equal(
            parsed[-1].audio_tokens(vocab), np.array([3, 4])
        )

    def test_round_trip_with_serialize(self, vocab):
        rng = np.random.default_rng(42)
        words = ["ba", "do", "ki", "mu", "ze"]
        chains = [("ASR",), ("AST",), ("MT",), ("TTS",), ("S2ST",),
                  ("ASR", "AST"), ("ASR", "AST", "S2ST")]
        for _ in range(1000):
            n = int(rng.integers(1, 5))
            text = " ".join(rng.choice(words, size=n))
            ttext = " ".join(rng.choice(words, size=n))
            record = make_record(
                audio=AudioTokenSeq(rng.integers(0, 50, size=rng.integers(1, 12)),
                                    codebook_id="cb"),
                transcript=text,
                translated_audio=AudioTokenSeq(rng.integers(0, 50, size=rng.integers(1, 12)),
                                               codebook_id="cb"),
                translated_transcript=ttext,
            )
            chain = chains[int(rng.integers(0, len(chains)))]
            target = "French" if chain[-1] in ("AST", "S2ST", "MT") else None
            ex = tf.serialize_example(record, tf.TaskTag(chain, "English", target), vocab)
            continuation = ex.ids[ex.prefix_length:]
            parsed = tf.parse_stages(continuation, vocab, expected=chain)
            assert [p.stage for p in parsed] == list(chain)
            for p, (stage, start, end) in zip(parsed, ex.stage_spans):
                marker_len = len(vocab.encode_text(stage_marker(stage)))
                expected_ids = ex.ids[start + marker_len : end]
                if end == len(ex):
                    expected_ids = expected_ids[:-1]  # drop the end sentinel
                assert np.array_equal(p.ids, expected_ids)

    def test_unmarked_prefix_uses_expected(self, vocab):
        ids = vocab.encode_text("hello [AST] bonjour")
        parsed = tf.parse_stages(ids, vocab, expected=("ASR", "AST"))
        assert parsed[0].stage == "ASR"
        assert parsed[0].text(vocab) == "hello"
        with pytest.raises(ValueError, match="unmarked"):
            tf.parse_stages(ids, vocab)

    def test_no_marker_multi_stage_error(self, vocab):
        ids = vocab.encode_text("just some words")
        with pytest.raises(ValueError, match="stage marker"):
            tf.parse_stages(ids, vocab, expected=("ASR", "AST"))

    def test_no_marker_single_expected_ok(self, vocab):
        ids = vocab.encode_text("just some words")
        parsed = tf.parse_stages(ids, vocab, expected=("ASR",))
        assert parsed[0].stage == "ASR"
        assert parsed[0].text(vocab) == "just some words"

    def test_trailing_eos_dropped(self, vocab):
        ids = vocab.encode_text("[ASR] hi") + [EOS_ID]
        parsed = tf.parse_stages(ids, vocab)
        assert parsed[0].text(vocab) == "hi"

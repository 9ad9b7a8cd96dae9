"""Vocabulary, token codec roundtrips, and question-answer rendering."""

import json

import numpy as np
import pytest

from trajtoken.rqvae import ParityRecord, PatternCode
from trajtoken.tokens import (
    QaConditions,
    TokenSequenceError,
    Vocabulary,
    decode_pattern_tokens,
    encode_pattern_tokens,
    export_sft_jsonl,
    parity_to_token,
    render_qa_pair,
    split_answer_tokens,
    street_name,
    token_to_parity,
)

SIZES = (32, 64, 128, 256)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build(1520, SIZES)


def random_code(rng, sizes=SIZES):
    m = int(rng.integers(1, 30))
    indices = np.stack([rng.integers(0, c, size=m) for c in sizes])
    parity = ParityRecord(tuple(int(b) for b in rng.integers(0, 2, size=3)))
    return PatternCode(indices, parity)


class TestVocabulary:
    def test_total_size_formula(self, vocab):
        assert len(vocab) == 1520 + sum(SIZES) + 12
        assert len(vocab) == 2012

    def test_contiguous_ids(self, vocab):
        assert sorted(vocab.token_to_id.values()) == list(range(len(vocab)))

    def test_namespaces_disjoint(self, vocab):
        assert len(set(vocab.id_to_token)) == len(vocab)

    def test_range_checks(self, vocab):
        with pytest.raises(KeyError):
            vocab.road(1520)
        with pytest.raises(KeyError):
            vocab.pattern(0, 32)
        assert vocab.pattern(3, 255) == "<d_255>"

    def test_save_load_roundtrip(self, vocab, tmp_path):
        p = tmp_path / "v.json"
        vocab.save(p)
        back = Vocabulary.load(p)
        assert back.token_to_id == vocab.token_to_id
        assert back.codebook_sizes == vocab.codebook_sizes

    def test_load_rejects_tampered_file(self, vocab, tmp_path):
        p = tmp_path / "v.json"
        vocab.save(p)
        doc = json.loads(p.read_text())
        doc["tokens"]["<road_0>"], doc["tokens"]["<road_1>"] = (
            doc["tokens"]["<road_1>"],
            doc["tokens"]["<road_0>"],
        )
        p.write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            Vocabulary.load(p)


class TestParityTokens:
    def test_111_is_t7(self):
        assert parity_to_token(ParityRecord((1, 1, 1))) == "<t_7>"

    def test_000_is_t0(self):
        assert parity_to_token(ParityRecord((0, 0, 0))) == "<t_0>"

    def test_011_is_t3(self):
        # the 26-point downsampling record, big-endian
        assert parity_to_token(ParityRecord((0, 1, 1))) == "<t_3>"

    def test_all_eight_roundtrip(self):
        for k in range(8):
            parity = token_to_parity(f"<t_{k}>")
            assert parity_to_token(parity) == f"<t_{k}>"

    def test_bad_length_token(self):
        with pytest.raises(TokenSequenceError):
            token_to_parity("<t_8>")
        with pytest.raises(TokenSequenceError):
            token_to_parity("<a_1>")


class TestCodec:
    def test_direct_construction(self, vocab):
        code = PatternCode(np.array([[5], [2], [9], [100]]), ParityRecord((0, 0, 0)))
        toks = encode_pattern_tokens(code, vocab)
        assert "".join(toks) == (
            "<|t_begin|><t_0><|t_end|><|p_begin|><a_5><b_2><c_9><d_100><|p_end|>"
        )

    def test_roundtrip_1000_random_codes(self, vocab, rng):
        for _ in range(1000):
            code = random_code(rng)
            back = decode_pattern_tokens(encode_pattern_tokens(code, vocab), vocab)
            assert np.array_equal(back.indices, code.indices)
            assert back.parity == code.parity

    def test_token_count(self, vocab, rng):
        for _ in range(20):
            code = random_code(rng)
            toks = encode_pattern_tokens(code, vocab)
            # 4 boundary/length framing tokens + length token + 4 per position
            assert len(toks) == 4 * code.m + 5

    def test_namespace_order_violation(self, vocab):
        toks = ["<|t_begin|>", "<t_0>", "<|t_end|>", "<|p_begin|>",
                "<a_5>", "<a_6>", "<c_0>", "<d_0>", "<|p_end|>"]
        with pytest.raises(TokenSequenceError) as exc:
            decode_pattern_tokens(toks, vocab)
        assert exc.value.category == "namespace"
        assert exc.value.position == 5

    def test_missing_terminator(self, vocab):
        code = PatternCode(np.array([[1], [1], [1], [1]]), ParityRecord((0, 0, 0)))
        toks = encode_pattern_tokens(code, vocab)[:-1]
        with pytest.raises(TokenSequenceError) as exc:
            decode_pattern_tokens(toks, vocab)
        assert exc.value.category == "truncated"

    def test_region_not_multiple_of_levels(self, vocab):
        toks = ["<|t_begin|>", "<t_0>", "<|t_end|>", "<|p_begin|>",
                "<a_5>", "<b_0>", "<c_0>", "<|p_end|>"]
        with pytest.raises(TokenSequenceError) as exc:
            decode_pattern_tokens(toks, vocab)
        assert exc.value.category in ("region_length", "namespace")

    def test_duplicate_length_token(self, vocab):
        toks = ["<|t_begin|>", "<t_0>", "<|t_end|>", "<|p_begin|>",
                "<t_1>", "<b_0>", "<c_0>", "<d_0>", "<|p_end|>"]
        with pytest.raises(TokenSequenceError) as exc:
            decode_pattern_tokens(toks, vocab)
        assert exc.value.category == "length_token"

    def test_index_out_of_range(self, vocab):
        toks = ["<|t_begin|>", "<t_0>", "<|t_end|>", "<|p_begin|>",
                "<a_32>", "<b_0>", "<c_0>", "<d_0>", "<|p_end|>"]
        with pytest.raises(TokenSequenceError) as exc:
            decode_pattern_tokens(toks, vocab)
        assert exc.value.category == "index_range"

    def test_split_answer_tokens(self, vocab, rng):
        code = random_code(rng)
        toks = encode_pattern_tokens(code, vocab)
        assert split_answer_tokens("".join(toks)) == toks
        with pytest.raises(TokenSequenceError):
            split_answer_tokens("plain text")


class TestQaRendering:
    def _cond(self):
        return QaConditions(
            route_ids=[3, 5],
            road_names=["Street R0", "Street R0", "Street C2"],
            start_time_s=8.5 * 3600,
            travel_time_s=340.0,
            travel_distance_m=250.0,
            interval_s=10.0,
        )

    def test_deterministic(self, vocab):
        code = PatternCode(np.array([[1], [2], [3], [4]]), ParityRecord((1, 0, 1)))
        answer = encode_pattern_tokens(code, vocab)
        a = render_qa_pair(self._cond(), answer, vocab)
        b = render_qa_pair(self._cond(), answer, vocab)
        assert a == b

    def test_fields_rendered(self, vocab):
        q, a = render_qa_pair(self._cond(), ["<|t_begin|>"], vocab)
        assert "<road_3><road_5>" in q
        assert "08:30" in q
        assert "250.0 meters" in q
        assert "340 seconds" in q
        assert "10 seconds" in q
        assert "Street R0, Street C2" in q  # deduplicated, order kept

    def test_missing_conditions(self, vocab):
        cond = self._cond()
        cond.route_ids = []
        with pytest.raises(ValueError):
            render_qa_pair(cond, ["<|t_begin|>"], vocab)

    def test_street_names_cover_lattice(self):
        # 3x4 lattice: row streets then column streets, two directions each
        rows, cols = 3, 4
        v = 2 * (2 * rows * cols - rows - cols)
        names = {street_name(rows, cols, sid) for sid in range(v)}
        assert names == {f"Street R{r}" for r in range(rows)} | {
            f"Street C{c}" for c in range(cols)
        }


class TestSftExport:
    def test_export_roundtrip_and_determinism(self, vocab, rng, tmp_path):
        records = []
        for tid in range(10):
            code = random_code(rng)
            cond = QaConditions([tid], [f"Street R{tid}"], 3600.0 * tid, 60.0, 500.0, 5.0)
            records.append((tid, cond, encode_pattern_tokens(code, vocab)))
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert export_sft_jsonl(records, vocab, p1) == 10
        export_sft_jsonl(list(reversed(records)), vocab, p2)
        assert p1.read_bytes() == p2.read_bytes()  # stable id ordering
        for line in p1.read_text().splitlines():
            rec = json.loads(line)
            decode_pattern_tokens(split_answer_tokens(rec["answer"]), vocab)

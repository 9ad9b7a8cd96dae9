"""Expanded vocabulary, travel-pattern token codec, and SFT export.

Token layout for one trajectory:

    <|t_begin|> <t_k> <|t_end|> <|p_begin|> <a_i><b_i><c_i><d_i> ... <|p_end|>

with one namespaced pattern token per quantizer level at each encoded
position (position-major interleaving), and the length token index encoding
the three parity bits big-endian (t_7 <-> (1,1,1)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .rqvae import ParityRecord, PatternCode

LEVEL_LETTERS = "abcd"
BOUNDARY_TOKENS = ("<|t_begin|>", "<|t_end|>", "<|p_begin|>", "<|p_end|>")
NUM_LENGTH_TOKENS = 8

__all__ = [
    "Vocabulary",
    "TokenSequenceError",
    "parity_to_token",
    "token_to_parity",
    "encode_pattern_tokens",
    "decode_pattern_tokens",
    "render_qa_pair",
    "export_sft_jsonl",
    "split_answer_tokens",
    "street_name",
    "QaConditions",
]


class TokenSequenceError(ValueError):
    """Structurally invalid pattern token sequence."""

    def __init__(self, message: str, category: str, position: int | None = None):
        super().__init__(message)
        self.category = category
        self.position = position


@dataclass
class Vocabulary:
    """Road, pattern, length, and boundary tokens with contiguous ids."""

    num_road: int
    codebook_sizes: tuple[int, ...]
    token_to_id: dict[str, int]
    id_to_token: list[str]

    @classmethod
    def build(cls, num_road: int, codebook_sizes: Sequence[int]) -> "Vocabulary":
        if len(codebook_sizes) > len(LEVEL_LETTERS):
            raise ValueError(f"at most {len(LEVEL_LETTERS)} quantizer levels supported")
        tokens: list[str] = []
        tokens += [f"<road_{i}>" for i in range(num_road)]
        for letter, size in zip(LEVEL_LETTERS, codebook_sizes):
            tokens += [f"<{letter}_{i}>" for i in range(size)]
        tokens += [f"<t_{i}>" for i in range(NUM_LENGTH_TOKENS)]
        tokens += list(BOUNDARY_TOKENS)
        return cls(
            num_road,
            tuple(codebook_sizes),
            {t: i for i, t in enumerate(tokens)},
            tokens,
        )

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def num_levels(self) -> int:
        return len(self.codebook_sizes)

    def road(self, seg_id: int) -> str:
        if not 0 <= seg_id < self.num_road:
            raise KeyError(f"road id {seg_id} outside [0, {self.num_road})")
        return f"<road_{seg_id}>"

    def pattern(self, level: int, index: int) -> str:
        if not 0 <= index < self.codebook_sizes[level]:
            raise KeyError(
                f"pattern index {index} outside [0, {self.codebook_sizes[level]}) at level {level}"
            )
        return f"<{LEVEL_LETTERS[level]}_{index}>"

    def save(self, path: str | Path) -> None:
        doc = {
            "tokens": self.token_to_id,
            "meta": {"V": self.num_road, "codebook_sizes": list(self.codebook_sizes),
                     "L": self.num_levels},
        }
        Path(path).write_text(json.dumps(doc, indent=0, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        doc = json.loads(Path(path).read_text())
        meta = doc["meta"]
        vocab = cls.build(meta["V"], meta["codebook_sizes"])
        if vocab.token_to_id != doc["tokens"]:
            raise ValueError(f"vocabulary file {path} is inconsistent with its metadata")
        return vocab


def parity_to_token(parity: ParityRecord) -> str:
    """Big-endian bits in downsampling order: (1,1,1) -> <t_7>."""
    b1, b2, b3 = parity.bits
    return f"<t_{b1 * 4 + b2 * 2 + b3}>"


def token_to_parity(token: str) -> ParityRecord:
    if not (token.startswith("<t_") and token.endswith(">")):
        raise TokenSequenceError(f"not a length token: {token}", "length_token")
    k = int(token[3:-1])
    if not 0 <= k < NUM_LENGTH_TOKENS:
        raise TokenSequenceError(f"length token out of range: {token}", "length_token")
    return ParityRecord(((k >> 2) & 1, (k >> 1) & 1, k & 1))


def encode_pattern_tokens(code: PatternCode, vocab: Vocabulary) -> list[str]:
    """Serialize a pattern code; inverse of decode_pattern_tokens."""
    if code.num_levels != vocab.num_levels:
        raise ValueError(f"code has {code.num_levels} levels, vocabulary {vocab.num_levels}")
    out = ["<|t_begin|>", parity_to_token(code.parity), "<|t_end|>", "<|p_begin|>"]
    for j in range(code.m):
        for l in range(code.num_levels):
            out.append(vocab.pattern(l, int(code.indices[l, j])))
    out.append("<|p_end|>")
    return out


def _classify(token: str) -> tuple[str, int]:
    """(kind, value): kind in {boundary, length, pattern-<letter>, road, other}."""
    if token in BOUNDARY_TOKENS:
        return "boundary", BOUNDARY_TOKENS.index(token)
    if token.startswith("<") and token.endswith(">") and "_" in token:
        name, _, num = token[1:-1].partition("_")
        if num.isdigit():
            if name == "t":
                return "length", int(num)
            if name == "road":
                return "road", int(num)
            if name in LEVEL_LETTERS:
                return f"pattern-{name}", int(num)
    return "other", -1


def decode_pattern_tokens(tokens: Sequence[str], vocab: Vocabulary) -> PatternCode:
    """Parse and validate the serialized layout back into a PatternCode."""
    L = vocab.num_levels
    if len(tokens) < 6:
        raise TokenSequenceError("sequence too short for boundary structure", "truncated")
    if tokens[0] != "<|t_begin|>":
        raise TokenSequenceError(f"expected <|t_begin|> first, got {tokens[0]}", "boundary", 0)
    if tokens[2] != "<|t_end|>":
        raise TokenSequenceError(f"expected <|t_end|> at position 2, got {tokens[2]}", "boundary", 2)
    kind, _ = _classify(tokens[1])
    if kind != "length":
        raise TokenSequenceError(f"expected one length token, got {tokens[1]}", "length_token", 1)
    parity = token_to_parity(tokens[1])
    if tokens[3] != "<|p_begin|>":
        raise TokenSequenceError(f"expected <|p_begin|> at position 3, got {tokens[3]}", "boundary", 3)
    if tokens[-1] != "<|p_end|>":
        raise TokenSequenceError("missing <|p_end|> terminator", "truncated", len(tokens) - 1)

    region = tokens[4:-1]
    for pos, tok in enumerate(region):
        kind, _ = _classify(tok)
        if kind == "length":
            raise TokenSequenceError(f"duplicate length token at {tok}", "length_token", 4 + pos)
        if not kind.startswith("pattern-"):
            raise TokenSequenceError(f"unexpected token {tok} in pattern region", "namespace", 4 + pos)
    if len(region) % L:
        raise TokenSequenceError(
            f"pattern region length {len(region)} not a multiple of {L}", "region_length"
        )
    m = len(region) // L
    indices = np.zeros((L, m), dtype=int)
    for pos, tok in enumerate(region):
        l = pos % L
        kind, value = _classify(tok)
        expected = f"pattern-{LEVEL_LETTERS[l]}"
        if kind != expected:
            raise TokenSequenceError(
                f"namespace order violation at region position {pos}: got {tok}, "
                f"expected level '{LEVEL_LETTERS[l]}'",
                "namespace",
                4 + pos,
            )
        if value >= vocab.codebook_sizes[l]:
            raise TokenSequenceError(f"pattern index out of range: {tok}", "index_range", 4 + pos)
        indices[l, pos // L] = value
    return PatternCode(indices, parity)


# --- question-answer rendering ------------------------------------------------

@dataclass
class QaConditions:
    route_ids: Sequence[int]
    road_names: Sequence[str]
    start_time_s: float
    travel_time_s: float
    travel_distance_m: float
    interval_s: float


def render_qa_pair(cond: QaConditions, answer_tokens: Sequence[str], vocab: Vocabulary) -> tuple[str, str]:
    """Deterministic condition text plus the serialized answer string."""
    for fname in ("route_ids", "road_names"):
        if not getattr(cond, fname):
            raise ValueError(f"incomplete conditions: {fname} is empty")
    road_tokens = "".join(vocab.road(i) for i in cond.route_ids)
    names = ", ".join(dict.fromkeys(cond.road_names))  # dedupe, keep order
    hh = int(cond.start_time_s // 3600) % 24
    mm = int(cond.start_time_s % 3600) // 60
    question = (
        "Generate the travel pattern sequence for a trip with the following conditions. "
        f"Road segments: {road_tokens}. "
        f"Main roads: {names}. "
        f"Start time: {hh:02d}:{mm:02d}. "
        f"Travel time: {int(round(cond.travel_time_s))} seconds. "
        f"Travel distance: {cond.travel_distance_m:.1f} meters. "
        f"Sampling interval: {int(round(cond.interval_s))} seconds."
    )
    return question, "".join(answer_tokens)


def street_name(net_rows: int, net_cols: int, seg_id: int) -> str:
    """Synthetic street naming: east-west rows are 'Street R{r}', north-south
    columns 'Street C{c}', derived from the lattice construction order."""
    per_dir = 2
    row_streets = net_rows * (net_cols - 1) * per_dir
    if seg_id < row_streets:
        return f"Street R{(seg_id // per_dir) // (net_cols - 1)}"
    k = (seg_id - row_streets) // per_dir
    return f"Street C{k % net_cols}"


def export_sft_jsonl(records: Sequence[tuple[int, QaConditions, list[str]]], vocab: Vocabulary, path: str | Path) -> int:
    """Write {"question", "answer"} JSON lines ordered by trajectory id."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            count = 0
            for tid, cond, answer in sorted(records, key=lambda r: r[0]):
                q, a = render_qa_pair(cond, answer, vocab)
                fh.write(json.dumps({"id": tid, "question": q, "answer": a}) + "\n")
                count += 1
    except OSError as exc:
        raise OSError(f"failed writing SFT file {path}: {exc}") from exc
    return count


def split_answer_tokens(answer: str) -> list[str]:
    """Split a concatenated answer string back into tokens."""
    out = []
    i = 0
    while i < len(answer):
        if answer[i] != "<":
            raise TokenSequenceError(f"malformed answer text at offset {i}", "other")
        j = answer.index(">", i)
        out.append(answer[i : j + 1])
        i = j + 1
    return out

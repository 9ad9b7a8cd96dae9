"""Conditional autoregressive model over the expanded token vocabulary.

A small decoder-only transformer stands in for a fine-tuned LLM: conditions
are discretized into prefix tokens (start hour, log-spaced travel-time and
distance buckets, sampling interval, then the route's road tokens) and the
model is trained with next-token cross-entropy on the answer region only.
Sampling is grammar-constrained so every completed output parses back into
a pattern code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .nn import Tensor
from .tokens import (
    BOUNDARY_TOKENS,
    LEVEL_LETTERS,
    NUM_LENGTH_TOKENS,
    TokenSequenceError,
    Vocabulary,
    decode_pattern_tokens,
)

__all__ = [
    "LmConfig",
    "LmVocab",
    "ContextLengthError",
    "PatternLm",
    "train_lm",
    "generate",
    "structural_validity",
    "GenerationResult",
]

NUM_HOUR_BINS = 24
NUM_TIME_BINS = 16
NUM_DIST_BINS = 16
NUM_INTERVAL_BINS = 8


class ContextLengthError(ValueError):
    pass


@dataclass(frozen=True)
class LmConfig:
    layers: int = 4
    dim: int = 128
    heads: int = 4
    context: int = 512
    ffn_mult: int = 4

    def to_json(self) -> dict:
        return {"layers": self.layers, "dim": self.dim, "heads": self.heads,
                "context": self.context, "ffn_mult": self.ffn_mult}

    @classmethod
    def from_json(cls, doc: dict) -> "LmConfig":
        return cls(**doc)


def _log_edges(lo: float, hi: float, bins: int) -> np.ndarray:
    return np.geomspace(max(lo, 1e-6), hi, bins + 1)


@dataclass
class LmVocab:
    """Base vocabulary plus the discretized condition token block."""

    base: Vocabulary
    time_edges: np.ndarray
    dist_edges: np.ndarray
    interval_edges: np.ndarray
    extra_to_id: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        extras = (
            [f"<hour_{i}>" for i in range(NUM_HOUR_BINS)]
            + [f"<tt_{i}>" for i in range(NUM_TIME_BINS)]
            + [f"<dist_{i}>" for i in range(NUM_DIST_BINS)]
            + [f"<iv_{i}>" for i in range(NUM_INTERVAL_BINS)]
        )
        off = len(self.base)
        self.extra_to_id = {t: off + i for i, t in enumerate(extras)}

    def __len__(self) -> int:
        return len(self.base) + len(self.extra_to_id)

    @classmethod
    def fit(
        cls,
        base: Vocabulary,
        travel_times_s: Sequence[float],
        distances_m: Sequence[float],
        intervals_s: Sequence[float],
    ) -> "LmVocab":
        tt = np.asarray(travel_times_s, dtype=float)
        dd = np.asarray(distances_m, dtype=float)
        iv = np.asarray(intervals_s, dtype=float)
        return cls(
            base,
            _log_edges(tt.min() * 0.9, tt.max() * 1.1, NUM_TIME_BINS),
            _log_edges(dd.min() * 0.9, dd.max() * 1.1, NUM_DIST_BINS),
            _log_edges(iv.min() * 0.9, iv.max() * 1.1, NUM_INTERVAL_BINS),
        )

    def token_id(self, token: str) -> int:
        if token in self.extra_to_id:
            return self.extra_to_id[token]
        return self.base.token_to_id[token]

    @staticmethod
    def _bucket(x: float, edges: np.ndarray) -> int:
        return int(np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2))

    def condition_ids(
        self,
        route_ids: Sequence[int],
        start_time_s: float,
        travel_time_s: float,
        distance_m: float,
        interval_s: float,
    ) -> list[int]:
        hour = int(start_time_s // 3600) % NUM_HOUR_BINS
        toks = [
            f"<hour_{hour}>",
            f"<tt_{self._bucket(travel_time_s, self.time_edges)}>",
            f"<dist_{self._bucket(distance_m, self.dist_edges)}>",
            f"<iv_{self._bucket(interval_s, self.interval_edges)}>",
        ]
        ids = [self.extra_to_id[t] for t in toks]
        ids += [self.base.token_to_id[self.base.road(i)] for i in route_ids]
        return ids

    def to_json(self) -> dict:
        return {
            "V": self.base.num_road,
            "codebook_sizes": list(self.base.codebook_sizes),
            "time_edges": self.time_edges.tolist(),
            "dist_edges": self.dist_edges.tolist(),
            "interval_edges": self.interval_edges.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LmVocab":
        base = Vocabulary.build(doc["V"], doc["codebook_sizes"])
        return cls(
            base,
            np.array(doc["time_edges"]),
            np.array(doc["dist_edges"]),
            np.array(doc["interval_edges"]),
        )


class _LmBlock(nn.Module):
    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = nn.MultiHeadSelfAttention(cfg.dim, cfg.heads, rng, causal=True)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.fc1 = nn.Linear(cfg.dim, cfg.ffn_mult * cfg.dim, rng)
        self.fc2 = nn.Linear(cfg.ffn_mult * cfg.dim, cfg.dim, rng)

    def __call__(self, x: Tensor, valid_len: np.ndarray) -> Tensor:
        x = x + self.attn(self.norm1(x), valid_len)
        return x + self.fc2(self.fc1(self.norm2(x)).gelu())


class PatternLm(nn.Module):
    def __init__(self, vocab_size: int, cfg: LmConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, cfg.dim, rng)
        self.blocks = [_LmBlock(cfg, rng) for _ in range(cfg.layers)]
        self.norm_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, vocab_size, rng)
        self.pe = nn.sinusoidal_position_encoding(cfg.context, cfg.dim)

    def logits(self, tokens: np.ndarray, valid_len: np.ndarray) -> Tensor:
        """(B, T) int tokens -> (B, T, vocab) logits, causal + padding mask."""
        T = tokens.shape[1]
        if T > self.cfg.context:
            raise ContextLengthError(f"sequence length {T} exceeds context {self.cfg.context}")
        h = self.embed(tokens) + Tensor(self.pe[None, :T])
        for blk in self.blocks:
            h = blk(h, valid_len)
        return self.head(self.norm_f(h))

    # -- fast numpy-only inference with a KV cache ---------------------------

    def _np_block(self, blk: _LmBlock, x: np.ndarray, cache: dict, li: int) -> np.ndarray:
        def ln(z, mod):
            mu = z.mean(-1, keepdims=True)
            v = ((z - mu) ** 2).mean(-1, keepdims=True)
            return (z - mu) / np.sqrt(v + 1e-6) * mod.gamma.data + mod.beta.data

        B, T, D = x.shape
        heads = self.cfg.heads
        dh = D // heads
        h = ln(x, blk.norm1)
        q = h @ blk.attn.wq.weight.data + blk.attn.wq.bias.data
        k = h @ blk.attn.wk.weight.data + blk.attn.wk.bias.data
        v = h @ blk.attn.wv.weight.data + blk.attn.wv.bias.data
        if li in cache:
            k = np.concatenate([cache[li][0], k], axis=1)
            v = np.concatenate([cache[li][1], v], axis=1)
        cache[li] = (k, v)
        Tk = k.shape[1]
        qh = q.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, Tk, heads, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, Tk, heads, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh)
        # causal: query at absolute position Tk - T + t sees keys <= that position
        qpos = np.arange(Tk - T, Tk)[:, None]
        kpos = np.arange(Tk)[None, :]
        scores = np.where(kpos <= qpos, scores, nn.NEG_INF)
        scores -= scores.max(-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(-1, keepdims=True)
        out = (attn @ vh).transpose(0, 2, 1, 3).reshape(B, T, D)
        x = x + out @ blk.attn.wo.weight.data + blk.attn.wo.bias.data
        h = ln(x, blk.norm2)
        h = h @ blk.fc1.weight.data + blk.fc1.bias.data
        phi = 0.5 * (1.0 + _erf(h / math.sqrt(2.0)))
        h = h * phi
        return x + h @ blk.fc2.weight.data + blk.fc2.bias.data

    def np_logits_step(self, tokens: np.ndarray, cache: dict, pos_offset: int) -> np.ndarray:
        """Forward ``tokens`` (B, T) given cached keys/values; last-pos logits."""
        x = self.embed.weight.data[tokens] + self.pe[pos_offset : pos_offset + tokens.shape[1]]
        for li, blk in enumerate(self.blocks):
            x = self._np_block(blk, x, cache, li)
        h = x[:, -1, :]
        mu = h.mean(-1, keepdims=True)
        v = ((h - mu) ** 2).mean(-1, keepdims=True)
        h = (h - mu) / np.sqrt(v + 1e-6) * self.norm_f.gamma.data + self.norm_f.beta.data
        return h @ self.head.weight.data + self.head.bias.data


def _erf(x):
    from scipy.special import erf

    return erf(x)


# --- training -----------------------------------------------------------------

def cross_entropy_answer_only(
    model: PatternLm,
    tokens: np.ndarray,
    valid_len: np.ndarray,
    cond_len: np.ndarray,
) -> Tensor:
    """Mean next-token NLL over answer targets only."""
    x = tokens[:, :-1]
    y = tokens[:, 1:]
    logits = model.logits(x, np.maximum(valid_len - 1, 1))
    logp = logits.log_softmax(axis=-1)
    B, T = y.shape
    bi = np.repeat(np.arange(B), T)
    ti = np.tile(np.arange(T), B)
    picked = logp[(bi, ti, y.reshape(-1))].reshape(B, T)
    # target index in the original sequence is t+1; answers start at cond_len
    tgt_pos = np.arange(1, T + 1)[None, :]
    mask = (tgt_pos >= cond_len[:, None]) & (tgt_pos < valid_len[:, None])
    return -(picked * Tensor(mask.astype(float))).sum() * (1.0 / max(1, int(mask.sum())))


@dataclass
class LmCorpusItem:
    traj_id: int
    cond_ids: list[int]
    answer_ids: list[int]


def train_lm(
    corpus: Sequence[LmCorpusItem],
    vocab_size: int,
    cfg: LmConfig,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 3e-4,
    weight_decay: float = 0.01,
    seed: int = 0,
    log=None,
) -> tuple[PatternLm, list[float]]:
    for item in corpus:
        total = len(item.cond_ids) + len(item.answer_ids)
        if total > cfg.context:
            raise ContextLengthError(
                f"trajectory {item.traj_id}: sequence of {total} tokens exceeds context {cfg.context}"
            )
    model = PatternLm(vocab_size, cfg, seed=seed)
    opt = nn.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed + 1)
    n_batches = max(1, math.ceil(len(corpus) / batch_size))
    total_steps = epochs * n_batches
    losses = []
    step = 0
    seq_lens = np.array([len(c.cond_ids) + len(c.answer_ids) for c in corpus])
    for epoch in range(epochs):
        # batch similar lengths together to keep padding short
        order = rng.permutation(len(corpus))
        order = order[np.argsort(seq_lens[order], kind="stable")]
        starts = rng.permutation(range(0, len(corpus), batch_size))
        epoch_loss = 0.0
        count = 0
        for start in starts:
            chunk = [corpus[i] for i in order[start : start + batch_size]]
            lens = [len(c.cond_ids) + len(c.answer_ids) for c in chunk]
            T = max(lens)
            toks = np.zeros((len(chunk), T), dtype=int)
            vl = np.array(lens)
            cl = np.array([len(c.cond_ids) for c in chunk])
            for b, c in enumerate(chunk):
                seq = c.cond_ids + c.answer_ids
                toks[b, : len(seq)] = seq
            opt.lr = nn.cosine_lr(lr, step, total_steps)
            step += 1
            model.zero_grad()
            loss = cross_entropy_answer_only(model, toks, vl, cl)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"NaN loss at epoch {epoch}")
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(chunk)
            count += len(chunk)
        losses.append(epoch_loss / count)
        if log is not None:
            log(f"lm epoch {epoch + 1}/{epochs} loss={losses[-1]:.4f}")
    return model, losses


# --- constrained generation ---------------------------------------------------

@dataclass
class GenerationResult:
    tokens: list[str]
    complete: bool

    def token_text(self) -> str:
        return "".join(self.tokens)


class _Grammar:
    """Allowed-token mask per answer position for the serialized layout."""

    def __init__(self, vocab: LmVocab):
        base = vocab.base
        size = len(vocab)
        self.L = base.num_levels
        self.t_begin = base.token_to_id["<|t_begin|>"]
        self.t_end = base.token_to_id["<|t_end|>"]
        self.p_begin = base.token_to_id["<|p_begin|>"]
        self.p_end = base.token_to_id["<|p_end|>"]
        self.length_ids = [base.token_to_id[f"<t_{i}>"] for i in range(NUM_LENGTH_TOKENS)]
        self.level_ids = []
        for l, letter in enumerate(LEVEL_LETTERS[: self.L]):
            ids = [base.token_to_id[f"<{letter}_{i}>"] for i in range(base.codebook_sizes[l])]
            self.level_ids.append(ids)
        self.size = size

    def allowed(self, n_generated: int) -> np.ndarray:
        mask = np.full(self.size, False)
        if n_generated == 0:
            mask[self.t_begin] = True
        elif n_generated == 1:
            mask[self.length_ids] = True
        elif n_generated == 2:
            mask[self.t_end] = True
        elif n_generated == 3:
            mask[self.p_begin] = True
        else:
            p = n_generated - 4  # position inside the pattern region
            level = p % self.L
            mask[self.level_ids[level]] = True
            if level == 0 and p > 0:
                mask[self.p_end] = True
        return mask


def generate(
    model: PatternLm,
    vocab: LmVocab,
    condition_ids_batch: Sequence[Sequence[int]],
    temperature: float = 1.0,
    top_k: int = 50,
    max_tokens: int = 128,
    seed: int = 0,
) -> list[GenerationResult]:
    """Constrained batched sampling; temperature 0 means greedy."""
    grammar = _Grammar(vocab)
    rng = np.random.default_rng(seed)
    id_to_token = list(vocab.base.id_to_token) + [
        t for t, _ in sorted(vocab.extra_to_id.items(), key=lambda kv: kv[1])
    ]
    results: list[GenerationResult] = []
    for cond in condition_ids_batch:
        cache: dict = {}
        toks = np.array([cond], dtype=int)
        logits = model.np_logits_step(toks, cache, 0)[0]
        out_ids: list[int] = []
        complete = False
        pos = len(cond)
        for _ in range(max_tokens):
            mask = grammar.allowed(len(out_ids))
            masked = np.where(mask, logits, -np.inf)
            if temperature <= 0.0:
                nxt = int(np.argmax(masked))
            else:
                z = masked / temperature
                if top_k and top_k < mask.sum():
                    kth = np.partition(z, -top_k)[-top_k]
                    z = np.where(z >= kth, z, -np.inf)
                z = z - z.max()
                p = np.exp(z)
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            out_ids.append(nxt)
            if nxt == grammar.p_end:
                complete = True
                break
            logits = model.np_logits_step(np.array([[nxt]], dtype=int), cache, pos)[0]
            pos += 1
        results.append(GenerationResult([id_to_token[i] for i in out_ids], complete))
    return results


def structural_validity(results: Sequence[GenerationResult], vocab: Vocabulary) -> dict:
    """Fraction of outputs that parse, with per-category error counts."""
    categories: dict[str, int] = {}
    ok = 0
    for r in results:
        if not r.complete:
            categories["incomplete"] = categories.get("incomplete", 0) + 1
            continue
        try:
            decode_pattern_tokens(r.tokens, vocab)
            ok += 1
        except TokenSequenceError as exc:
            categories[exc.category] = categories.get(exc.category, 0) + 1
    total = len(results)
    return {
        "total": total,
        "valid": ok,
        "validity": ok / total if total else 0.0,
        "errors": categories,
    }

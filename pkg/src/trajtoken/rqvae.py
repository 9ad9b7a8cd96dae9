"""Trajectory RQ-VAE: a downsampling CNN/attention encoder that tracks the
odd/even length record, a multi-level residual quantizer with strictly
increasing codebook sizes, and a road-context decoder that predicts per-point
route-fraction increments and offsets.

Lengths shrink by ceil(l/2) three times; the three parity bits recorded on
the way down let the decoder restore the exact input length (2l - bit per
stage, reversed).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from . import nn
from .nn import Tensor
from .roadnet import RoadNetwork, Route, segment_spatial_input
from .traj import DatasetStats, GpsTrajectory, RelativeLabels, normalize_traj

__all__ = [
    "ParityRecord",
    "PatternCode",
    "RqvaeConfig",
    "TooShortError",
    "downsample_len",
    "upsample_len",
    "vq_lookup",
    "residual_quantize",
    "RqvaeModel",
    "TrainHistory",
    "train",
    "make_batches",
    "network_segment_coords",
    "TrajBatch",
]

NUM_DOWNSAMPLE_STEPS = 3


class TooShortError(ValueError):
    pass


@dataclass(frozen=True)
class ParityRecord:
    bits: tuple[int, int, int]

    def __post_init__(self) -> None:
        if len(self.bits) != NUM_DOWNSAMPLE_STEPS or any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"parity record must be 3 bits, got {self.bits}")


def downsample_len(n: int) -> tuple[int, ParityRecord]:
    """Apply l <- ceil(l/2) three times, recording l mod 2 before each step."""
    if n < 8:
        raise TooShortError(f"length {n} < 8 cannot survive three 2x downsamples")
    bits = []
    l = n
    for _ in range(NUM_DOWNSAMPLE_STEPS):
        bits.append(l % 2)
        l = (l + 1) // 2
    return l, ParityRecord(tuple(bits))


def upsample_len(m: int, parity: ParityRecord) -> int:
    """Inverse of downsample_len: l <- 2l - bit, bits applied in reverse."""
    l = m
    for bit in reversed(parity.bits):
        l = 2 * l - bit
    return l


@dataclass
class PatternCode:
    """Per-trajectory quantizer output: (L, m) level-major indices + parity."""

    indices: np.ndarray
    parity: ParityRecord

    @property
    def m(self) -> int:
        return self.indices.shape[1]

    @property
    def num_levels(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class RqvaeConfig:
    d: int = 64
    d_e: int = 256
    d_q: int = 64
    channels: tuple[int, ...] = (64, 128, 128, 256)
    head_dim: int = 64
    codebook_sizes: tuple[int, ...] = (32, 64, 128, 256)
    beta: float = 0.25
    road_embed_dim: int = 128
    road_transformer_layers: int = 4

    def __post_init__(self) -> None:
        if self.d_q >= self.d_e:
            raise ValueError("d_q must be smaller than d_e")
        if list(self.codebook_sizes) != sorted(set(self.codebook_sizes)):
            raise ValueError("codebook sizes must be strictly increasing")
        if len(self.channels) != NUM_DOWNSAMPLE_STEPS + 1 or self.channels[-1] != self.d_e:
            raise ValueError("channel schedule must have 4 entries ending at d_e")

    @property
    def num_levels(self) -> int:
        return len(self.codebook_sizes)

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "d_e": self.d_e,
            "d_q": self.d_q,
            "channels": list(self.channels),
            "head_dim": self.head_dim,
            "codebook_sizes": list(self.codebook_sizes),
            "beta": self.beta,
            "road_embed_dim": self.road_embed_dim,
            "road_transformer_layers": self.road_transformer_layers,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RqvaeConfig":
        return cls(
            d=doc["d"],
            d_e=doc["d_e"],
            d_q=doc["d_q"],
            channels=tuple(doc["channels"]),
            head_dim=doc["head_dim"],
            codebook_sizes=tuple(doc["codebook_sizes"]),
            beta=doc["beta"],
            road_embed_dim=doc["road_embed_dim"],
            road_transformer_layers=doc["road_transformer_layers"],
        )


# --- quantizer ---------------------------------------------------------------

def vq_lookup(h: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook row by Euclidean distance; ties to smallest index.

    ``h`` is (..., d); returns (indices (...,), embeddings (..., d)).
    """
    if codebook.size == 0:
        raise ValueError("empty codebook")
    flat = h.reshape(-1, h.shape[-1])
    # ||h - e||^2 = ||h||^2 - 2 h.e + ||e||^2; argmin picks the first on ties
    d2 = (
        (flat**2).sum(axis=1, keepdims=True)
        - 2.0 * flat @ codebook.T
        + (codebook**2).sum(axis=1)[None, :]
    )
    idx = np.argmin(d2, axis=1)
    return idx.reshape(h.shape[:-1]), codebook[idx].reshape(h.shape)


def residual_quantize(
    h_q: np.ndarray, codebooks: Sequence[np.ndarray]
) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Greedy level loop: quantize the running residual, then subtract.

    Returns (indices stacked level-major, per-level embeddings, summed
    quantized embedding).
    """
    residual = h_q
    indices = []
    embeddings = []
    total = np.zeros_like(h_q)
    for book in codebooks:
        idx, emb = vq_lookup(residual, book)
        indices.append(idx)
        embeddings.append(emb)
        total = total + emb
        residual = residual - emb
    return np.stack(indices), embeddings, total


# --- model blocks ------------------------------------------------------------

class _FeedForward(nn.Module):
    def __init__(self, dim: int, rng: np.random.Generator, hidden_mult: int = 2):
        self.fc1 = nn.Linear(dim, hidden_mult * dim, rng)
        self.fc2 = nn.Linear(hidden_mult * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class _EncoderBlock(nn.Module):
    """conv k3 -> self-attention -> stride-2 conv downsample."""

    def __init__(self, cin: int, cout: int, head_dim: int, rng: np.random.Generator):
        self.conv = nn.Conv1d(cin, cout, rng, stride=1)
        self.norm1 = nn.LayerNorm(cout)
        self.attn = nn.MultiHeadSelfAttention(cout, max(1, cout // head_dim), rng)
        self.norm2 = nn.LayerNorm(cout)
        self.down = nn.Conv1d(cout, cout, rng, stride=2)

    def __call__(self, x: Tensor, valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        mask = nn.valid_mask(valid, x.shape[1])
        h = self.conv(x * Tensor(mask)).gelu()
        h = h + self.attn(self.norm1(h), valid)
        h = self.norm2(h)
        h = self.down(h * Tensor(mask))
        return h, (valid + 1) // 2


class _DecoderBlock(nn.Module):
    """2x repeat upsample -> residual conv k3 -> self-attention -> road cross-attention.

    Residual paths throughout (projected skip around the channel-changing
    conv, pre-norm attention) so per-position content survives the stack.
    """

    def __init__(self, cin: int, cout: int, context_dim: int, head_dim: int, rng: np.random.Generator):
        self.skip = nn.Linear(cin, cout, rng)
        self.conv = nn.Conv1d(cin, cout, rng, stride=1)
        self.ramp = nn.Linear(2, cout, rng)
        self.norm1 = nn.LayerNorm(cout)
        self.attn = nn.MultiHeadSelfAttention(cout, max(1, cout // head_dim), rng)
        self.norm2 = nn.LayerNorm(cout)
        self.cross = nn.CrossAttention(cout, context_dim, max(1, cout // head_dim), rng)

    def __call__(
        self,
        x: Tensor,
        valid: np.ndarray,
        bits: np.ndarray,
        context: Tensor,
        context_valid: np.ndarray,
    ) -> tuple[Tensor, np.ndarray]:
        h = x.repeat2()
        valid = 2 * valid - bits  # parity trim drops the repeated tail position
        max_len = int(valid.max())
        h = h[:, :max_len, :]
        mask = nn.valid_mask(valid, max_len)
        h = self.skip(h) + self.conv(h * Tensor(mask)).gelu()
        # per-position progress fraction and rate: lets the stack express
        # position-dependent output without inferring length from attention
        pos = np.arange(max_len, dtype=float)[None, :]
        frac = (pos + 0.5) / valid[:, None]
        rate = np.broadcast_to(1.0 / valid[:, None], frac.shape)
        h = h + self.ramp(Tensor(np.stack([frac, rate], axis=-1) * mask))
        h = h + self.attn(self.norm1(h), valid)
        h = h + self.cross(self.norm2(h), context, context_valid)
        return h, valid


class RoadContextEncoder(nn.Module):
    """Learned segment embeddings + pooled linestring geometry, refined by a
    small transformer over the route sequence."""

    def __init__(self, num_segments: int, cfg: RqvaeConfig, rng: np.random.Generator):
        d_r = cfg.road_embed_dim
        self.table = nn.Embedding(num_segments, d_r, rng)
        self.spatial = nn.Linear(2, d_r, rng)
        self.blocks = [
            (
                nn.LayerNorm(d_r),
                nn.MultiHeadSelfAttention(d_r, max(1, d_r // cfg.head_dim), rng),
                nn.LayerNorm(d_r),
                _FeedForward(d_r, rng),
            )
            for _ in range(cfg.road_transformer_layers)
        ]
        # attribute scan needs flat module attributes for checkpointing
        for i, (n1, at, n2, ff) in enumerate(self.blocks):
            setattr(self, f"norm1_{i}", n1)
            setattr(self, f"attn_{i}", at)
            setattr(self, f"norm2_{i}", n2)
            setattr(self, f"ff_{i}", ff)
        del self.blocks
        self.num_layers = cfg.road_transformer_layers

    def pooled_spatial(self, seg_coords: Tensor, seg_mask: np.ndarray) -> Tensor:
        """Eq-style MeanPooling(Linear(S_i)) over (V, P, 2) padded coords."""
        return nn.mean_pool(self.spatial(seg_coords), seg_mask)

    def __call__(
        self,
        route_ids: np.ndarray,
        route_valid: np.ndarray,
        seg_coords: Tensor,
        seg_mask: np.ndarray,
    ) -> Tensor:
        h_g = self.table(route_ids)  # (B, n_r, d_r)
        pooled = self.pooled_spatial(seg_coords, seg_mask)  # (V, d_r)
        h_s = pooled.take_rows(route_ids)
        h = h_g + h_s
        pe = nn.sinusoidal_position_encoding(route_ids.shape[1], h.shape[-1])
        h = h + Tensor(pe[None])
        for i in range(self.num_layers):
            n1 = getattr(self, f"norm1_{i}")
            at = getattr(self, f"attn_{i}")
            n2 = getattr(self, f"norm2_{i}")
            ff = getattr(self, f"ff_{i}")
            h = h + at(n1(h), route_valid)
            h = h + ff(n2(h))
        return h


class _Head(nn.Module):
    """Two-layer MLP output head."""

    def __init__(self, dim: int, out: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(dim, dim, rng)
        self.fc2 = nn.Linear(dim, out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


@dataclass
class EncodeResult:
    h_e: Tensor  # (B, m, d_e)
    h_q: Tensor  # (B, m, d_q)
    valid_m: np.ndarray
    parities: list[ParityRecord]


@dataclass
class ForwardResult:
    percent_pred: Tensor  # (B, n, 1)
    offset_pred: Tensor  # (B, n, 2)
    indices: np.ndarray  # (L, B, m)
    h_q: Tensor
    level_embeddings: list[np.ndarray]
    quantized_sum: np.ndarray


class RqvaeModel(nn.Module):
    def __init__(self, cfg: RqvaeConfig, num_segments: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        ch = cfg.channels
        self.embed = nn.Linear(2, ch[0], rng)
        self.enc_blocks = [
            _EncoderBlock(ch[i], ch[i + 1], cfg.head_dim, rng)
            for i in range(NUM_DOWNSAMPLE_STEPS)
        ]
        self.enc_mid_norm = nn.LayerNorm(cfg.d_e)
        self.enc_mid_attn = nn.MultiHeadSelfAttention(cfg.d_e, cfg.d_e // cfg.head_dim, rng)
        self.to_q = nn.Linear(cfg.d_e, cfg.d_q, rng)

        self.codebooks = [
            nn.Parameter(rng.normal(0.0, 0.5, size=(c, cfg.d_q))) for c in cfg.codebook_sizes
        ]

        self.from_q = nn.Linear(cfg.d_q, cfg.d_e, rng)
        self.dec_mid_norm = nn.LayerNorm(cfg.d_e)
        self.dec_mid_attn = nn.MultiHeadSelfAttention(cfg.d_e, cfg.d_e // cfg.head_dim, rng)
        rev = list(reversed(ch))  # 256 -> 128 -> 128 -> 64
        self.dec_blocks = [
            _DecoderBlock(rev[i], rev[i + 1], cfg.road_embed_dim, cfg.head_dim, rng)
            for i in range(NUM_DOWNSAMPLE_STEPS)
        ]
        self.road = RoadContextEncoder(num_segments, cfg, rng)
        self.dec_out_norm = nn.LayerNorm(ch[0])
        self.percent_head = _Head(ch[0], 1, rng)
        self.offset_head = _Head(ch[0], 2, rng)

    # -- pieces --------------------------------------------------------------

    def encode(self, norm_points: np.ndarray, valid_n: np.ndarray) -> EncodeResult:
        """norm_points (B, n, 2) padded, valid_n per-element lengths."""
        parities = [downsample_len(int(n))[1] for n in valid_n]
        h = self.embed(Tensor(norm_points))
        pe = nn.sinusoidal_position_encoding(h.shape[1], h.shape[-1])
        h = h + Tensor(pe[None])
        valid = np.asarray(valid_n).copy()
        for blk in self.enc_blocks:
            h, valid = blk(h, valid)
        h = h + self.enc_mid_attn(self.enc_mid_norm(h), valid)
        h_q = self.to_q(h)
        return EncodeResult(h, h_q, valid, parities)

    def codebook_arrays(self) -> list[np.ndarray]:
        return [b.data for b in self.codebooks]

    def quantize(self, h_q_data: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
        return residual_quantize(h_q_data, self.codebook_arrays())

    def decode(
        self,
        quantized: Tensor,
        valid_m: np.ndarray,
        parities: list[ParityRecord],
        route_ids: np.ndarray,
        route_valid: np.ndarray,
        seg_coords: Tensor,
        seg_mask: np.ndarray,
    ) -> tuple[Tensor, Tensor, np.ndarray]:
        """quantized (B, m, d_q) -> (percent_pred, offset_pred, valid_n)."""
        context = self.road(route_ids, route_valid, seg_coords, seg_mask)
        h = self.from_q(quantized)
        h = h + self.dec_mid_attn(self.dec_mid_norm(h), valid_m)
        valid = valid_m.copy()
        bits = np.array([p.bits for p in parities])  # (B, 3), downsampling order
        for i, blk in enumerate(self.dec_blocks):
            stage_bits = bits[:, NUM_DOWNSAMPLE_STEPS - 1 - i]
            h, valid = blk(h, valid, stage_bits, context, route_valid)
        h = self.dec_out_norm(h)
        percent = self.percent_head(h).sigmoid()
        offset = self.offset_head(h)
        return percent, offset, valid

    def forward(self, batch: "TrajBatch") -> ForwardResult:
        enc = self.encode(batch.norm_points, batch.valid_n)
        indices, level_embs, total = self.quantize(enc.h_q.data)
        quantized = enc.h_q + Tensor(total - enc.h_q.data)  # straight-through
        percent, offset, valid_n = self.decode(
            quantized,
            enc.valid_m,
            enc.parities,
            batch.route_ids,
            batch.route_valid,
            batch.seg_coords,
            batch.seg_mask,
        )
        if not np.array_equal(valid_n, batch.valid_n):
            raise ValueError(f"decoded lengths {valid_n} do not match inputs {batch.valid_n}")
        return ForwardResult(percent, offset, indices, enc.h_q, level_embs, total)

    # -- losses ---------------------------------------------------------------

    def losses(
        self,
        result: ForwardResult,
        percent_labels: np.ndarray,
        offset_labels: np.ndarray,
        valid_n: np.ndarray,
        valid_m: np.ndarray,
        percent_weight: float = 1.0,
    ) -> dict[str, Tensor]:
        cfg = self.cfg
        B, m_cap = result.h_q.shape[0], result.h_q.shape[1]
        mask_m = nn.valid_mask(valid_m, m_cap)
        m_count = float(mask_m.sum())

        l_q = Tensor(0.0)
        residual_prefix = np.zeros_like(result.h_q.data)
        for l, book in enumerate(self.codebooks):
            emb = result.level_embeddings[l]
            idx = result.indices[l]
            h_l = result.h_q - Tensor(residual_prefix)  # residual entering level l
            e_l = book.take_rows(idx)
            codebook_pull = ((Tensor(h_l.data) - e_l) ** 2) * Tensor(mask_m)
            commit = ((h_l - Tensor(emb)) ** 2) * Tensor(mask_m)
            l_q = l_q + (codebook_pull.sum() + cfg.beta * commit.sum()) * (1.0 / m_count)
            residual_prefix = residual_prefix + emb
        l_q = l_q * (1.0 / cfg.num_levels)

        n_cap = result.percent_pred.shape[1]
        mask_n = nn.valid_mask(valid_n, n_cap)
        n_count = float(mask_n.sum())
        percent_err = ((result.percent_pred - Tensor(percent_labels[:, :, None])) ** 2) * Tensor(mask_n)
        l_percent = percent_err.sum() * (1.0 / n_count)
        offset_err = ((result.offset_pred - Tensor(offset_labels)) ** 2) * Tensor(mask_n)
        l_offset = offset_err.sum() * (1.0 / (2.0 * n_count))
        total = l_q + l_percent * percent_weight + l_offset
        return {"q": l_q, "percent": l_percent, "offset": l_offset, "total": total}


# --- batching ----------------------------------------------------------------

@dataclass
class TrajBatch:
    traj_ids: list[int]
    norm_points: np.ndarray  # (B, n_cap, 2)
    valid_n: np.ndarray
    percent_labels: np.ndarray  # (B, n_cap)
    offset_labels: np.ndarray  # (B, n_cap, 2)
    route_ids: np.ndarray  # (B, r_cap), padded with 0
    route_valid: np.ndarray
    seg_coords: Tensor
    seg_mask: np.ndarray


def network_segment_coords(net: RoadNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Padded (V, P, 2) normalized linestring coords + (V, P, 1) mask."""
    bbox = net.bbox()
    coords = [segment_spatial_input(s, bbox) for s in net.segments]
    p_cap = max(c.shape[0] for c in coords)
    out = np.zeros((len(coords), p_cap, 2))
    mask = np.zeros((len(coords), p_cap, 1))
    for i, c in enumerate(coords):
        out[i, : c.shape[0]] = c
        mask[i, : c.shape[0]] = 1.0
    return out, mask


def make_batches(
    trajs: Sequence[GpsTrajectory],
    labels: dict[int, RelativeLabels],
    stats: DatasetStats,
    seg_coords: np.ndarray,
    seg_mask: np.ndarray,
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> list[TrajBatch]:
    """Group trajectories by encoded length m to minimize padding waste."""
    groups: dict[int, list[int]] = {}
    for i, t in enumerate(trajs):
        m, _ = downsample_len(len(t))
        groups.setdefault(m, []).append(i)

    seg_coords_t = Tensor(seg_coords)
    batches = []
    for m in sorted(groups):
        idxs = groups[m]
        if rng is not None:
            idxs = [idxs[j] for j in rng.permutation(len(idxs))]
        for start in range(0, len(idxs), batch_size):
            chunk = [trajs[i] for i in idxs[start : start + batch_size]]
            n_cap = max(len(t) for t in chunk)
            r_cap = max(len(t.route_ids) for t in chunk)
            B = len(chunk)
            pts = np.zeros((B, n_cap, 2))
            val_n = np.zeros(B, dtype=int)
            perc = np.zeros((B, n_cap))
            offs = np.zeros((B, n_cap, 2))
            rids = np.zeros((B, r_cap), dtype=int)
            rval = np.zeros(B, dtype=int)
            for b, t in enumerate(chunk):
                n = len(t)
                pts[b, :n] = normalize_traj(t.points, stats.bbox)
                val_n[b] = n
                lab = labels[t.traj_id]
                perc[b, :n] = lab.rel_percent
                offs[b, :n] = lab.offsets
                rids[b, : len(t.route_ids)] = t.route_ids
                rval[b] = len(t.route_ids)
            batches.append(
                TrajBatch(
                    [t.traj_id for t in chunk],
                    pts,
                    val_n,
                    perc,
                    offs,
                    rids,
                    rval,
                    seg_coords_t,
                    seg_mask,
                )
            )
    if rng is not None:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


# --- training ----------------------------------------------------------------

@dataclass
class TrainHistory:
    epoch_losses: list[dict[str, float]] = field(default_factory=list)
    utilization: list[list[float]] = field(default_factory=list)  # per epoch, per level

    def to_json(self) -> dict:
        return {"epoch_losses": self.epoch_losses, "utilization": self.utilization}


def init_codebooks_from_batch(model: RqvaeModel, batch: TrajBatch, seed: int = 0) -> None:
    """Seed each level's rows by clustering the batch's residual embeddings.

    k-means centroids spread the rows over the residual distribution so
    every level starts with healthy utilization; tiny batches fall back
    to sampling the residuals directly.
    """
    rng = np.random.default_rng(seed)
    enc = model.encode(batch.norm_points, batch.valid_n)
    mask = nn.valid_mask(enc.valid_m, enc.h_q.shape[1])
    flat = enc.h_q.data.reshape(-1, model.cfg.d_q)
    valid = mask.reshape(-1) > 0
    residual = flat[valid]
    for book in model.codebooks:
        c = book.data.shape[0]
        if residual.shape[0] >= 2 * c:
            centers, _ = kmeans2(residual, c, iter=8, minit="++", seed=rng)
            book.data = centers + rng.normal(0.0, 1e-4, size=book.data.shape)
        else:
            picks = rng.choice(residual.shape[0], size=c, replace=residual.shape[0] < c)
            book.data = residual[picks] + rng.normal(0.0, 1e-4, size=book.data.shape)
        _, emb = vq_lookup(residual, book.data)
        residual = residual - emb


# consecutive unused batches before a codebook row is re-seeded during training
STALE_BATCHES = 3


def restart_dead_codes(
    model: RqvaeModel, used: list[set[int]], sample_residuals: list[np.ndarray], seed: int
) -> int:
    """Re-seed rows unused during the last epoch from recent residuals."""
    rng = np.random.default_rng(seed)
    restarted = 0
    for l, book in enumerate(model.codebooks):
        dead = [i for i in range(book.data.shape[0]) if i not in used[l]]
        pool = sample_residuals[l]
        if not len(dead) or pool.shape[0] == 0:
            continue
        picks = rng.choice(pool.shape[0], size=len(dead), replace=pool.shape[0] < len(dead))
        book.data[dead] = pool[picks] + rng.normal(0.0, 1e-4, size=(len(dead), book.data.shape[1]))
        restarted += len(dead)
    return restarted


def train(
    trajs: Sequence[GpsTrajectory],
    labels: dict[int, RelativeLabels],
    stats: DatasetStats,
    net: RoadNetwork,
    cfg: RqvaeConfig,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    percent_weight: float = 1.0,
    seed: int = 0,
    log=None,
) -> tuple[RqvaeModel, TrainHistory]:
    """AdamW + cosine decay training loop with utilization diagnostics.

    Aborts on a NaN loss, keeping the last finite-state parameters.
    """
    model = RqvaeModel(cfg, net.num_segments, seed=seed)
    seg_coords, seg_mask = network_segment_coords(net)
    rng = np.random.default_rng(seed + 1)

    # one oversized batch so even the largest codebook clusters a rich pool
    init_pool = make_batches(
        trajs[: min(len(trajs), 256)], labels, stats, seg_coords, seg_mask, 256
    )[0]
    init_codebooks_from_batch(model, init_pool, seed=seed + 2)

    opt = nn.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    history = TrainHistory()
    n_batches = max(1, math.ceil(len(trajs) / batch_size))
    total_steps = epochs * n_batches
    step = 0
    for epoch in range(epochs):
        batches = make_batches(trajs, labels, stats, seg_coords, seg_mask, batch_size, rng)
        sums = {"q": 0.0, "percent": 0.0, "offset": 0.0, "total": 0.0}
        used: list[set[int]] = [set() for _ in cfg.codebook_sizes]
        stale = [np.zeros(c, dtype=np.int64) for c in cfg.codebook_sizes]
        t0 = time.time()
        for batch in batches:
            opt.lr = nn.cosine_lr(lr, step, total_steps)
            step += 1
            model.zero_grad()
            result = model.forward(batch)
            losses = model.losses(
                result, batch.percent_labels, batch.offset_labels, batch.valid_n,
                np.array([downsample_len(int(n))[0] for n in batch.valid_n]),
                percent_weight=percent_weight,
            )
            total = losses["total"]
            if not np.isfinite(total.data):
                raise FloatingPointError(f"NaN/inf loss at epoch {epoch}, step {step}")
            total.backward()
            opt.step()
            for k in sums:
                sums[k] += losses[k].item()
            mask = nn.valid_mask(
                np.array([downsample_len(int(n))[0] for n in batch.valid_n]),
                result.h_q.shape[1],
            ).reshape(-1) > 0
            running = result.h_q.data.reshape(-1, cfg.d_q)[mask]
            pools, alive = [], []
            for l in range(cfg.num_levels):
                hit = np.unique(result.indices[l].reshape(-1)[mask])
                used[l].update(hit.tolist())
                stale[l] += 1
                stale[l][hit] = 0
                alive.append(set(np.flatnonzero(stale[l] < STALE_BATCHES).tolist()))
                pools.append(running.copy())
                _, emb = vq_lookup(running, model.codebooks[l].data)
                running = running - emb
            # rows idle for a few consecutive batches rejoin near live data
            restart_dead_codes(model, alive, pools, seed=seed + 100 + step)
            for l in range(cfg.num_levels):
                stale[l][stale[l] >= STALE_BATCHES] = 0
        util = [len(used[l]) / cfg.codebook_sizes[l] for l in range(cfg.num_levels)]
        avg = {k: v / len(batches) for k, v in sums.items()}
        history.epoch_losses.append(avg)
        history.utilization.append(util)
        if log is not None:
            log(
                f"epoch {epoch + 1}/{epochs} total={avg['total']:.5f} q={avg['q']:.5f} "
                f"percent={avg['percent']:.6f} offset={avg['offset']:.5f} "
                f"util={['%.2f' % u for u in util]} ({time.time() - t0:.1f}s)"
            )
    return model, history

"""Command-line pipeline: city synthesis, data simulation, labeling,
quantizer and language-model training, generation, reconstruction,
evaluation, plotting, and gradient checking.

Every command reads one JSON config (``--config``), applies ``--set
section.key=value`` overrides (flags win), and derives its randomness from
the root seed through named sub-streams so stages can be re-run
independently and reproducibly.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import nn
from . import patternlm as lm_mod
from . import rqvae as rq
from .config import ConfigError, PipelineConfig, sub_seed
from .geo import geodesic_m_arr
from .nn import Tensor
from .roadnet import (
    NoRouteError,
    RoadNetwork,
    Route,
    build_synthetic_city,
    load_network,
    route_polyline,
    save_network,
    shortest_path,
)
from .tokens import (
    QaConditions,
    TokenSequenceError,
    Vocabulary,
    decode_pattern_tokens,
    encode_pattern_tokens,
    export_sft_jsonl,
    split_answer_tokens,
    street_name,
)
from .traj import (
    MAX_POINTS,
    MIN_POINTS,
    CongestionZone,
    DatasetStats,
    GpsTrajectory,
    RelativeLabels,
    TooShortError,
    load_dataset,
    load_labels,
    make_labels,
    compute_dataset_stats,
    reconstruct_from_labels,
    save_dataset,
    save_labels,
    simulate_trajectory,
)

__all__ = ["main", "gradcheck_suite"]

RETRY_BUDGET = 10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: A003 - argparse API
        raise UsageError(message)


# --- shared IO helpers --------------------------------------------------------

def _load_stats(path: Path) -> DatasetStats:
    doc = json.loads(path.read_text())
    return DatasetStats(tuple(doc["bbox"]), tuple(doc["offset_scale"]))


def _save_stats(stats: DatasetStats, path: Path) -> None:
    path.write_text(
        json.dumps({"bbox": list(stats.bbox), "offset_scale": list(stats.offset_scale)}) + "\n"
    )


def _routes_for(net: RoadNetwork, trajs) -> dict[tuple[int, ...], Route]:
    cache: dict[tuple[int, ...], Route] = {}
    for t in trajs:
        key = tuple(t.route_ids)
        if key not in cache:
            cache[key] = route_polyline(net, list(key))
    return cache


def _load_rqvae(cfg: PipelineConfig) -> tuple[rq.RqvaeModel, DatasetStats]:
    path = cfg.path("rqvae.npz")
    meta = nn.read_meta(path)
    model_cfg = rq.RqvaeConfig.from_json(meta["rqvae"])
    model = rq.RqvaeModel(model_cfg, meta["num_segments"], seed=0)
    nn.load_checkpoint(model, path)
    stats = _load_stats(cfg.path("stats.json"))
    return model, stats


def _conditions_for(
    t: GpsTrajectory, route: Route, city_rows: int, city_cols: int
) -> QaConditions:
    names = [street_name(city_rows, city_cols, s) for s in t.route_ids]
    travel_time = (len(t) - 1) * t.sampling_interval_s
    return QaConditions(
        list(t.route_ids),
        names,
        t.start_time_s,
        travel_time,
        route.length_m,
        t.sampling_interval_s,
    )


def _save_codes(codes: dict[int, rq.PatternCode], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tid in sorted(codes):
            code = codes[tid]
            rec = {
                "traj_id": tid,
                "parity_bits": list(code.parity.bits),
                "indices": code.indices.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def _load_codes(path: Path) -> dict[int, rq.PatternCode]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{ln}: {exc}") from exc
            out[rec["traj_id"]] = rq.PatternCode(
                np.array(rec["indices"], dtype=int), rq.ParityRecord(tuple(rec["parity_bits"]))
            )
    return out


# --- subcommands --------------------------------------------------------------

def cmd_synth_city(cfg: PipelineConfig, args) -> int:
    net = build_synthetic_city(
        cfg.city.rows,
        cfg.city.cols,
        cfg.city.spacing_m,
        cfg.city.jitter_frac,
        seed=sub_seed(cfg.seed, "city"),
    )
    save_network(net, cfg.path("city.json"))
    print(f"wrote {cfg.path('city.json')} ({net.num_segments} segments)")
    return 0


def _random_zones(rng: np.random.Generator, hour: int, sim) -> list[CongestionZone]:
    rush = hour in (7, 8, 9, 17, 18, 19)
    n_zones = int(rng.integers(1, 4)) if rush else int(rng.integers(0, 2))
    zones = []
    for _ in range(n_zones):
        start = float(rng.uniform(0.0, 0.8))
        length = float(rng.uniform(0.05, 0.2))
        factor = float(rng.uniform(sim.congestion_factor_lo, sim.congestion_factor_hi))
        zones.append(CongestionZone(start, min(start + length, 1.0), factor))
    return zones


def cmd_synth_data(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    sim = cfg.simulation
    rng = np.random.default_rng(sub_seed(cfg.seed, "sim"))
    trajs: list[GpsTrajectory] = []
    routes: list[Route] = []
    attempts = 0
    budget = sim.num_trajectories * 50
    while len(trajs) < sim.num_trajectories:
        attempts += 1
        if attempts > budget:
            raise RuntimeError(
                f"could not simulate {sim.num_trajectories} valid trajectories "
                f"in {budget} attempts; got {len(trajs)}"
            )
        s, d = (int(x) for x in rng.integers(0, net.num_segments, 2))
        if s == d:
            continue
        try:
            route = shortest_path(net, s, d)
        except NoRouteError:
            continue
        start_time = float(rng.uniform(0.0, 86400.0))
        zones = _random_zones(rng, int(start_time // 3600), sim)
        speed = sim.base_speed_mps * (1.0 + sim.speed_spread * float(rng.uniform(-1.0, 1.0)))
        try:
            t = simulate_trajectory(
                net,
                route,
                speed,
                zones,
                gps_noise_m=sim.gps_noise_m,
                interval_s=sim.interval_s,
                seed=int(rng.integers(2**31)),
                start_time_s=start_time,
            )
        except TooShortError:
            continue
        if not MIN_POINTS <= len(t) <= MAX_POINTS:
            continue
        t.traj_id = len(trajs)
        trajs.append(t)
        routes.append(route)

    order = rng.permutation(len(trajs))
    n_train = int(round(sim.train_frac * len(trajs)))
    tr_idx, te_idx = sorted(order[:n_train]), sorted(order[n_train:])
    train = [trajs[i] for i in tr_idx]
    test = [trajs[i] for i in te_idx]
    save_dataset(train, cfg.path("train.jsonl"))
    save_dataset(test, cfg.path("test.jsonl"))
    stats = compute_dataset_stats([trajs[i] for i in tr_idx], [routes[i] for i in tr_idx], net.bbox())
    _save_stats(stats, cfg.path("stats.json"))
    print(
        f"simulated {len(trajs)} trajectories ({attempts} attempts): "
        f"{len(train)} train / {len(test)} test"
    )
    return 0


def cmd_make_labels(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    stats = _load_stats(cfg.path("stats.json"))
    for split in ("train", "test"):
        trajs = load_dataset(cfg.path(f"{split}.jsonl"))
        routes = _routes_for(net, trajs)
        labels = {t.traj_id: make_labels(t, routes[tuple(t.route_ids)], stats) for t in trajs}
        save_labels(labels, cfg.path(f"labels_{split}.jsonl"))
        clamped = sum(l.clamped for l in labels.values())
        print(f"labels_{split}.jsonl: {len(labels)} records, {clamped} clamped projections")
    return 0


def cmd_train_rqvae(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    stats = _load_stats(cfg.path("stats.json"))
    trajs = load_dataset(cfg.path("train.jsonl"))
    labels = load_labels(cfg.path("labels_train.jsonl"))
    tc = cfg.rqvae_train
    model, history = rq.train(
        trajs,
        labels,
        stats,
        net,
        cfg.rqvae,
        epochs=tc.epochs,
        batch_size=tc.batch_size,
        lr=tc.lr,
        weight_decay=tc.weight_decay,
        percent_weight=tc.percent_weight,
        seed=sub_seed(cfg.seed, "train"),
        log=print,
    )
    nn.save_checkpoint(
        model,
        cfg.path("rqvae.npz"),
        meta={"rqvae": cfg.rqvae.to_json(), "num_segments": net.num_segments},
    )
    cfg.path("rqvae_history.json").write_text(json.dumps(history.to_json()) + "\n")
    books = [
        {"level": l, "size": b.data.shape[0], "dim": b.data.shape[1], "rows": b.data.tolist()}
        for l, b in enumerate(model.codebooks)
    ]
    cfg.path("codebooks.json").write_text(json.dumps(books) + "\n")
    first, last = history.epoch_losses[0]["total"], history.epoch_losses[-1]["total"]
    print(f"saved rqvae.npz; total loss {first:.4f} -> {last:.4f}")
    return 0


def _encode_codes(
    model: rq.RqvaeModel, trajs, labels, stats, seg_coords, seg_mask
) -> dict[int, rq.PatternCode]:
    codes: dict[int, rq.PatternCode] = {}
    for batch in rq.make_batches(trajs, labels, stats, seg_coords, seg_mask, batch_size=64):
        enc = model.encode(batch.norm_points, batch.valid_n)
        indices, _, _ = model.quantize(enc.h_q.data)
        for b, tid in enumerate(batch.traj_ids):
            m = int(enc.valid_m[b])
            codes[tid] = rq.PatternCode(indices[:, b, :m].copy(), enc.parities[b])
    return codes


def cmd_tokenize(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    model, stats = _load_rqvae(cfg)
    vocab = Vocabulary.build(net.num_segments, model.cfg.codebook_sizes)
    vocab.save(cfg.path("vocab.json"))
    seg_coords, seg_mask = rq.network_segment_coords(net)
    for split in ("train", "test"):
        trajs = load_dataset(cfg.path(f"{split}.jsonl"))
        labels = load_labels(cfg.path(f"labels_{split}.jsonl"))
        codes = _encode_codes(model, trajs, labels, stats, seg_coords, seg_mask)
        _save_codes(codes, cfg.path(f"codes_{split}.jsonl"))
        print(f"codes_{split}.jsonl: {len(codes)} records")
    return 0


def cmd_export_sft(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    vocab = Vocabulary.load(cfg.path("vocab.json"))
    for split in ("train", "test"):
        trajs = load_dataset(cfg.path(f"{split}.jsonl"))
        routes = _routes_for(net, trajs)
        codes = _load_codes(cfg.path(f"codes_{split}.jsonl"))
        records = []
        for t in trajs:
            cond = _conditions_for(t, routes[tuple(t.route_ids)], cfg.city.rows, cfg.city.cols)
            records.append((t.traj_id, cond, encode_pattern_tokens(codes[t.traj_id], vocab)))
        n = export_sft_jsonl(records, vocab, cfg.path(f"sft_{split}.jsonl"))
        print(f"sft_{split}.jsonl: {n} question-answer pairs")
    return 0


def _lm_corpus(
    cfg: PipelineConfig,
    net: RoadNetwork,
    vocab: Vocabulary,
    split: str,
    lm_vocab: lm_mod.LmVocab | None = None,
) -> tuple[list[lm_mod.LmCorpusItem], lm_mod.LmVocab]:
    trajs = load_dataset(cfg.path(f"{split}.jsonl"))
    routes = _routes_for(net, trajs)
    codes = _load_codes(cfg.path(f"codes_{split}.jsonl"))
    conds = {
        t.traj_id: _conditions_for(t, routes[tuple(t.route_ids)], cfg.city.rows, cfg.city.cols)
        for t in trajs
    }
    if lm_vocab is None:
        lm_vocab = lm_mod.LmVocab.fit(
            vocab,
            [c.travel_time_s for c in conds.values()],
            [c.travel_distance_m for c in conds.values()],
            [c.interval_s for c in conds.values()],
        )
    corpus = []
    for t in trajs:
        c = conds[t.traj_id]
        cond_ids = lm_vocab.condition_ids(
            c.route_ids, c.start_time_s, c.travel_time_s, c.travel_distance_m, c.interval_s
        )
        answer_ids = [
            lm_vocab.token_id(tok) for tok in encode_pattern_tokens(codes[t.traj_id], vocab)
        ]
        corpus.append(lm_mod.LmCorpusItem(t.traj_id, cond_ids, answer_ids))
    return corpus, lm_vocab


def cmd_train_lm(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    vocab = Vocabulary.load(cfg.path("vocab.json"))
    corpus, lm_vocab = _lm_corpus(cfg, net, vocab, "train")
    cfg.path("lm_vocab.json").write_text(json.dumps(lm_vocab.to_json()) + "\n")
    tc = cfg.lm_train
    model, losses = lm_mod.train_lm(
        corpus,
        len(lm_vocab),
        cfg.lm,
        epochs=tc.epochs,
        batch_size=tc.batch_size,
        lr=tc.lr,
        weight_decay=tc.weight_decay,
        seed=sub_seed(cfg.seed, "train") + 1,
        log=print,
    )
    nn.save_checkpoint(
        model, cfg.path("lm.npz"), meta={"lm": cfg.lm.to_json(), "vocab_size": len(lm_vocab)}
    )
    cfg.path("lm_history.json").write_text(json.dumps({"epoch_losses": losses}) + "\n")
    print(f"saved lm.npz; loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return 0


def decode_code_to_trajectory(
    model: rq.RqvaeModel,
    code: rq.PatternCode,
    route: Route,
    stats: DatasetStats,
    seg_coords: Tensor,
    seg_mask: np.ndarray,
    interval_s: float,
    start_time_s: float,
) -> GpsTrajectory:
    """Map a pattern code back to a GPS trajectory over its route."""
    books = model.codebook_arrays()
    quant = np.zeros((1, code.m, model.cfg.d_q))
    for l in range(code.num_levels):
        quant[0] += books[l][code.indices[l]]
    rids = np.array([route.segment_ids], dtype=int)
    rval = np.array([len(route.segment_ids)], dtype=int)
    percent, offset, valid_n = model.decode(
        Tensor(quant), np.array([code.m]), [code.parity], rids, rval, seg_coords, seg_mask
    )
    n = int(valid_n[0])
    labels = RelativeLabels(percent.data[0, :n, 0].copy(), offset.data[0, :n].copy())
    return reconstruct_from_labels(route, labels, stats, interval_s, start_time_s)


def cmd_generate(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    vocab = Vocabulary.load(cfg.path("vocab.json"))
    lm_vocab = lm_mod.LmVocab.from_json(json.loads(cfg.path("lm_vocab.json").read_text()))
    lm_meta = nn.read_meta(cfg.path("lm.npz"))
    lm = lm_mod.PatternLm(lm_meta["vocab_size"], lm_mod.LmConfig.from_json(lm_meta["lm"]))
    nn.load_checkpoint(lm, cfg.path("lm.npz"))
    model, stats = _load_rqvae(cfg)
    seg_arr, seg_mask = rq.network_segment_coords(net)
    seg_coords = Tensor(seg_arr)

    test = load_dataset(cfg.path("test.jsonl"))
    if not test:
        raise ValueError("test split is empty; nothing to condition on")
    routes = _routes_for(net, test)
    count = args.count if args.count is not None else len(test)
    tc = cfg.lm_train
    temperature = args.temperature if args.temperature is not None else tc.temperature
    top_k = args.top_k if args.top_k is not None else tc.top_k
    sample_seed = sub_seed(cfg.seed, "sample")

    out: list[GpsTrajectory] = []
    token_log: list[dict] = []
    first_valid = 0
    first_n_in_range = 0
    retries = 0
    categories: dict[str, int] = {}
    for i in range(count):
        src = test[i % len(test)]
        route = routes[tuple(src.route_ids)]
        cond = _conditions_for(src, route, cfg.city.rows, cfg.city.cols)
        cond_ids = lm_vocab.condition_ids(
            cond.route_ids, cond.start_time_s, cond.travel_time_s,
            cond.travel_distance_m, cond.interval_s,
        )
        produced = None
        for attempt in range(RETRY_BUDGET):
            res = lm_mod.generate(
                lm,
                lm_vocab,
                [cond_ids],
                temperature=temperature,
                top_k=top_k,
                max_tokens=tc.max_tokens,
                seed=sample_seed + i * RETRY_BUDGET + attempt,
            )[0]
            code = None
            if res.complete:
                try:
                    code = decode_pattern_tokens(res.tokens, vocab)
                except TokenSequenceError as exc:
                    if attempt == 0:
                        categories[exc.category] = categories.get(exc.category, 0) + 1
            elif attempt == 0:
                categories["incomplete"] = categories.get("incomplete", 0) + 1
            if attempt == 0 and code is not None:
                first_valid += 1
                n = rq.upsample_len(code.m, code.parity)
                if MIN_POINTS <= n <= MAX_POINTS:
                    first_n_in_range += 1
            last_tokens = res.tokens
            if code is not None:
                produced = decode_code_to_trajectory(
                    model, code, route, stats, seg_coords, seg_mask,
                    src.sampling_interval_s, src.start_time_s,
                )
                break
            retries += 1
        token_log.append(
            {
                "conditions": {
                    "route_ids": list(cond.route_ids),
                    "start_time_s": cond.start_time_s,
                    "travel_time_s": cond.travel_time_s,
                    "travel_distance_m": cond.travel_distance_m,
                    "interval_s": cond.interval_s,
                },
                "tokens": "".join(last_tokens),
                "valid": produced is not None,
            }
        )
        if produced is not None:
            produced.traj_id = len(out)
            out.append(produced)

    save_dataset(out, cfg.path("generated.jsonl"))
    with open(cfg.path("generated_tokens.jsonl"), "w", encoding="utf-8") as fh:
        for rec in token_log:
            fh.write(json.dumps(rec) + "\n")
    summary = {
        "requested": count,
        "emitted": len(out),
        "shortfall": count - len(out),
        "retries": retries,
        "first_attempt_valid_fraction": first_valid / count,
        "first_attempt_n_in_range_fraction": first_n_in_range / count,
        "first_attempt_error_categories": categories,
        "temperature": temperature,
        "top_k": top_k,
    }
    cfg.path("generation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(
        f"generated.jsonl: {len(out)}/{count} records "
        f"(valid on first attempt {summary['first_attempt_valid_fraction']:.1%}, "
        f"implied length in range {summary['first_attempt_n_in_range_fraction']:.1%})"
    )
    if summary["shortfall"]:
        print(f"warning: shortfall of {summary['shortfall']} after retry budget", file=sys.stderr)
    return 0


def cmd_reconstruct(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    model, stats = _load_rqvae(cfg)
    trajs = load_dataset(cfg.path("test.jsonl"))
    labels = load_labels(cfg.path("labels_test.jsonl"))
    routes = _routes_for(net, trajs)
    seg_coords, seg_mask = rq.network_segment_coords(net)
    by_id = {t.traj_id: t for t in trajs}

    recon: list[GpsTrajectory] = []
    disp_sum, disp_count, step_sum, step_count = 0.0, 0, 0.0, 0
    for batch in rq.make_batches(trajs, labels, stats, seg_coords, seg_mask, batch_size=64):
        result = model.forward(batch)
        for b, tid in enumerate(batch.traj_ids):
            src = by_id[tid]
            n = len(src)
            lab = RelativeLabels(
                result.percent_pred.data[b, :n, 0].copy(),
                result.offset_pred.data[b, :n].copy(),
            )
            rec = reconstruct_from_labels(
                routes[tuple(src.route_ids)], lab, stats,
                src.sampling_interval_s, src.start_time_s,
            )
            rec.traj_id = tid
            recon.append(rec)
            d = geodesic_m_arr(
                src.points[:, 0], src.points[:, 1], rec.points[:, 0], rec.points[:, 1]
            )
            disp_sum += float(d.sum())
            disp_count += n
            steps = geodesic_m_arr(
                src.points[:-1, 0], src.points[:-1, 1], src.points[1:, 0], src.points[1:, 1]
            )
            step_sum += float(steps.sum())
            step_count += n - 1

    recon.sort(key=lambda t: t.traj_id)
    save_dataset(recon, cfg.path("reconstructed.jsonl"))
    mean_disp = disp_sum / disp_count
    mean_step = step_sum / step_count
    summary = {
        "mean_displacement_m": mean_disp,
        "mean_step_m": mean_step,
        "displacement_over_step": mean_disp / mean_step,
        "num_trajectories": len(recon),
    }
    cfg.path("reconstruction_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    print(
        f"reconstructed.jsonl: {len(recon)} records; mean displacement "
        f"{mean_disp:.2f} m = {mean_disp / mean_step:.1%} of mean step {mean_step:.2f} m"
    )
    return 0


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    real = load_dataset(args.real or cfg.path("test.jsonl"))
    gen = load_dataset(args.gen or cfg.path("generated.jsonl"))
    mc = metrics_mod.MetricsConfig(cfg.metrics.bins, cfg.metrics.top_k, cfg.metrics.cell_m)
    report = metrics_mod.evaluate(real, gen, net, mc)
    metrics_mod.write_report(report, args.out or cfg.path("report.json"))
    doc = report.to_json()
    for k in ("t_dist", "s_dist", "radius", "g_den", "g_pat", "r_den", "r_pat", "pr_dist"):
        print(f"{k:8s} {doc[k]:.4f}")
    return 0


# --- plotting -----------------------------------------------------------------

def _svg_bars(path: Path, edges, real_counts, gen_counts, title: str) -> None:
    w, h, pad = 640, 360, 40
    peak = max(1, max(real_counts), max(gen_counts))
    nb = len(real_counts)
    bw = (w - 2 * pad) / nb / 2
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<text x="{w // 2}" y="20" text-anchor="middle">{title}</text>',
    ]
    for i in range(nb):
        for j, (c, color) in enumerate(((real_counts[i], "#4477aa"), (gen_counts[i], "#ee6677"))):
            bh = (h - 2 * pad) * c / peak
            x = pad + (2 * i + j) * bw
            parts.append(
                f'<rect x="{x:.1f}" y="{h - pad - bh:.1f}" width="{bw:.1f}" '
                f'height="{bh:.1f}" fill="{color}"/>'
            )
    parts.append(f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def _svg_heatmap(path: Path, grid: np.ndarray, title: str) -> None:
    rows, cols = grid.shape
    cell = max(2, min(12, 600 // max(rows, cols)))
    w, h = cols * cell + 20, rows * cell + 40
    peak = max(1.0, float(grid.max()))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<text x="{w // 2}" y="16" text-anchor="middle">{title}</text>',
    ]
    for r in range(rows):
        for c in range(cols):
            v = grid[r, c] / peak
            if v <= 0:
                continue
            shade = int(255 * (1.0 - v))
            parts.append(
                f'<rect x="{10 + c * cell}" y="{30 + (rows - 1 - r) * cell}" '
                f'width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)"/>'
            )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def cmd_plot(cfg: PipelineConfig, args) -> int:
    net = load_network(cfg.path("city.json"))
    real = load_dataset(args.real or cfg.path("test.jsonl"))
    gen = load_dataset(args.gen or cfg.path("generated.jsonl"))
    outdir = cfg.path("plots")
    outdir.mkdir(parents=True, exist_ok=True)

    # trajectory-length histogram, shared integer-aligned bins
    rl = np.array([len(t) for t in real])
    gl = np.array([len(t) for t in gen])
    lo, hi = int(min(rl.min(), gl.min())), int(max(rl.max(), gl.max()))
    nb = min(20, max(1, hi - lo))
    edges = np.linspace(lo, hi + 1, nb + 1)
    rc, _ = np.histogram(rl, bins=edges)
    gc, _ = np.histogram(gl, bins=edges)
    with open(outdir / "lengths.csv", "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,real,generated\n")
        for i in range(nb):
            fh.write(f"{edges[i]:.1f},{edges[i + 1]:.1f},{rc[i]},{gc[i]}\n")

    # per-cell density grids
    grid = metrics_mod.dataset_grid(net, cfg.metrics.cell_m)
    real_counts, _ = metrics_mod._cell_counts(real, grid)
    gen_counts, _ = metrics_mod._cell_counts(gen, grid)
    with open(outdir / "density.csv", "w", encoding="utf-8") as fh:
        fh.write("row,col,real,generated\n")
        for cell in sorted(set(real_counts) | set(gen_counts)):
            fh.write(
                f"{cell[0]},{cell[1]},{real_counts.get(cell, 0)},{gen_counts.get(cell, 0)}\n"
            )
    print(f"wrote {outdir / 'lengths.csv'} and {outdir / 'density.csv'}")

    if args.svg:
        _svg_bars(outdir / "lengths.svg", edges, rc.tolist(), gc.tolist(),
                  "Trajectory length: real vs generated")
        for name, counts in (("real", real_counts), ("generated", gen_counts)):
            dense = np.zeros((grid.rows, grid.cols))
            for (r, c), v in counts.items():
                dense[r, c] = v
            _svg_heatmap(outdir / f"density_{name}.svg", dense, f"Point density ({name})")
        print(f"wrote SVG renderings in {outdir}")
    return 0


# --- gradient-check suite -----------------------------------------------------

def gradcheck_suite(seed: int = 0) -> list[tuple[str, float, float]]:
    """(name, max relative error, tolerance) for each checked component."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, float, float]] = []

    x = Tensor(rng.normal(size=(3, 5)))
    lin = nn.Linear(5, 4, rng)
    checks.append((
        "linear",
        nn.grad_check(lambda: (lin(x) ** 2).mean(), [x, lin.weight, lin.bias]),
        1e-6,
    ))

    x = Tensor(rng.normal(size=(2, 6)))
    ln = nn.LayerNorm(6)
    ln.gamma.data = rng.normal(1.0, 0.1, size=6)
    ln.beta.data = rng.normal(0.0, 0.1, size=6)
    checks.append((
        "layer_norm",
        nn.grad_check(lambda: (ln(x) ** 2).mean(), [x, ln.gamma, ln.beta]),
        1e-4,
    ))

    x = Tensor(rng.normal(size=(2, 7, 3)))
    conv = nn.Conv1d(3, 4, rng, stride=2)
    checks.append((
        "conv1d_stride2",
        nn.grad_check(lambda: (conv(x) ** 2).mean(), [x, conv.weight, conv.bias]),
        1e-4,
    ))

    x = Tensor(rng.normal(size=(2, 5, 8)))
    attn = nn.MultiHeadSelfAttention(8, 2, rng, causal=True)
    valid = np.array([5, 3])
    checks.append((
        "masked_attention",
        nn.grad_check(lambda: (attn(x, valid) ** 2).mean(), list(attn.parameters()) + [x]),
        1e-4,
    ))

    x = Tensor(rng.normal(size=(3, 6)))
    w = Tensor(rng.normal(size=(3, 6)))
    checks.append((
        "log_softmax",
        nn.grad_check(lambda: (x.log_softmax() * w).mean(), [x]),
        1e-4,
    ))

    checks.append(("rqvae_full_path", _full_path_error(seed), 1e-3))
    return checks


def _full_path_error(seed: int) -> float:
    """Composed encoder -> straight-through quantizer -> decoder check.

    The code selection is frozen at the unperturbed parameters so the
    finite-difference probe sees the same smooth surrogate whose gradient
    the backward pass computes (the straight-through estimator is not the
    gradient of the discontinuous argmin itself).
    """
    rng = np.random.default_rng(seed)
    cfg = rq.RqvaeConfig(
        d=4, d_e=8, d_q=4, channels=(4, 6, 6, 8), head_dim=2,
        codebook_sizes=(3, 5), road_embed_dim=4,
    )
    model = rq.RqvaeModel(cfg, num_segments=6, seed=seed)
    n = 16
    batch = rq.TrajBatch(
        traj_ids=[0],
        norm_points=rng.uniform(0.2, 0.8, size=(1, n, 2)),
        valid_n=np.array([n]),
        percent_labels=np.full((1, n), 1.0 / n),
        offset_labels=rng.normal(0.0, 0.1, size=(1, n, 2)),
        route_ids=np.array([[0, 1, 2]]),
        route_valid=np.array([3]),
        seg_coords=Tensor(rng.uniform(size=(6, 2, 2))),
        seg_mask=np.ones((6, 2, 1)),
    )
    valid_m = np.array([rq.downsample_len(n)[0]])

    base = model.encode(batch.norm_points, batch.valid_n)
    idx0, embs0, total0 = model.quantize(base.h_q.data)
    st_const = total0 - base.h_q.data
    prefix0 = np.cumsum([np.zeros_like(embs0[0])] + embs0[:-1], axis=0)
    beta = cfg.beta

    def fn():
        enc = model.encode(batch.norm_points, batch.valid_n)
        quantized = enc.h_q + Tensor(st_const)
        percent, offset, _ = model.decode(
            quantized, enc.valid_m, enc.parities, batch.route_ids,
            batch.route_valid, batch.seg_coords, batch.seg_mask,
        )
        mask_m = nn.valid_mask(valid_m, enc.h_q.shape[1])
        m_count = float(mask_m.sum())
        l_q = Tensor(0.0)
        for l, book in enumerate(model.codebooks):
            h_l = enc.h_q - Tensor(prefix0[l])
            h_l0 = base.h_q.data - prefix0[l]  # stop-gradient target, frozen
            pull = ((Tensor(h_l0) - book.take_rows(idx0[l])) ** 2) * Tensor(mask_m)
            commit = ((h_l - Tensor(embs0[l])) ** 2) * Tensor(mask_m)
            l_q = l_q + (pull.sum() + beta * commit.sum()) * (1.0 / m_count)
        l_q = l_q * (1.0 / cfg.num_levels)
        mask_n = nn.valid_mask(batch.valid_n, percent.shape[1])
        n_count = float(mask_n.sum())
        l_p = (((percent - Tensor(batch.percent_labels[:, :, None])) ** 2) * Tensor(mask_n)).sum() * (1.0 / n_count)
        l_o = (((offset - Tensor(batch.offset_labels)) ** 2) * Tensor(mask_n)).sum() * (1.0 / (2.0 * n_count))
        return l_q + l_p + l_o

    params = [p for _, p in model.named_parameters()]
    return nn.grad_check(fn, params, max_entries=3, seed=seed)


def cmd_gradcheck(cfg: PipelineConfig, args) -> int:
    checks = gradcheck_suite(seed=sub_seed(cfg.seed, "init"))
    failed = 0
    print(f"{'check':20s} {'max rel err':>12s} {'tolerance':>10s}  result")
    for name, err, tol in checks:
        ok = err <= tol
        failed += 0 if ok else 1
        print(f"{name:20s} {err:12.3e} {tol:10.0e}  {'PASS' if ok else 'FAIL'}")
    if failed:
        raise FloatingPointError(f"{failed} gradient check(s) failed")
    return 0


# --- entry point --------------------------------------------------------------

def _build_parser() -> _Parser:
    p = _Parser(prog="trajtoken", description=__doc__)
    p.add_argument("--config", default=None, help="JSON pipeline config file")
    p.add_argument("--workdir", default=None, help="artifact directory (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="config override, e.g. --set rqvae_train.epochs=10",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name in (
        "synth-city", "synth-data", "make-labels", "train-rqvae", "tokenize",
        "export-sft", "train-lm", "reconstruct", "gradcheck",
    ):
        sub.add_parser(name)
    g = sub.add_parser("generate")
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--temperature", type=float, default=None)
    g.add_argument("--top-k", type=int, default=None)
    for name in ("evaluate", "plot"):
        s = sub.add_parser(name)
        s.add_argument("--real", default=None)
        s.add_argument("--gen", default=None)
        if name == "evaluate":
            s.add_argument("--out", default=None)
        else:
            s.add_argument("--svg", action="store_true")
    return p


_COMMANDS = {
    "synth-city": cmd_synth_city,
    "synth-data": cmd_synth_data,
    "make-labels": cmd_make_labels,
    "train-rqvae": cmd_train_rqvae,
    "tokenize": cmd_tokenize,
    "export-sft": cmd_export_sft,
    "train-lm": cmd_train_lm,
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        for override in args.set:
            cfg.apply_override(override)
        if args.workdir is not None:
            cfg.workdir = args.workdir
        if args.seed is not None:
            cfg.seed = args.seed
        Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        rc = _COMMANDS[args.command](cfg, args)
        print(f"[{args.command}] done in {time.time() - t0:.1f}s")
        return rc
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, nn.ShapeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Pattern quantization walkthrough.

Trains a miniature residual-quantizing autoencoder on a handful of
simulated trajectories, then shows how a variable-length GPS track
becomes a short discrete pattern code plus a 3-bit parity record, and
how that code serializes into tokens.
"""

import numpy as np

from trajtoken import rqvae as rq
from trajtoken.roadnet import build_synthetic_city, shortest_path
from trajtoken.tokens import Vocabulary, decode_pattern_tokens, encode_pattern_tokens
from trajtoken.traj import compute_dataset_stats, make_labels, simulate_trajectory

rng = np.random.default_rng(0)
net = build_synthetic_city(rows=3, cols=3, spacing_m=250.0, jitter_frac=0.1, seed=0)

trajs, routes = [], []
while len(trajs) < 24:
    a, b = (int(x) for x in rng.integers(0, net.num_segments, 2))
    try:
        route = shortest_path(net, a, b)
        t = simulate_trajectory(net, route, speed_mps=float(rng.uniform(8, 14)),
                                gps_noise_m=3.0, interval_s=5.0,
                                seed=int(rng.integers(1 << 31)))
    except ValueError:
        continue
    if not 20 <= len(t) <= 200:
        continue
    t.traj_id = len(trajs)
    trajs.append(t)
    routes.append(route)

stats = compute_dataset_stats(trajs, routes, net.bbox())
labels = {t.traj_id: make_labels(t, r, stats) for t, r in zip(trajs, routes)}

# three stride-2 stages: n points -> m = roughly n/8 pattern positions
for t in trajs[:4]:
    m, parity = rq.downsample_len(len(t))
    print(f"trajectory {t.traj_id}: n={len(t):3d} -> m={m:2d}, parity bits {parity.bits} "
          f"(upsamples back to {rq.upsample_len(m, parity)})")

cfg = rq.RqvaeConfig(d=8, d_e=16, d_q=8, channels=(8, 8, 8, 16), head_dim=4,
                     codebook_sizes=(4, 8, 16, 32), road_embed_dim=8,
                     road_transformer_layers=1)
model, history = rq.train(trajs, labels, stats, net, cfg, epochs=4, batch_size=8, seed=0)
print(f"\ntiny model, 4 epochs: total loss "
      f"{history.epoch_losses[0]['total']:.4f} -> {history.epoch_losses[-1]['total']:.4f}")
print(f"codebook utilization by level: {np.round(history.utilization[-1], 2)}")

# encode one trajectory and serialize the code
seg_coords, seg_mask = rq.network_segment_coords(net)
batch = rq.make_batches(trajs[:1], labels, stats, seg_coords, seg_mask, batch_size=1)[0]
enc = model.encode(batch.norm_points, batch.valid_n)
indices, _, _ = model.quantize(enc.h_q.data)
m = int(enc.valid_m[0])
code = rq.PatternCode(indices[:, 0, :m].copy(), enc.parities[0])

vocab = Vocabulary.build(net.num_segments, cfg.codebook_sizes)
tokens = encode_pattern_tokens(code, vocab)
print(f"\ntrajectory 0 ({len(trajs[0])} points) -> {len(tokens)} tokens:")
print("".join(tokens))
roundtrip = decode_pattern_tokens(tokens, vocab)
assert np.array_equal(roundtrip.indices, code.indices)
print("tokens decode back to the identical pattern code")

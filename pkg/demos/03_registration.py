"""Registering two partial scans from descriptor matches.

Trains a small embedding on a synthetic blob (or loads ``--model``), matches
two overlapping views, runs the robust rigid fit and scores it against the
known poses.

    python demos/03_registration.py
    python demos/03_registration.py --model runs/demo/model.cgf
"""

import argparse

import numpy as np

from cgf.dataset import MiningConfig, SynthConfig, find_overlapping_pairs, generate_synthetic_set, mine_triplets
from cgf.histogram import HistogramConfig, featurize_cloud
from cgf.lrf import LrfConfig
from cgf.matching import Features, match
from cgf.net import IndexedTriplets, NetConfig, embed_all, init_net, load_model, train
from cgf.registration import fit_rigid_robust, score


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    s = generate_synthetic_set(SynthConfig("blob", samples=12000, seed=args.seed, rig="random",
                                           view_distance=10.0))
    D = s.diameter
    hcfg = HistogramConfig.relative(D, 0.17, 0.015)
    lcfg = LrfConfig.relative(D, 0.02, 0.02)
    hists = [featurize_cloud(c, hcfg, lcfg) for c in s.clouds]
    pairs = find_overlapping_pairs(s)
    test, train_pairs = pairs[0], pairs[1:]
    print(f"{len(s)} views of diameter {D:.3f}; registering views {test.i} and {test.j} "
          f"(overlap {test.alpha_ij:.2f} / {test.alpha_ji:.2f})")

    if args.model:
        net = load_model(args.model)
    else:
        offsets = np.r_[0, np.cumsum([len(h) for h in hists])]
        pool = np.concatenate([h.values for h in hists])
        a, p, n = [], [], []
        for pr in train_pairs:
            for i, j in ((pr.i, pr.j), (pr.j, pr.i)):
                m = mine_triplets(s, (i, j), hists[i], hists[j], MiningConfig(0.01 * D, max_anchors=60), seed=i * 7 + j)
                a.append(m.anchor + offsets[i])
                p.append(m.positive + offsets[j])
                n.append(m.negative + offsets[j])
        trip = IndexedTriplets(pool, np.concatenate(a), np.concatenate(p), np.concatenate(n))
        net = init_net(NetConfig(hcfg.size, (256, 256), 16), args.seed)
        print(f"training a small network on {len(trip)} triplets")
        train(net, trip, epochs=3, lr=1e-3, seed=args.seed, log=print)

    feats = [Features(*embed_all(net, hists[k])) for k in (test.i, test.j)]
    corr = match(*feats)
    result = fit_rigid_robust(corr, (s.clouds[test.i], s.clouds[test.j]), iterations=5000,
                              inlier_tol=0.02 * D, seed=args.seed)
    score(result, s, test.i, test.j, gt_tau=0.01 * D)
    print(f"{len(corr)} matches, {result.inliers} consensus inliers")
    print(f"RMSE {result.rmse:.4f} ({result.rmse / D:.2%} of the diameter); "
          f"{'success' if result.success else 'failure'} at the 2% threshold")
    print(result.to_json())


if __name__ == "__main__":
    main()

"""Command-line front end: synth -> featurize -> mine -> train -> embed -> match
-> eval -> register, plus pca and bench.

Every command writes its artifact and a ``<artifact>.run.json`` manifest
holding the effective configuration, its hash, the seed and the sha256 of
every input file. Failures print ``error: <Code>: <message>`` on stderr and
exit with status 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset, histogram, lrf, matching, net, registration
from .errors import CGFError, ConfigError, PairNotFound, ShapeError
from .geometry import load_cloud

DEFAULTS = {
    "surface": "sphere", "views": 6, "noise": 0.0, "seed": 0, "samples": 4000,
    "view_distance": 4.0, "rig": "axes",
    "radial_bins": 17, "elevation_bins": 11, "azimuth_bins": 12,
    # metric defaults; --diameter switches to diameter-relative radii
    "r": 1.2, "r_min": 0.1, "lrf_radius": 0.25, "normal_radius": 0.25,
    "r_fraction": 0.17, "r_min_fraction": 0.015, "lrf_fraction": 0.02,
    "tau_fraction": 0.01, "max_anchors": None,
    "dim": 32, "epochs": 3, "batch_size": 512, "lr": 1e-4,
    "repeats": 3, "points": 50000, "queries": 1000,
    "iterations": 2000, "inlier_fraction": 0.02,
}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _resolve(args, keys):
    """Effective settings: flags > --config file > defaults."""
    from_file = {}
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise
        except ValueError as exc:
            raise ConfigError(f"cannot parse config file: {exc}") from None
        if not isinstance(from_file, dict):
            raise ConfigError("config file must hold a JSON object")
    out = {}
    for k in keys:
        v = getattr(args, k, None)
        if v is None:
            v = from_file.get(k, DEFAULTS.get(k))
        out[k] = v
    return out


def write_run_manifest(output, command, settings, inputs=(), outputs=()):
    settings_json = json.dumps(settings, sort_keys=True, default=str)
    record = {
        "command": command,
        "settings": json.loads(settings_json),
        "config_sha256": hashlib.sha256(settings_json.encode()).hexdigest(),
        "seed": settings.get("seed"),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    path = Path(str(output) + ".run.json")
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _hist_config(s, diameter):
    bins = dict(radial_bins=s["radial_bins"], elevation_bins=s["elevation_bins"],
                azimuth_bins=s["azimuth_bins"])
    if diameter is not None:
        return (histogram.HistogramConfig.relative(diameter, s["r_fraction"], s["r_min_fraction"], **bins),
                lrf.LrfConfig.relative(diameter, s["lrf_fraction"], s["lrf_fraction"]))
    return (histogram.HistogramConfig(r=s["r"], r_min=s["r_min"], **bins),
            lrf.LrfConfig(s["normal_radius"], s["lrf_radius"]))


HIST_KEYS = ["radial_bins", "elevation_bins", "azimuth_bins", "r", "r_min", "lrf_radius",
             "normal_radius", "r_fraction", "r_min_fraction", "lrf_fraction", "diameter"]


def _load_histograms(paths):
    return [histogram.HistogramBatch.load(p) for p in paths]


def _features_from(path):
    return matching.read_features_csv(path)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args):
    s = _resolve(args, ["surface", "views", "noise", "seed", "samples", "view_distance", "rig"])
    cfg = dataset.SynthConfig(surface=s["surface"], samples=s["samples"], views=s["views"],
                              noise_sigma=s["noise"], seed=s["seed"],
                              view_distance=s["view_distance"], rig=s["rig"])
    aligned = dataset.generate_synthetic_set(cfg)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.txt"
    dataset.save_manifest(manifest, aligned)
    s["diameter"] = aligned.diameter
    s["eps"] = aligned.eps
    write_run_manifest(manifest, "synth", s, outputs=[manifest])
    print(f"{len(aligned)} views, diameter {aligned.diameter:.6g}, eps {aligned.eps:.6g} -> {manifest}")


def cmd_featurize(args):
    s = _resolve(args, HIST_KEYS + ["seed"])
    cloud = load_cloud(args.cloud)
    hcfg, lcfg = _hist_config(s, s["diameter"])
    batch = histogram.featurize_cloud(cloud, hcfg, lcfg)
    batch.save(args.output)
    write_run_manifest(args.output, "featurize", s, inputs=[args.cloud], outputs=[args.output])
    print(f"{int(batch.valid.sum())}/{len(batch)} valid histograms of size {hcfg.size} -> {args.output}")


def _parse_pair(text, n):
    try:
        i, j = (int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"pair must look like 'i,j', got {text!r}") from None
    if not (0 <= i < n and 0 <= j < n) or i == j:
        raise PairNotFound(f"pair ({text}) does not name two distinct clouds of the {n} in the manifest")
    return i, j


def cmd_mine(args):
    s = _resolve(args, ["tau", "tau_fraction", "max_anchors", "seed"])
    aligned = dataset.load_manifest(args.manifest)
    hists = _load_histograms(args.histograms)
    if len(hists) != len(aligned):
        raise ConfigError(f"manifest lists {len(aligned)} clouds but {len(hists)} histogram files were given")
    for k, (h, c) in enumerate(zip(hists, aligned.clouds)):
        if len(h) != len(c):
            raise ShapeError(f"histogram file {k} has {len(h)} rows for a {len(c)}-point cloud")
    tau = s["tau"] if s["tau"] is not None else s["tau_fraction"] * aligned.diameter
    s["tau"] = tau
    cfg = dataset.MiningConfig(tau, max_anchors=s["max_anchors"])
    if args.pair:
        pairs = [_parse_pair(args.pair, len(aligned))]
    else:
        pairs = [(p.i, p.j) for p in dataset.find_overlapping_pairs(aligned)]
        if not pairs:
            raise dataset.NoCorrespondences("no overlapping cloud pairs in the manifest")
    mined = []
    for i, j in pairs:
        for a, b in ((i, j), (j, i)):
            seed = int.from_bytes(hashlib.sha256(f"{s['seed']}:mine:{a}:{b}".encode()).digest()[:8], "little") >> 1
            mined.append(dataset.mine_triplets(aligned, (a, b), hists[a], hists[b], cfg, seed))
    dataset.save_triplets(args.output, mined)
    total = sum(len(m) for m in mined)
    write_run_manifest(args.output, "mine", dict(s, pairs=pairs),
                       inputs=[args.manifest, *args.histograms], outputs=[args.output])
    print(f"{total} triplets from {len(pairs)} pairs -> {args.output}")


def cmd_train(args):
    s = _resolve(args, ["dim", "epochs", "batch_size", "lr", "seed"])
    recs = dataset.load_triplets(args.triplets)
    hists = _load_histograms(args.histograms)
    sizes = [len(h) for h in hists]
    offsets = np.r_[0, np.cumsum(sizes)]
    if len(recs) and (recs[:, [0, 2]].max() >= len(hists)):
        raise ConfigError("triplet cache references more clouds than histogram files given")
    dims = {h.config.size for h in hists}
    if len(dims) != 1:
        raise ShapeError(f"histogram files disagree on the input size: {sorted(dims)}")
    pool = np.concatenate([h.values for h in hists]) if hists else np.zeros((0, 0))
    trip = net.IndexedTriplets(pool, offsets[recs[:, 0]] + recs[:, 1],
                               offsets[recs[:, 2]] + recs[:, 3], offsets[recs[:, 2]] + recs[:, 4])
    model = net.init_net(net.NetConfig(dims.pop(), output_dim=s["dim"]), s["seed"])
    losses = []
    if s["epochs"] > 0:
        res = net.train(model, trip, epochs=s["epochs"], batch_size=s["batch_size"],
                        seed=s["seed"], lr=s["lr"], log=print)
        losses = res.losses
    elif len(trip) == 0:
        raise net.NoTriplets("no triplets to train on")
    net.save_model(args.output, model)
    trace = Path(str(args.output) + ".loss.csv")
    trace.write_text("batch,loss\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(losses)))
    write_run_manifest(args.output, "train", s, inputs=[args.triplets, *args.histograms],
                       outputs=[args.output, trace])
    print(f"trained on {len(trip)} triplets -> {args.output}")


def cmd_embed(args):
    model = net.load_model(args.model)
    h = histogram.HistogramBatch.load(args.histograms)
    if h.config.size != model.input_dim:
        raise ShapeError(f"model expects {model.input_dim}-dim histograms, file holds {h.config.size}")
    idx, vals = net.embed_all(model, h)
    matching.write_features_csv(args.output, matching.Features(idx, vals))
    write_run_manifest(args.output, "embed", {}, inputs=[args.model, args.histograms], outputs=[args.output])
    print(f"{len(idx)} embeddings of dim {model.output_dim} -> {args.output}")


def cmd_match(args):
    src, dst = _features_from(args.src), _features_from(args.dst)
    corr = matching.match(src, dst)
    matching.write_correspondences_csv(args.output, corr)
    write_run_manifest(args.output, "match", {}, inputs=[args.src, args.dst], outputs=[args.output])
    print(f"{len(corr)} correspondences -> {args.output}")


def cmd_eval(args):
    s = _resolve(args, ["tau", "tau_fraction"])
    aligned = dataset.load_manifest(args.manifest)
    i, j = _parse_pair(args.pair, len(aligned))
    if args.correspondences:
        corr = matching.read_correspondences_csv(args.correspondences)
        inputs = [args.manifest, args.correspondences]
    else:
        if not args.features or len(args.features) != len(aligned):
            raise ConfigError("give --correspondences, or one --features file per manifest cloud")
        corr = matching.match(_features_from(args.features[i]), _features_from(args.features[j]))
        inputs = [args.manifest, args.features[i], args.features[j]]
    tau = s["tau"] if s["tau"] is not None else s["tau_fraction"] * aligned.diameter
    s.update(tau=tau, pair=[i, j])
    pruned = matching.prune_unmatched(corr, aligned, i, j, tau)
    curve = matching.precision_curve(pruned, aligned, i, j, matching.default_thresholds(aligned.diameter))
    matching.write_precision_csv(args.output, curve)
    write_run_manifest(args.output, "eval", s, inputs=inputs, outputs=[args.output])
    print(f"{curve.retained} retained matches; precision at tau {curve.at(tau):.4f} -> {args.output}")


def cmd_register(args):
    s = _resolve(args, HIST_KEYS + ["seed", "iterations", "inlier_fraction"])
    model = net.load_model(args.model)
    src, dst = load_cloud(args.src), load_cloud(args.dst)
    diameter = s["diameter"]
    hcfg, lcfg = _hist_config(s, diameter)
    if hcfg.size != model.input_dim:
        raise ShapeError(f"model expects {model.input_dim}-dim histograms, featurizer gives {hcfg.size}")
    feats = []
    for cloud in (src, dst):
        h = histogram.featurize_cloud(cloud, hcfg, lcfg)
        feats.append(matching.Features(*net.embed_all(model, h)))
    corr = matching.match(*feats)
    scale = diameter if diameter is not None else max(src.diameter, dst.diameter)
    result = registration.fit_rigid_robust(corr, (src, dst), iterations=s["iterations"],
                                           inlier_tol=s["inlier_fraction"] * scale, seed=s["seed"])
    inputs = [args.model, args.src, args.dst]
    if args.manifest:
        aligned = dataset.load_manifest(args.manifest)
        i, j = _parse_pair(args.pair, len(aligned)) if args.pair else (None, None)
        if i is None:
            raise ConfigError("--manifest needs --pair i,j to score the registration")
        gt_tau = s["tau_fraction"] * aligned.diameter if "tau_fraction" in s else 0.01 * aligned.diameter
        registration.score(result, aligned, i, j, gt_tau)
        inputs.append(args.manifest)
    Path(args.output).write_text(result.to_json())
    write_run_manifest(args.output, "register", s, inputs=inputs, outputs=[args.output])
    print(f"{result.inliers} inliers of {len(corr)}; rmse {result.rmse} -> {args.output}")


def cmd_pca(args):
    s = _resolve(args, ["dim"])
    hists = _load_histograms(args.histograms)
    X = np.concatenate([h.values[h.valid] for h in hists])
    emb = matching.fit_pca(X, s["dim"])
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for path, h in zip(args.histograms, hists):
        idx = h.valid_indices
        f = out / (Path(path).stem + ".pca.csv")
        matching.write_features_csv(f, matching.Features(idx, matching.pca_embed(emb, h.values[idx])))
        outputs.append(f)
    basis = out / "pca_basis.csv"
    rows = [["mean"] + [repr(float(v)) for v in emb.mean]]
    rows += [[f"pc{k}"] + [repr(float(v)) for v in row] for k, row in enumerate(emb.projection)]
    basis.write_text("".join(",".join(r) + "\n" for r in rows))
    outputs.append(basis)
    write_run_manifest(out / "pca", "pca", s, inputs=args.histograms, outputs=outputs)
    print(f"PCA-{s['dim']} of {len(X)} histograms -> {out}")


def cmd_bench(args):
    s = _resolve(args, ["repeats", "points", "queries", "seed"])
    rng = np.random.default_rng(s["seed"])
    rows = []
    # one instance for every dimension: column prefixes of a single sample
    top = max(args.dims)
    full = rng.normal(size=(s["points"], top))
    full_queries = rng.normal(size=(s["queries"], top))
    for dim in args.dims:
        data, queries = full[:, :dim], full_queries[:, :dim]
        tree = matching.KdTree(data)
        sec = matching.time_queries(queries, tree, repeats=s["repeats"])
        rows.append(("random", dim, sec * 1e3))
        print(f"dim {dim:4d}: {sec * 1e3:.4f} ms per query")
    matching.write_timing_csv(args.output, rows)
    write_run_manifest(args.output, "bench", dict(s, dims=list(args.dims)), outputs=[args.output])


def cmd_experiment(args):
    from .pipeline import PipelineConfig, run_experiment
    overrides = {"seed": args.seed, "output_dim": args.dim, "epochs": args.epochs,
                 "max_anchors": args.max_anchors, "lr": args.lr}
    cfg = PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})
    result = run_experiment(cfg, args.output, log=print)
    s = json.loads(cfg.to_json())
    write_run_manifest(Path(args.output) / "experiment", "experiment", s,
                       outputs=list(result.artifacts.values()))


# ---------------------------------------------------------------------------

def _hist_flags(p):
    p.add_argument("--config", help="JSON file with default settings")
    p.add_argument("--diameter", type=float, help="use radii relative to this diameter")
    p.add_argument("--r", type=float)
    p.add_argument("--r-min", dest="r_min", type=float)
    p.add_argument("--lrf-radius", dest="lrf_radius", type=float)
    p.add_argument("--normal-radius", dest="normal_radius", type=float)
    p.add_argument("--radial-bins", dest="radial_bins", type=int)
    p.add_argument("--elevation-bins", dest="elevation_bins", type=int)
    p.add_argument("--azimuth-bins", dest="azimuth_bins", type=int)


def build_parser():
    ap = argparse.ArgumentParser(prog="cgf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate an aligned set of synthetic partial scans")
    p.add_argument("--config")
    p.add_argument("--surface", choices=["sphere", "torus", "supertoroid", "box_union", "blob"])
    p.add_argument("--views", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--view-distance", dest="view_distance", type=float)
    p.add_argument("--rig", choices=["axes", "random"])
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="spherical histograms for every point of a cloud")
    p.add_argument("--cloud", required=True)
    _hist_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("mine", help="mine training triplets from an aligned set")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--histograms", nargs="+", required=True, help="one file per manifest cloud")
    p.add_argument("--tau", type=float, help="absolute tau (default 1%% of the set diameter)")
    p.add_argument("--pair", help="mine only this pair, e.g. 0,2")
    p.add_argument("--max-anchors", dest="max_anchors", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train the embedding network")
    p.add_argument("--config")
    p.add_argument("--triplets", required=True)
    p.add_argument("--histograms", nargs="+", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a histogram batch with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--histograms", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("match", help="nearest-neighbor correspondences between two feature files")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="precision curve of one aligned pair")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--features", nargs="+", help="one feature file per manifest cloud")
    p.add_argument("--correspondences")
    p.add_argument("--tau", type=float)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("register", help="rigid registration from learned correspondences")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--model", required=True)
    _hist_flags(p)
    p.add_argument("--manifest", help="aligned set for scoring against ground truth")
    p.add_argument("--pair", help="indices of src and dst in the manifest")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("pca", help="PCA baseline projection of histogram batches")
    p.add_argument("--config")
    p.add_argument("--histograms", nargs="+", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("bench", help="single-threaded nearest-neighbor latency by dimension")
    p.add_argument("--repeats", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--dims", type=int, nargs="+", default=[12, 32, 352])
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", default="timing.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("experiment", help="learned versus PCA comparison on synthetic scans")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-anchors", dest="max_anchors", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CGFError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: FileNotFound: {exc.filename or exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

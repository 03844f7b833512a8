"""End-to-end experiment: synthetic scans -> histograms -> triplets -> network,
compared against a PCA embedding through the same matching path.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    MiningConfig,
    SynthConfig,
    find_overlapping_pairs,
    generate_synthetic_set,
    mine_triplets,
)
from .histogram import HistogramBatch, HistogramConfig, featurize_cloud
from .lrf import LrfConfig
from .matching import (
    Features,
    default_thresholds,
    fit_pca,
    match,
    pca_embed,
    precision_from_residuals,
    prune_unmatched,
    write_features_csv,
    write_precision_csv,
)
from .net import IndexedTriplets, NetConfig, init_net, save_model, train


def derive_seed(root, stage):
    """Per-stage seed: the first 8 bytes of sha256("<root>:<stage>")."""
    digest = hashlib.sha256(f"{int(root)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class PipelineConfig:
    # histogram (radii as fractions of the set diameter unless absolute values are given)
    radial_bins: int = 17
    elevation_bins: int = 11
    azimuth_bins: int = 12
    r_fraction: float = 0.17
    r_min_fraction: float = 0.015
    r: float | None = None
    r_min: float | None = None
    normal_fraction: float = 0.02
    lrf_fraction: float = 0.02
    # network and training
    output_dim: int = 32
    hidden_dims: tuple = (512, 512, 512, 512, 512)
    margin: float = 1.0
    lr: float = 1e-4
    batch_size: int = 512
    epochs: int = 3
    seed: int = 0
    # mining
    tau_fraction: float = 0.01
    triplets_per_point: int = 40
    hard_negatives_per_point: int = 15
    random_negatives_per_point: int = 25
    max_anchors: int | None = None
    # evaluation
    eval_tau_fraction: float | None = None  # defaults to tau_fraction
    report_fraction: float = 0.01
    held_out_pairs: int = 2
    pca_samples: int = 20000
    # synthetic data
    surfaces: tuple = ("blob", "supertoroid")
    samples: int = 22000
    views: int = 6
    noise_sigma: float = 0.0
    view_distance: float = 10.0
    rig: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.held_out_pairs < 1:
            raise ValueError("need at least one held-out pair per surface")

    def histogram_config(self, diameter):
        bins = dict(radial_bins=self.radial_bins, elevation_bins=self.elevation_bins,
                    azimuth_bins=self.azimuth_bins)
        if self.r is not None:
            return HistogramConfig(r=self.r, r_min=self.r_min, **bins)
        return HistogramConfig.relative(diameter, self.r_fraction, self.r_min_fraction, **bins)

    def lrf_config(self, diameter):
        return LrfConfig.relative(diameter, self.normal_fraction, self.lrf_fraction)

    def mining_config(self, diameter):
        return MiningConfig(self.tau_fraction * diameter, self.triplets_per_point,
                            self.hard_negatives_per_point, self.random_negatives_per_point,
                            self.max_anchors)

    def net_config(self, input_dim):
        return NetConfig(input_dim, self.hidden_dims, self.output_dim, self.margin)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class SurfaceData:
    name: str
    aligned: object
    histograms: list
    offsets: list
    pairs: list
    train_pairs: list
    eval_pairs: list


@dataclass
class ExperimentResult:
    config: PipelineConfig
    surfaces: list
    net: object
    pca: object
    losses: list
    epoch_means: list
    learned_precision: float
    pca_precision: float
    learned_curve: object
    pca_curve: object
    per_pair: list = field(default_factory=list)
    triplet_count: int = 0
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    @property
    def loss_ratio(self):
        if len(self.epoch_means) < 2:
            return float("nan")
        return self.epoch_means[-1] / self.epoch_means[0]

    def summary(self):
        return {
            "seed": self.config.seed,
            "triplets": self.triplet_count,
            "epoch_means": self.epoch_means,
            "loss_ratio": self.loss_ratio,
            "learned_precision": self.learned_precision,
            "pca_precision": self.pca_precision,
            "per_pair": self.per_pair,
            "timings": self.timings,
        }


def prepare_surfaces(config, log=None):
    """Synthesize every surface, featurize all views into one shared pool and
    split the overlapping pairs into training and held-out sets."""
    sets = []
    for name in config.surfaces:
        synth = SynthConfig(surface=name, samples=config.samples, views=config.views,
                            noise_sigma=config.noise_sigma,
                            seed=derive_seed(config.seed, f"synth:{name}") % (2**31),
                            view_distance=config.view_distance, rig=config.rig)
        sets.append((name, generate_synthetic_set(synth)))
    total = sum(len(c) for _, s in sets for c in s.clouds)
    pool = np.zeros((total, config.radial_bins * config.elevation_bins * config.azimuth_bins))
    out, base = [], 0
    for name, aligned in sets:
        diam = aligned.diameter
        hcfg, lcfg = config.histogram_config(diam), config.lrf_config(diam)
        hists, offsets = [], []
        for cloud in aligned.clouds:
            block = pool[base:base + len(cloud)]
            hists.append(featurize_cloud(cloud, hcfg, lcfg, out=block))
            offsets.append(base)
            base += len(cloud)
        pairs = find_overlapping_pairs(aligned)
        if len(pairs) <= config.held_out_pairs:
            raise ValueError(f"surface {name!r} has only {len(pairs)} overlapping pairs")
        rng = np.random.default_rng(derive_seed(config.seed, f"holdout:{name}"))
        held = set(rng.choice(len(pairs), size=config.held_out_pairs, replace=False).tolist())
        train_pairs = [p for k, p in enumerate(pairs) if k not in held]
        eval_pairs = [p for k, p in enumerate(pairs) if k in held]
        if log:
            log(f"{name}: {len(aligned)} views, {[len(c) for c in aligned.clouds]} points, "
                f"{len(pairs)} overlapping pairs")
        out.append(SurfaceData(name, aligned, hists, offsets, pairs, train_pairs, eval_pairs))
    return pool, out


def mine_all(config, pool, surfaces):
    """Triplets from both directions of every training pair, as pool rows."""
    anchors, positives, negatives = [], [], []
    for s in surfaces:
        mcfg = config.mining_config(s.aligned.diameter)
        for p in s.train_pairs:
            for a, b in ((p.i, p.j), (p.j, p.i)):
                seed = derive_seed(config.seed, f"mine:{s.name}:{a}:{b}")
                m = mine_triplets(s.aligned, (a, b), s.histograms[a], s.histograms[b], mcfg, seed)
                anchors.append(m.anchor + s.offsets[a])
                positives.append(m.positive + s.offsets[b])
                negatives.append(m.negative + s.offsets[b])
    return IndexedTriplets(pool, np.concatenate(anchors), np.concatenate(positives),
                           np.concatenate(negatives))


def _features(embed, hist):
    idx = hist.valid_indices
    return Features(idx, embed(hist.values[idx]))


def evaluate(embed, surfaces, config):
    """Pooled residuals of retained matches over all held-out pairs (both
    directions), plus per-pair precision at the report threshold."""
    residuals, per_pair, curves = [], [], []
    for s in surfaces:
        diam = s.aligned.diameter
        tau = (config.eval_tau_fraction or config.tau_fraction) * diam
        report = config.report_fraction * diam
        feats = {}
        for p in s.eval_pairs:
            for k in (p.i, p.j):
                if k not in feats:
                    feats[k] = _features(embed, s.histograms[k])
            for a, b in ((p.i, p.j), (p.j, p.i)):
                corr = prune_unmatched(match(feats[a], feats[b]), s.aligned, a, b, tau)
                # residuals are stored relative to the diameter so surfaces pool cleanly
                residuals.append(corr.residual / diam)
                pre = precision_from_residuals(corr.residual, [report]).fractions[0]
                per_pair.append({"surface": s.name, "i": a, "j": b, "retained": len(corr),
                                 "precision": float(pre)})
    rel = np.concatenate(residuals)
    curve = precision_from_residuals(rel, default_thresholds(1.0))
    at = precision_from_residuals(rel, [config.report_fraction]).fractions[0]
    return float(at), curve, per_pair


def run_experiment(config, out_dir=None, log=None):
    """Full learned-versus-PCA comparison. Writes the model, feature CSVs and
    precision CSVs to ``out_dir`` when given."""
    timings = {}
    t0 = time.perf_counter()
    pool, surfaces = prepare_surfaces(config, log)
    timings["featurize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    triplets = mine_all(config, pool, surfaces)
    timings["mine"] = time.perf_counter() - t0
    if log:
        log(f"{len(triplets)} training triplets")

    t0 = time.perf_counter()
    net = init_net(config.net_config(pool.shape[1]), derive_seed(config.seed, "init"))
    if config.epochs > 0:
        trained = train(net, triplets, epochs=config.epochs, batch_size=config.batch_size,
                        seed=derive_seed(config.seed, "train"), lr=config.lr, log=log)
        losses, epoch_means = trained.losses, trained.epoch_means()
    else:
        losses, epoch_means = [], []
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    valid_rows = np.concatenate([h.valid_indices + off for s in surfaces
                                 for h, off in zip(s.histograms, s.offsets)])
    rng = np.random.default_rng(derive_seed(config.seed, "pca"))
    take = min(config.pca_samples, len(valid_rows))
    sample_rows = np.sort(rng.choice(valid_rows, size=take, replace=False))
    pca = fit_pca(pool[sample_rows], config.output_dim)
    learned, learned_curve, learned_pairs = evaluate(net.forward, surfaces, config)
    pca_prec, pca_curve, pca_pairs = evaluate(lambda x: pca_embed(pca, x), surfaces, config)
    timings["evaluate"] = time.perf_counter() - t0
    per_pair = [dict(l, pca_precision=p["precision"]) for l, p in zip(learned_pairs, pca_pairs)]

    result = ExperimentResult(config, surfaces, net, pca, losses, epoch_means, learned, pca_prec,
                              learned_curve, pca_curve, per_pair, len(triplets), timings)
    if out_dir is not None:
        result.artifacts = write_artifacts(result, Path(out_dir))
    if log:
        log(f"precision at {config.report_fraction:g} x diameter: learned {learned:.3f}, "
            f"PCA {pca_prec:.3f}")
    return result


def write_artifacts(result, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"model": out_dir / "model.cgf",
             "precision_learned": out_dir / "precision_learned.csv",
             "precision_pca": out_dir / "precision_pca.csv"}
    save_model(paths["model"], result.net)
    write_precision_csv(paths["precision_learned"], result.learned_curve)
    write_precision_csv(paths["precision_pca"], result.pca_curve)
    for s in result.surfaces:
        done = set()
        for p in s.eval_pairs:
            for k in (p.i, p.j):
                if k in done:
                    continue
                done.add(k)
                key = f"features_{s.name}_{k}"
                paths[key] = out_dir / f"{key}.csv"
                write_features_csv(paths[key], _features(result.net.forward, s.histograms[k]))
    summary = out_dir / "summary.json"
    summary.write_text(json.dumps({k: v for k, v in result.summary().items() if k != "timings"},
                                  indent=2, sort_keys=True) + "\n")
    paths["summary"] = summary
    return {k: str(v) for k, v in paths.items()}


def desk_scale_config(seed=0, **overrides):
    """Settings for the small learned-versus-PCA comparison: 16-dim output,
    at most 100 anchors per ordered pair and a larger step size to make up for
    the short training run."""
    base = dict(output_dim=16, max_anchors=100, lr=1e-3, seed=seed)
    base.update(overrides)
    return PipelineConfig(**base)

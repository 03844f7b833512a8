"""Spherical histograms in a local reference frame do not change when the
cloud is rotated.

Samples a torus, picks a few points, rotates the whole cloud and compares the
histograms before and after. Also prints how the neighbors of one point spread
over the radial shells.

    python demos/01_rotation_invariant_histograms.py
"""

import numpy as np

from cgf.geometry import PointCloud, apply_transform, build_kdtree, random_rigid
from cgf.histogram import HistogramConfig, featurize_cloud, radial_thresholds
from cgf.lrf import LrfConfig, estimate_frames
from cgf.surfaces import Torus


def main():
    rng = np.random.default_rng(0)
    pts, _ = Torus().sample(rng, 5000)
    cloud = PointCloud(pts)
    hcfg = HistogramConfig(r=0.3, r_min=0.02)
    lcfg = LrfConfig(0.1, 0.1)
    print(f"{len(cloud)} points on a torus, diameter {cloud.diameter:.3f}")
    print(f"histogram: {hcfg.radial_bins} x {hcfg.elevation_bins} x {hcfg.azimuth_bins} = {hcfg.size} bins")
    print("radial shell edges:", np.round(radial_thresholds(hcfg), 4))

    before = featurize_cloud(cloud, hcfg, lcfg)
    T = random_rigid(rng)
    moved = apply_transform(cloud, T)
    after = featurize_cloud(moved, hcfg, lcfg)

    frames = estimate_frames(cloud, build_kdtree(cloud), lcfg)
    stable = np.flatnonzero(frames.stable)
    print(f"{before.valid.mean():.1%} of points have a valid frame, {frames.stable.mean():.1%} a stable one")
    diff = np.abs(before.values[stable] - after.values[stable]).max(axis=1)
    print(f"stable points with identical histograms after rotation: {np.mean(diff == 0):.1%}")
    print(f"largest difference at any stable point: {diff.max():.2e}")

    k = stable[0]
    shells = before.values[k].reshape(hcfg.radial_bins, -1).sum(axis=1)
    print(f"point {k}: mass per radial shell")
    for j, m in enumerate(shells):
        print(f"  shell {j:2d} {'#' * int(round(60 * m))} {m:.3f}")


if __name__ == "__main__":
    main()

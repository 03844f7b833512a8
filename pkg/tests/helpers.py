"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np

from cgf.net import TripletBatch, init_net, NetConfig


def reference_loss(weights, biases, margin, a, p, n):
    """Triplet loss written out directly, no shared code with the package."""
    def f(x):
        h = x
        for k, (w, b) in enumerate(zip(weights, biases)):
            h = h @ w.T + b
            if k < len(weights) - 1:
                h = np.maximum(h, 0)
        return h
    fa, fp, fn = f(a), f(p), f(n)
    hinge = ((fa - fp) ** 2).sum(1) - ((fa - fn) ** 2).sum(1) + margin
    return np.maximum(hinge, 0).mean()


def kink_pattern(weights, biases, margin, a, p, n, tol=1e-6):
    """Signs of every ReLU pre-activation and hinge argument, plus a flag
    set when any of them is within ``tol`` of zero."""
    signs, near = [], False
    outs = []
    for x in (a, p, n):
        h = x
        for k, (w, b) in enumerate(zip(weights, biases)):
            h = h @ w.T + b
            if k < len(weights) - 1:
                signs.append(h > 0)
                near |= bool((np.abs(h) < tol).any())
                h = np.maximum(h, 0)
        outs.append(h)
    fa, fp, fn = outs
    hinge = ((fa - fp) ** 2).sum(1) - ((fa - fn) ** 2).sum(1) + margin
    signs.append(hinge > 0)
    near |= bool((np.abs(hinge) < tol).any())
    return np.concatenate([s.ravel() for s in signs]), near


def finite_difference_check(seed, dims=(6, 5, 5, 3), batch=4, h=1e-5):
    """Max relative error between analytic and central-difference gradients
    over coordinates away from kinks. Returns ``(max_err, n_checked)``."""
    from cgf.net import loss_and_gradient

    rng = np.random.default_rng(seed)
    net = init_net(NetConfig(dims[0], dims[1:-1], dims[-1]), seed)
    # spread weights so some hinges are active and others not; random biases
    # keep pre-activations away from exact zeros
    for w, b in zip(net.weights, net.biases):
        w *= rng.uniform(2, 5)
        b += rng.normal(0, 0.3, size=b.shape)
    a, p, n = (rng.normal(size=(batch, dims[0])) for _ in range(3))
    _, grads = loss_and_gradient(net, TripletBatch(a, p, n))
    W = [w.copy() for w in net.weights]
    B = [b.copy() for b in net.biases]
    params = []
    for w, b in zip(W, B):
        params += [w, b]
    base_pattern, _ = kink_pattern(W, B, 1.0, a, p, n)
    worst, checked = 0.0, 0
    for g, prm in zip(grads, params):
        flat, gflat = prm.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            plus = reference_loss(W, B, 1.0, a, p, n)
            pat_p, near_p = kink_pattern(W, B, 1.0, a, p, n)
            flat[k] = old - h
            minus = reference_loss(W, B, 1.0, a, p, n)
            pat_m, near_m = kink_pattern(W, B, 1.0, a, p, n)
            flat[k] = old
            if near_p or near_m or not (np.array_equal(pat_p, base_pattern)
                                        and np.array_equal(pat_m, base_pattern)):
                continue
            fd = (plus - minus) / (2 * h)
            err = abs(fd - gflat[k]) / max(abs(fd), abs(gflat[k]), 1e-6)
            worst = max(worst, err)
            checked += 1
    return worst, checked


def brute_overlap(A, B, eps):
    """Fraction of points of A with some point of B within eps, double loop."""
    hit = 0
    for a in A:
        for b in B:
            if np.sqrt(((a - b) ** 2).sum()) <= eps:
                hit += 1
                break
    return hit / len(A)

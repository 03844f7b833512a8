"""Analytic test surfaces with area-uniform samplers and implicit residuals.

Every surface exposes ``sample(rng, n) -> (points, normals)`` with outward
unit normals, and ``residual(points)`` which is zero on the surface.
"""

from __future__ import annotations

import math

import numpy as np


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


class Sphere:
    def __init__(self, radius=1.0):
        self.radius = radius

    def sample(self, rng, n):
        u = _unit(rng.normal(size=(n, 3)))
        return self.radius * u, u

    def residual(self, p):
        return np.linalg.norm(p, axis=1) - self.radius


class _Parametric:
    """Rejection sampling over a (u, v) parameter box weighted by area."""

    u_range = (0.0, 2 * math.pi)
    v_range = (0.0, 2 * math.pi)

    def param(self, u, v):
        raise NotImplementedError

    def _area(self, u, v, h=1e-6):
        du = (self.param(u + h, v) - self.param(u - h, v)) / (2 * h)
        dv = (self.param(u, v + h) - self.param(u, v - h)) / (2 * h)
        return np.linalg.norm(np.cross(du, dv), axis=1)

    def _uv(self, rng, n):
        u = rng.uniform(*self.u_range, size=n)
        v = rng.uniform(*self.v_range, size=n)
        return u, v

    def sample(self, rng, n):
        probe = self._area(*self._uv(rng, 4096))
        wmax = 1.2 * probe.max()
        out = []
        have = 0
        while have < n:
            u, v = self._uv(rng, 2 * (n - have) + 64)
            keep = rng.uniform(0, wmax, size=len(u)) < self._area(u, v)
            pts = self.param(u[keep], v[keep])
            out.append(pts)
            have += len(pts)
        pts = np.concatenate(out)[:n]
        return pts, self.normal(pts)

    def normal(self, p, h=1e-7):
        g = np.zeros_like(p)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            g[:, a] = (self.residual(p + e) - self.residual(p - e)) / (2 * h)
        return _unit(g)


class Torus(_Parametric):
    def __init__(self, major=1.0, minor=0.35):
        self.major, self.minor = major, minor

    def param(self, u, v):
        rho = self.major + self.minor * np.cos(v)
        return np.stack([rho * np.cos(u), rho * np.sin(u), self.minor * np.sin(v)], axis=1)

    def residual(self, p):
        rho = np.hypot(p[:, 0], p[:, 1])
        return np.hypot(rho - self.major, p[:, 2]) - self.minor


class Supertoroid(_Parametric):
    def __init__(self, major=1.0, minor=0.4, e1=0.5, e2=0.5):
        self.major, self.minor, self.e1, self.e2 = major, minor, e1, e2

    def param(self, u, v):
        rho = self.major + self.minor * _spow(np.cos(v), self.e2)
        return np.stack([
            rho * _spow(np.cos(u), self.e1),
            rho * _spow(np.sin(u), self.e1),
            self.minor * _spow(np.sin(v), self.e2),
        ], axis=1)

    def residual(self, p):
        e1, e2 = self.e1, self.e2
        w = (np.abs(p[:, 0]) ** (2 / e1) + np.abs(p[:, 1]) ** (2 / e1)) ** (e1 / 2)
        f = (np.abs(w - self.major) / self.minor) ** (2 / e2) + (np.abs(p[:, 2]) / self.minor) ** (2 / e2)
        return f - 1.0


class Blob:
    """Star-shaped surface ``|x| = rho(x/|x|)`` with a smooth random radius.

    The radius is ``1 + sum_k a_k sin(f_k <w_k, u> + phase_k)`` over unit
    directions ``u``; the terms come from ``shape_seed``.
    """

    def __init__(self, shape_seed=0, terms=40, amplitude=0.3, freq=(3.0, 15.0)):
        rng = np.random.default_rng(shape_seed)
        self.w = _unit(rng.normal(size=(terms, 3)))
        self.freq = rng.uniform(*freq, size=terms)
        self.phase = rng.uniform(0, 2 * math.pi, size=terms)
        a = rng.uniform(0.5, 1.0, size=terms)
        self.amp = amplitude * a / a.sum()

    def _rho(self, u):
        arg = (u @ self.w.T) * self.freq + self.phase
        rho = 1.0 + np.sin(arg) @ self.amp
        grad = (np.cos(arg) * self.amp * self.freq) @ self.w
        g_t = grad - (grad * u).sum(axis=1, keepdims=True) * u
        return rho, g_t

    def sample(self, rng, n):
        out = []
        have = 0
        wmax = None
        while have < n:
            u = _unit(rng.normal(size=(2 * (n - have) + 64, 3)))
            rho, g_t = self._rho(u)
            w = rho * np.sqrt(rho ** 2 + (g_t ** 2).sum(axis=1))
            if wmax is None:
                wmax = 1.5 * w.max()
            keep = rng.uniform(0, wmax, size=len(u)) < w
            out.append(u[keep])
            have += int(keep.sum())
        u = np.concatenate(out)[:n]
        rho, g_t = self._rho(u)
        return rho[:, None] * u, _unit(u - g_t / rho[:, None])

    def residual(self, p):
        r = np.linalg.norm(p, axis=1)
        rho, _ = self._rho(p / r[:, None])
        return r - rho


class BoxUnion:
    """Surface of a union of axis-aligned boxes."""

    def __init__(self, boxes=None):
        if boxes is None:
            boxes = [
                ((0.0, 0.0, 0.0), (0.9, 0.55, 0.4)),
                ((0.55, 0.35, 0.3), (0.35, 0.45, 0.5)),
                ((-0.6, -0.2, 0.35), (0.25, 0.3, 0.3)),
            ]
        self.centers = np.array([b[0] for b in boxes], dtype=np.float64)
        self.halves = np.array([b[1] for b in boxes], dtype=np.float64)

    def _sdf_each(self, p):
        q = np.abs(p[:, None, :] - self.centers[None]) - self.halves[None]
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=2)
        inside = np.minimum(q.max(axis=2), 0.0)
        return outside + inside

    def residual(self, p):
        return self._sdf_each(p).min(axis=1)

    def sample(self, rng, n):
        faces = []  # (box, axis, sign, area)
        for b, h in enumerate(self.halves):
            for ax in range(3):
                o = [a for a in range(3) if a != ax]
                area = 4 * h[o[0]] * h[o[1]]
                faces += [(b, ax, 1.0, area), (b, ax, -1.0, area)]
        areas = np.array([f[3] for f in faces])
        prob = areas / areas.sum()
        pts_out, nrm_out, have = [], [], 0
        while have < n:
            m = 2 * (n - have) + 64
            pick = rng.choice(len(faces), size=m, p=prob)
            uv = rng.uniform(-1, 1, size=(m, 3))
            pts = np.empty((m, 3))
            nrm = np.zeros((m, 3))
            for k, (b, ax, sgn, _) in enumerate(faces):
                sel = pick == k
                local = uv[sel] * self.halves[b]
                local[:, ax] = sgn * self.halves[b, ax]
                pts[sel] = self.centers[b] + local
                nrm[sel, ax] = sgn
            box = np.array([f[0] for f in faces])[pick]
            sdf = self._sdf_each(pts)
            # drop points strictly inside another box
            sdf[np.arange(m), box] = np.inf
            keep = sdf.min(axis=1) >= -1e-12
            pts_out.append(pts[keep])
            nrm_out.append(nrm[keep])
            have += int(keep.sum())
        return np.concatenate(pts_out)[:n], np.concatenate(nrm_out)[:n]


def make_surface(name, shape_seed=0):
    if name == "sphere":
        return Sphere()
    if name == "torus":
        return Torus()
    if name == "supertoroid":
        return Supertoroid()
    if name == "box_union":
        return BoxUnion()
    if name == "blob":
        return Blob(shape_seed)
    raise ValueError(f"unknown surface {name!r}")


SURFACES = ("sphere", "torus", "supertoroid", "box_union", "blob")

"""Quadrature rules on spheres and balls, spherical harmonics, and the
pseudospectral machinery (mode transforms, gradients, traces) that every
integral operator in the toolkit is discretized on.

Conventions
-----------
Spherical harmonics are orthonormal complex harmonics with the
Condon-Shortley phase, so that

    sum_m Y_n^m(x) conj(Y_n^m(y)) = (2n+1)/(4pi) * P_n(x . y)

holds verbatim for unit vectors x, y.  The surface rule is a tensor
product of Gauss-Legendre nodes in colatitude and a uniform azimuthal
grid; ball rules are per-annulus Gauss radial nodes times one shared
angular rule, so radial nodes never sit on a layer interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import sph_harm_y, eval_legendre


def legendre_p(n, x):
    """Legendre polynomial P_n(x), used as the addition-formula oracle."""
    return eval_legendre(n, x)


def eval_spherical_harmonic(n, m, direction):
    """Orthonormal complex Y_n^m evaluated at one or more unit vectors.

    Parameters
    ----------
    n, m : int
        Degree and order, |m| <= n.
    direction : array_like, shape (3,) or (N, 3)
        Unit vectors (checked to 1e-12).

    Returns
    -------
    complex or ndarray of complex
    """
    if abs(m) > n:
        raise ValueError(f"order |m|={abs(m)} exceeds degree n={n}")
    d = np.atleast_2d(np.asarray(direction, dtype=float))
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise ValueError("direction must be a unit vector to 1e-12")
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    vals = sph_harm_y(n, m, theta, phi)
    if np.ndim(direction) == 1:
        return complex(vals[0])
    return vals


def solid_harmonic(n, m, point):
    """Solid harmonic |x|^n Y_n^m(x/|x|); value 0 at the origin for n >= 1."""
    if abs(m) > n:
        raise ValueError(f"order |m|={abs(m)} exceeds degree n={n}")
    p = np.atleast_2d(np.asarray(point, dtype=float))
    r = np.linalg.norm(p, axis=1)
    out = np.zeros(len(p), dtype=complex)
    safe = r > 0
    if np.any(safe):
        d = p[safe] / r[safe, None]
        theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
        phi = np.arctan2(d[:, 1], d[:, 0])
        out[safe] = r[safe] ** n * sph_harm_y(n, m, theta, phi)
    if n == 0:
        out[~safe] = 1.0 / np.sqrt(4.0 * np.pi)
    if np.ndim(point) == 1:
        return complex(out[0])
    return out


def sph_harm_table(lmax, theta, phi):
    """All Y_n^m for n <= lmax at the given angles, shape (n_modes, len(theta)).

    Mode index runs over (n, m) with n = 0..lmax, m = -n..n, in that order.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    rows = []
    for n in range(lmax + 1):
        for m in range(-n, n + 1):
            rows.append(sph_harm_y(n, m, theta, phi))
    return np.array(rows)


def mode_index(lmax):
    """List of (n, m) pairs in the canonical mode ordering."""
    return [(n, m) for n in range(lmax + 1) for m in range(-n, n + 1)]


def sph_harm_theta_derivative(n, m, theta, phi):
    """d/dtheta of Y_n^m via the order-raising recurrence (pole-free angles)."""
    y = sph_harm_y(n, m, theta, phi)
    out = m * (np.cos(theta) / np.sin(theta)) * y
    if m < n:
        out = out + np.sqrt((n - m) * (n + m + 1)) * np.exp(-1j * phi) * sph_harm_y(n, m + 1, theta, phi)
    return out


def tangential_gradient_table(lmax, theta, phi):
    """Surface gradients of Y_n^m on the unit sphere, in Cartesian components.

    Returns an array of shape (n_modes, len(theta), 3) holding
    grad_S Y_n^m = (dY/dtheta) theta_hat + (1/sin theta)(dY/dphi) phi_hat.
    """
    theta = np.clip(np.asarray(theta, dtype=float), 1e-9, np.pi - 1e-9)
    phi = np.asarray(phi, dtype=float)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    theta_hat = np.stack([ct * cp, ct * sp, -st], axis=-1)
    phi_hat = np.stack([-sp, cp, np.zeros_like(sp)], axis=-1)
    rows = []
    for n in range(lmax + 1):
        for m in range(-n, n + 1):
            dth = sph_harm_theta_derivative(n, m, theta, phi)
            dph = 1j * m * sph_harm_y(n, m, theta, phi) / st
            rows.append(dth[:, None] * theta_hat + dph[:, None] * phi_hat)
    return np.array(rows)


def _lagrange_diff_matrix(x):
    """Differentiation matrix for the Lagrange interpolant through nodes x."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    # barycentric weights
    w = np.ones(n)
    for k in range(n):
        w[k] = 1.0 / np.prod(x[k] - np.delete(x, k))
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = (w[j] / w[i]) / (x[i] - x[j])
        D[i, i] = -np.sum(D[i, np.arange(n) != i])
    return D


def _lagrange_eval_weights(x, x0):
    """Row vector evaluating the Lagrange interpolant through x at x0."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    w = np.ones(n)
    for k in range(n):
        w[k] = 1.0 / np.prod(x[k] - np.delete(x, k))
    diffs = x0 - x
    if np.any(diffs == 0.0):
        out = np.zeros(n)
        out[np.argmin(np.abs(diffs))] = 1.0
        return out
    terms = w / diffs
    return terms / terms.sum()


@dataclass(frozen=True)
class SurfaceQuadrature:
    """Product Gauss-Legendre x uniform-azimuth rule on a sphere.

    Attributes
    ----------
    radius : float
    nodes : (N, 3) points on the sphere
    weights : (N,) positive areas summing to 4 pi radius^2
    normals : (N, 3) outward unit normals (= nodes / radius)
    design_order : the rule integrates spherical harmonics up to
        degree 2 * design_order exactly
    """

    radius: float
    nodes: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    design_order: int
    theta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        for a in (self.nodes, self.weights, self.normals, self.theta, self.phi):
            a.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.weights)

    def integrate(self, samples):
        return np.tensordot(self.weights, np.asarray(samples), axes=(0, 0))

    def harmonic_table(self, lmax):
        return _cached_harmonic_table(self, lmax)

    def analyze(self, samples, lmax):
        """Project surface samples onto Y_n^m: returns c with f = sum c Y."""
        Y = self.harmonic_table(lmax)
        samples = np.asarray(samples)
        return (Y.conj() * self.weights) @ samples / self.radius**2

    def synthesize(self, coeffs, lmax):
        Y = self.harmonic_table(lmax)
        return np.tensordot(np.asarray(coeffs), Y, axes=(0, 0))

    def tangential_gradient_table(self, lmax):
        return _cached_tangential_table(self, lmax)


@lru_cache(maxsize=32)
def _surface_tables(key):
    raise RuntimeError("internal")  # replaced below; kept for cache identity


_HARM_CACHE = {}
_TAN_CACHE = {}


def _cached_harmonic_table(quad, lmax):
    key = (id(quad), lmax)
    hit = _HARM_CACHE.get(key)
    if hit is None or hit[0] is not quad:
        hit = (quad, sph_harm_table(lmax, quad.theta, quad.phi))
        _HARM_CACHE[key] = hit
    return hit[1]


def _cached_tangential_table(quad, lmax):
    key = (id(quad), lmax)
    hit = _TAN_CACHE.get(key)
    if hit is None or hit[0] is not quad:
        hit = (quad, tangential_gradient_table(lmax, quad.theta, quad.phi))
        _TAN_CACHE[key] = hit
    return hit[1]


def make_sphere_quadrature(radius, order):
    """Surface rule exact for spherical harmonics up to degree 2*order.

    Gauss-Legendre in cos(colatitude) with order+1 points, uniform azimuth
    with 2*order+2 points; node count grows O(order^2).
    """
    if not isinstance(order, (int, np.integer)) or order < 1:
        raise ValueError("unsupported order %r: supported orders are integers >= 1" % (order,))
    if radius <= 0:
        raise ValueError("radius must be positive")
    n_theta = order + 1
    n_phi = 2 * order + 2
    xs, ws = leggauss(n_theta)
    theta_1d = np.arccos(xs)
    phi_1d = 2.0 * np.pi * np.arange(n_phi) / n_phi
    theta = np.repeat(theta_1d, n_phi)
    phi = np.tile(phi_1d, n_theta)
    w = np.repeat(ws, n_phi) * (2.0 * np.pi / n_phi) * radius**2
    st = np.sin(theta)
    normals = np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
    nodes = radius * normals
    return SurfaceQuadrature(
        radius=float(radius), nodes=nodes, weights=w, normals=normals.copy(),
        design_order=int(order), theta=theta, phi=phi,
    )


@dataclass(frozen=True)
class VolumeQuadrature:
    """Per-annulus Gauss radial nodes times a shared angular rule on a ball.

    The flat node ordering is radial-major: node (k, a) -> k * n_angular + a,
    with radial index k running through the annuli outermost first.  Layer
    index per node matches the region ordering of MediumConfig (0 = outermost).
    """

    outer_radius: float
    interface_radii: tuple
    nodes: np.ndarray
    weights: np.ndarray
    layer_index: np.ndarray
    radial_nodes: np.ndarray          # all radial nodes, outermost annulus first
    radial_weights: np.ndarray
    radial_slices: tuple              # per-annulus slices into radial_nodes
    angular: SurfaceQuadrature        # unit-sphere rule shared by all radii

    def __post_init__(self):
        for a in (self.nodes, self.weights, self.layer_index,
                  self.radial_nodes, self.radial_weights):
            a.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.weights)

    @property
    def n_angular(self):
        return self.angular.n_nodes

    @property
    def n_radial(self):
        return len(self.radial_nodes)

    @property
    def annuli(self):
        bounds = (self.outer_radius,) + self.interface_radii + (0.0,)
        return tuple((bounds[i + 1], bounds[i]) for i in range(len(bounds) - 1))

    def integrate(self, samples):
        return np.tensordot(self.weights, np.asarray(samples), axes=(0, 0))

    # -- pseudospectral machinery -------------------------------------------

    def analyze_modes(self, samples, lmax):
        """Scalar samples -> per-mode radial profiles, shape (n_modes, n_radial)."""
        f = np.asarray(samples).reshape(self.n_radial, self.n_angular)
        Y = self.angular.harmonic_table(lmax)
        return (Y.conj() * self.angular.weights) @ f.T

    def synthesize_modes(self, profiles, lmax):
        Y = self.angular.harmonic_table(lmax)
        f = profiles.T @ Y
        return f.reshape(-1)

    def gradient(self, samples, lmax):
        """Cartesian gradient of a scalar nodal field via the mode expansion."""
        prof = self.analyze_modes(samples, lmax)
        dprof = self._radial_derivative(prof)
        Y = self.angular.harmonic_table(lmax)
        G = self.angular.tangential_gradient_table(lmax)
        r = self.radial_nodes
        rhat = self.angular.nodes  # unit sphere: nodes are directions
        # radial part: f'_nm(r) Y_nm rhat ; angular part: f_nm(r)/r grad_S Y_nm
        rad = np.einsum("mk,ma->ka", dprof, Y)
        out = rad[:, :, None] * rhat[None, :, :]
        ang = np.einsum("mk,mac->kac", prof / r[None, :], G)
        out = out + ang
        return out.reshape(-1, 3)

    def divergence(self, vec_samples, lmax):
        v = np.asarray(vec_samples).reshape(-1, 3)
        out = np.zeros(self.n_nodes, dtype=complex)
        for c in range(3):
            out += self.gradient(v[:, c], lmax)[:, c]
        return out

    def curl(self, vec_samples, lmax):
        v = np.asarray(vec_samples).reshape(-1, 3)
        grads = [self.gradient(v[:, c], lmax) for c in range(3)]
        out = np.empty((self.n_nodes, 3), dtype=complex)
        out[:, 0] = grads[2][:, 1] - grads[1][:, 2]
        out[:, 1] = grads[0][:, 2] - grads[2][:, 0]
        out[:, 2] = grads[1][:, 0] - grads[0][:, 1]
        return out

    def _radial_derivative(self, profiles):
        out = np.empty_like(profiles)
        for sl in self.radial_slices:
            D = _radial_diff(self, sl)
            out[:, sl] = profiles[:, sl] @ D.T
        return out

    def annulus_of_radius(self, r, side="outer"):
        """Index of the annulus whose closure contains radius r.

        side="outer" picks the annulus outside an interface radius,
        side="inner" the one inside.
        """
        for i, (r_in, r_out) in enumerate(self.annuli):
            if r_in < r < r_out:
                return i
        bounds = (self.outer_radius,) + self.interface_radii + (0.0,)
        for i in range(len(bounds)):
            if abs(r - bounds[i]) < 1e-12 * max(1.0, self.outer_radius):
                if i == 0:
                    return 0
                return i - 1 if side == "outer" else min(i, len(self.annuli) - 1)
        raise ValueError(f"radius {r} outside the quadrature ball")

    def trace_profiles(self, samples, radius, lmax, side="outer"):
        """Per-mode values of a scalar field extrapolated to a sphere radius.

        Uses the per-annulus radial Lagrange interpolant, taking the annulus
        on the requested side of the interface.
        """
        prof = self.analyze_modes(samples, lmax)
        i = self.annulus_of_radius(radius, side=side)
        sl = self.radial_slices[i]
        w = _lagrange_eval_weights(self.radial_nodes[sl], radius)
        return prof[:, sl] @ w

    def trace_vector(self, vec_samples, radius, lmax, side="outer"):
        """Vector field traced to a sphere radius, at the angular nodes."""
        v = np.asarray(vec_samples).reshape(-1, 3)
        Y = self.angular.harmonic_table(lmax)
        cols = []
        for c in range(3):
            coef = self.trace_profiles(v[:, c], radius, lmax, side=side)
            cols.append(coef @ Y)
        return np.stack(cols, axis=-1)


def angular_projector(ang: SurfaceQuadrature, lmax):
    """Bandlimited angular projector P[a, a'] = sum_m Y(a) conj(Y(a')) w(a').

    Real by the addition theorem; reproduces any field of degree <= lmax
    sampled on the rule.
    """
    Y = ang.harmonic_table(lmax)
    return np.real(Y.T @ (Y.conj() * ang.weights))


def degree_projectors(ang: SurfaceQuadrature, lmax):
    """Per-degree addition kernels P_n[a, a'] = sum_m Y_n^m(a) conj(Y_n^m)(a') w(a')."""
    Y = ang.harmonic_table(lmax)
    idx = mode_index(lmax)
    out = np.empty((lmax + 1, ang.n_nodes, ang.n_nodes))
    for n in range(lmax + 1):
        rows = [i for i, (nn, _) in enumerate(idx) if nn == n]
        Yn = Y[rows]
        out[n] = np.real(Yn.T @ (Yn.conj() * ang.weights))
    return out


def degree_tangential_projectors(ang: SurfaceQuadrature, lmax):
    """Per-degree tangential synthesis kernels
    G_n[c, a, a'] = sum_m (grad_S Y_n^m)_c(a) conj(Y_n^m)(a') w(a')."""
    Y = ang.harmonic_table(lmax)
    G = ang.tangential_gradient_table(lmax)
    idx = mode_index(lmax)
    out = np.empty((lmax + 1, 3, ang.n_nodes, ang.n_nodes))
    for n in range(lmax + 1):
        rows = [i for i, (nn, _) in enumerate(idx) if nn == n]
        Wn = Y[rows].conj() * ang.weights
        out[n] = np.real(np.einsum("mac,mb->cab", G[rows], Wn))
    return out


def angular_gradient_projectors(ang: SurfaceQuadrature, lmax):
    """G[c][a, a'] synthesizing the c-component of grad_S of the projection."""
    Y = ang.harmonic_table(lmax)
    G = ang.tangential_gradient_table(lmax)
    W = Y.conj() * ang.weights
    return np.real(np.einsum("mac,mb->cab", G, W))


def gradient_matrix(quad: "VolumeQuadrature", lmax):
    """Dense matrix of the Cartesian gradient, rows node-major (i, c)."""
    A = quad.n_angular
    K = quad.n_radial
    P = angular_projector(quad.angular, lmax)
    Gc = angular_gradient_projectors(quad.angular, lmax)
    D = np.zeros((K, K))
    for sl in quad.radial_slices:
        D[sl, sl] = _lagrange_diff_matrix(quad.radial_nodes[sl])
    DP = np.kron(D, P)
    rhat = quad.angular.nodes
    N = quad.n_nodes
    out = np.empty((N, 3, N))
    inv_r = 1.0 / quad.radial_nodes
    for c in range(3):
        block = np.tile(rhat[:, c], K)[:, None] * DP
        ang_part = np.kron(np.diag(inv_r), Gc[c])
        out[:, c, :] = block + ang_part
    return out.reshape(3 * N, N)


def divergence_matrix(quad: "VolumeQuadrature", lmax, grad=None):
    """Dense matrix of the divergence, acting on node-major vector samples."""
    if grad is None:
        grad = gradient_matrix(quad, lmax)
    N = quad.n_nodes
    G = grad.reshape(N, 3, N)
    out = np.zeros((N, 3 * N))
    for c in range(3):
        out[:, c::3] = G[:, c, :]
    return out


def curl_matrix(quad: "VolumeQuadrature", lmax, grad=None):
    """Dense matrix of the curl, node-major on both sides."""
    if grad is None:
        grad = gradient_matrix(quad, lmax)
    N = quad.n_nodes
    G = grad.reshape(N, 3, N)
    out = np.zeros((3 * N, 3 * N))
    pairs = ((0, 1, 2), (1, 2, 0), (2, 0, 1))
    for a, b, c in pairs:
        out[a::3, c::3] = G[:, b, :]
        out[a::3, b::3] -= G[:, c, :]
    return out


def scalar_trace_matrix(quad: "VolumeQuadrature", radius, lmax, side="outer"):
    """Matrix sending scalar nodal samples to trace values at the angular
    nodes of the sphere of the given radius (per-annulus extrapolation)."""
    i = quad.annulus_of_radius(radius, side=side)
    sl = quad.radial_slices[i]
    lam = _lagrange_eval_weights(quad.radial_nodes[sl], radius)
    P = angular_projector(quad.angular, lmax)
    A = quad.n_angular
    out = np.zeros((A, quad.n_nodes))
    for k_local, k in enumerate(range(sl.start, sl.stop)):
        out[:, k * A:(k + 1) * A] = lam[k_local] * P
    return out


_RDIFF_CACHE = {}


def _radial_diff(quad, sl):
    key = (id(quad), sl.start, sl.stop)
    hit = _RDIFF_CACHE.get(key)
    if hit is None or hit[0] is not quad:
        hit = (quad, _lagrange_diff_matrix(quad.radial_nodes[sl]))
        _RDIFF_CACHE[key] = hit
    return hit[1]


def make_ball_quadrature(outer_radius, layer_radii=(), radial_order=8, angular_order=8):
    """Product rule on the ball of the given outer radius.

    layer_radii are interface radii strictly inside outer_radius (descending);
    each annulus gets its own Gauss radial nodes so no node hits an interface.
    Exact for polynomials up to the stated orders per annulus.
    """
    radii = tuple(float(r) for r in layer_radii)
    if any(r <= 0 or r >= outer_radius for r in radii):
        raise ValueError("layer radii must satisfy 0 < r < outer_radius")
    if any(radii[i] <= radii[i + 1] for i in range(len(radii) - 1)):
        raise ValueError("layer radii must be strictly decreasing (overlap)")
    ang = make_sphere_quadrature(1.0, angular_order)
    bounds = (float(outer_radius),) + radii + (0.0,)
    xs, ws = leggauss(radial_order)
    r_all, w_all, slices, layer_of = [], [], [], []
    start = 0
    for i in range(len(bounds) - 1):
        hi, lo = bounds[i], bounds[i + 1]
        r = 0.5 * (hi - lo) * xs + 0.5 * (hi + lo)
        w = 0.5 * (hi - lo) * ws
        order = np.argsort(-r)  # outermost radial node first within annulus
        r_all.append(r[order])
        w_all.append(w[order])
        slices.append(slice(start, start + radial_order))
        layer_of.extend([i] * radial_order)
        start += radial_order
    r_all = np.concatenate(r_all)
    w_all = np.concatenate(w_all)
    nodes = (r_all[:, None, None] * ang.nodes[None, :, :]).reshape(-1, 3)
    weights = (w_all[:, None] * r_all[:, None] ** 2 * ang.weights[None, :]).reshape(-1)
    layer = np.repeat(np.array(layer_of, dtype=int), ang.n_nodes)
    return VolumeQuadrature(
        outer_radius=float(outer_radius), interface_radii=radii,
        nodes=nodes, weights=weights, layer_index=layer,
        radial_nodes=r_all, radial_weights=w_all, radial_slices=tuple(slices),
        angular=ang,
    )

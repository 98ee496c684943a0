"""Kernels and dense discretizations of the integral operators: the outgoing
fundamental solution, volume and layer potentials, the Neumann-Poincare
operator and its adjoint, the second-derivative volume potential, the
linear-growth kernel operator, the ball Neumann function, and the
Neumann-to-Dirichlet map on layered balls.

Sign conventions follow the source problem verbatim: the fundamental
solution is Gamma_k(x) = exp(ik|x|)/(4 pi |x|) (so -(Delta + k^2) Gamma = delta),
and the double-layer kernel is d/dnu_y Gamma_0(x - y).  On a sphere this
makes K[1] = -1/2 and K*[Y_n^m] = -Y_n^m / (2(2n+1)), opposite in sign to
the common classical convention; every oracle in the test suite uses this
convention.

Weakly singular self-interactions are handled by singularity subtraction:
the Newtonian kernel is integrated exactly over the whole cell complex
(closed forms on balls and spheres) and the kinked remainder is left to the
plain product rule.  On-surface single layers additionally get a
spectrally-accurate route through the harmonic transform, which is exact on
spheres and is what the Neumann-to-Dirichlet and inverse-stage machinery
use.  Second-derivative volume potentials are always realized as
grad V[div Phi]; no hypersingular kernel is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SurfaceQuadrature, VolumeQuadrature, mode_index


@dataclass(frozen=True)
class OperatorMatrix:
    """Dense discretization of one integral operator.

    entries maps nodal densities on the domain quadrature to samples on the
    range quadrature.  Vector operators use node-major flattening
    (index 3*i + component).
    """

    entries: np.ndarray
    domain_label: str
    range_label: str
    kernel_tag: str
    wavenumber: float = 0.0
    mean_zero_domain: bool = False
    domain_weights: np.ndarray | None = None

    def __post_init__(self):
        self.entries.setflags(write=False)

    @property
    def shape(self):
        return self.entries.shape

    def apply(self, density):
        density = np.asarray(density)
        flat = density.reshape(-1)
        if self.mean_zero_domain:
            if self.domain_weights is None:
                raise ValueError("mean-zero domain requires quadrature weights")
            mean = abs(np.sum(self.domain_weights * flat)) / np.sum(self.domain_weights)
            scale = np.max(np.abs(flat)) if np.max(np.abs(flat)) > 0 else 1.0
            if mean > 1e-10 * scale:
                raise ValueError("density has nonzero mean; operator domain is mean-free")
        out = self.entries @ flat
        if density.ndim == 2:
            return out.reshape(-1, density.shape[1])
        return out


def fundamental_solution(k0, x):
    """Outgoing kernel exp(ik0 r)/(4 pi r); Newtonian kernel at k0 = 0."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(np.atleast_2d(x), axis=-1)
    if np.any(r == 0.0):
        raise ValueError("fundamental solution is singular at |x| = 0")
    vals = np.exp(1j * k0 * r) / (4.0 * np.pi * r)
    if x.ndim == 1:
        return complex(vals[0])
    return vals


def grad_fundamental_solution(k0, x):
    """Gradient of Gamma_k at displacements x, shape (..., 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0.0):
        raise ValueError("gradient of the fundamental solution is singular at 0")
    g = np.exp(1j * k0 * r) * (1j * k0 * r - 1.0) / (4.0 * np.pi * r**3)
    return g[:, None] * x


def newtonian_ball_potential(points, radius):
    """Exact Newtonian potential of the unit density on a ball."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.linalg.norm(p, axis=-1)
    inside = r <= radius
    out = np.empty(len(p))
    out[inside] = (3.0 * radius**2 - r[inside] ** 2) / 6.0
    out[~inside] = radius**3 / (3.0 * r[~inside])
    return out


def grad_newtonian_ball_potential(points, radius):
    """Exact gradient of the unit-density ball potential."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.linalg.norm(p, axis=-1)
    out = np.empty_like(p)
    inside = r <= radius
    out[inside] = -p[inside] / 3.0
    rr = r[~inside]
    out[~inside] = -radius**3 * p[~inside] / (3.0 * rr**3)[:, None] if np.any(~inside) else out[~inside]
    return out


def _pairwise_diff(targets, sources):
    return targets[:, None, :] - sources[None, :, :]


def volume_potential_matrix(k0, quad: VolumeQuadrature):
    """Dense matrix of the volume potential on the quadrature nodes.

    The self cell is closed by integrating the Newtonian kernel exactly over
    the full ball (the rule always covers one) and quadrating the subtracted
    remainder; the smooth difference Gamma_k - Gamma_0 contributes its value
    ik0/(4 pi) on the diagonal.
    """
    x = quad.nodes
    w = quad.weights
    r = _pairwise_distance(quad)
    g0 = 1.0 / (4.0 * np.pi * r)
    gk = np.exp(1j * k0 * r) * g0 if k0 != 0.0 else g0
    M = gk * w[None, :]
    row_sums = g0 @ w - np.diag(g0) * w
    exact = newtonian_ball_potential(x, quad.outer_radius)
    diag = exact - row_sums
    if k0 != 0.0:
        diag = diag + (1j * k0 / (4.0 * np.pi)) * w
    np.fill_diagonal(M, diag)
    return M


def grad_volume_potential_matrix(k0, quad: VolumeQuadrature, targets=None):
    """Matrix of grad V_k: scalar density -> gradient samples (node-major 3N).

    With targets=None the rule's own nodes are used and the self cell is
    closed through the exact ball gradient; explicit targets must keep a
    positive distance from every node.
    """
    x = quad.nodes
    w = quad.weights
    n = len(x)
    if targets is None:
        r = _pairwise_distance(quad)
        inv_r3 = 1.0 / (4.0 * np.pi * r**3)
        if k0 != 0.0:
            gk = np.exp(1j * k0 * r) * (1j * k0 * r - 1.0) * inv_r3
        else:
            gk = -inv_r3
        exact = grad_newtonian_ball_potential(x, quad.outer_radius)
        out = np.empty((n, 3, n), dtype=gk.dtype)
        idx = np.arange(n)
        for c in range(3):
            d_c = x[:, None, c] - x[None, :, c]
            Kc = gk * d_c * w[None, :]
            Kc[idx, idx] = 0.0
            K0c = (-inv_r3) * d_c
            K0c[idx, idx] = 0.0
            Kc[idx, idx] = exact[:, c] - K0c @ w
            out[:, c, :] = Kc
        return out.reshape(3 * n, n)
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    r = np.sqrt(np.maximum(
        np.sum(t**2, 1)[:, None] + np.sum(x**2, 1)[None, :] - 2.0 * (t @ x.T), 0.0))
    if np.any(r < 1e-13):
        raise ValueError("gradient targets must not coincide with quadrature nodes")
    gk = np.exp(1j * k0 * r) * (1j * k0 * r - 1.0) / (4.0 * np.pi * r**3)
    out = np.empty((len(t), 3, n), dtype=complex)
    for c in range(3):
        d_c = t[:, None, c] - x[None, :, c]
        out[:, c, :] = gk * d_c * w[None, :]
    return out.reshape(3 * len(t), n)


def first_moment_ball_potential(points, radius):
    """Closed form of integral Gamma_0(x-y)(y - x) dy over a ball (interior x)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    r2 = np.sum(p**2, axis=-1)
    return p * (-(radius**2) / 3.0 + r2 / 15.0)[:, None]


def first_moment_grad_ball_potential(points, radius):
    """Closed form of integral grad_x Gamma_0(x-y) (y - x)^T dy over a ball.

    Returns per-point 3x3 blocks delta (R^2/6 - r^2/10) + 2 x x^T / 15.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    r2 = np.sum(p**2, axis=-1)
    blocks = np.einsum("ic,id->icd", p, p) * (2.0 / 15.0)
    diag = radius**2 / 6.0 - r2 / 10.0
    blocks[:, np.arange(3), np.arange(3)] += diag[:, None]
    return blocks


def second_moment_ball_potential(points, radius):
    """Closed form of integral Gamma_0(x-y)(y-x)_d (y-x)_e dy over a ball.

    Q_de = delta_de (R^4/12 - R^2 r^2/30 + r^4/140) + x_d x_e (4R^2/15 - 4r^2/105).
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    r2 = np.sum(p**2, axis=-1)
    alpha = radius**4 / 12.0 - radius**2 * r2 / 30.0 + r2**2 / 140.0
    beta = 4.0 * radius**2 / 15.0 - 4.0 * r2 / 105.0
    out = np.einsum("id,ie->ide", p, p) * beta[:, None, None]
    out[:, np.arange(3), np.arange(3)] += alpha[:, None]
    return out


def second_moment_grad_ball_potential(points, radius):
    """Closed form of integral grad_x Gamma_0(x-y)(y-x)_d(y-x)_e dy over a ball.

    Fully symmetric: (delta_de x_c + delta_cd x_e + delta_ce x_d) *
    (-R^2/15 + r^2/35) - (8/105) x_c x_d x_e.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    r2 = np.sum(p**2, axis=-1)
    coef = -(radius**2) / 15.0 + r2 / 35.0
    eye = np.eye(3)
    out = -(8.0 / 105.0) * np.einsum("ic,id,ie->icde", p, p, p)
    out += np.einsum("i,ic,de->icde", coef, p, eye)
    out += np.einsum("i,ie,cd->icde", coef, p, eye)
    out += np.einsum("i,id,ce->icde", coef, p, eye)
    return out


_FIRST_ORDER_CACHE = {}


def _first_order_blocks(quad, kind):
    """Per-node correction for first-order singularity subtraction.

    kind="grad": 3x3 blocks T(x_i) - sum_j w_j grad Gamma_0 (x_j - x_i)^T;
    kind="value": 3-vectors m(x_i) - sum_j w_j Gamma_0 (x_j - x_i).
    Multiplies the nodal gradient of the density.
    """
    key = (id(quad), kind)
    hit = _FIRST_ORDER_CACHE.get(key)
    if hit is not None and hit[0] is quad:
        return hit[1]
    x = quad.nodes
    w = quad.weights
    n = len(x)
    R = quad.outer_radius
    if kind == "value":
        K1 = np.zeros((n, 3))
        r = _pairwise_distance(quad)
        g0 = 1.0 / (4.0 * np.pi * r)
        np.fill_diagonal(g0, 0.0)
        for c in range(3):
            d_c = x[None, :, c] - x[:, None, c]
            K1[:, c] = (g0 * d_c) @ w
        out = first_moment_ball_potential(x, R) - K1
    elif kind == "value2":
        K2 = np.zeros((n, 3, 3))
        r = _pairwise_distance(quad)
        g0 = 1.0 / (4.0 * np.pi * r)
        np.fill_diagonal(g0, 0.0)
        for dd in range(3):
            d_d = x[None, :, dd] - x[:, None, dd]
            base = g0 * d_d
            for ee in range(dd, 3):
                d_e = x[None, :, ee] - x[:, None, ee]
                K2[:, dd, ee] = (base * d_e) @ w
                K2[:, ee, dd] = K2[:, dd, ee]
        out = second_moment_ball_potential(x, R) - K2
    elif kind == "grad":
        r = _pairwise_distance(quad)
        g0 = -1.0 / (4.0 * np.pi * r**3)
        np.fill_diagonal(g0, 0.0)
        K1 = np.zeros((n, 3, 3))
        for c in range(3):
            d_c = x[:, None, c] - x[None, :, c]
            base = g0 * d_c
            for dd in range(3):
                d_d = x[None, :, dd] - x[:, None, dd]
                K1[:, c, dd] = (base * d_d) @ w
        out = first_moment_grad_ball_potential(x, R) - K1
    else:  # grad2
        r = _pairwise_distance(quad)
        g0 = -1.0 / (4.0 * np.pi * r**3)
        np.fill_diagonal(g0, 0.0)
        K2 = np.zeros((n, 3, 3, 3))
        for c in range(3):
            d_c = x[:, None, c] - x[None, :, c]
            base = g0 * d_c
            for dd in range(3):
                d_d = x[None, :, dd] - x[:, None, dd]
                base2 = base * d_d
                for ee in range(dd, 3):
                    d_e = x[None, :, ee] - x[:, None, ee]
                    K2[:, c, dd, ee] = (base2 * d_e) @ w
                    K2[:, c, ee, dd] = K2[:, c, dd, ee]
        out = second_moment_grad_ball_potential(x, R) - K2
    _FIRST_ORDER_CACHE[key] = (quad, out)
    return out


def _nodal_hessian(quad, density, lmax):
    """Nodal Hessian of a scalar field via two spectral gradients."""
    g = quad.gradient(density, lmax)
    return np.stack([quad.gradient(g[:, c], lmax) for c in range(3)], axis=1)


_DIST_CACHE = {}


def _pairwise_distance(quad):
    key = id(quad)
    hit = _DIST_CACHE.get(key)
    if hit is None or hit[0] is not quad:
        x = quad.nodes
        r = np.sqrt(np.maximum(
            np.sum(x**2, 1)[:, None] + np.sum(x**2, 1)[None, :] - 2.0 * (x @ x.T), 0.0))
        np.fill_diagonal(r, 1.0)
        hit = (quad, r)
        _DIST_CACHE[key] = hit
    return hit[1]


def volume_potential(k0, quad, density, targets=None, first_order=True):
    """Volume potential of a scalar or vector density (componentwise)."""
    density = np.asarray(density, dtype=complex)
    if targets is None:
        M = volume_potential_matrix(k0, quad)
        out = M @ density
        if first_order:
            vecs = _first_order_blocks(quad, "value")
            quads2 = _first_order_blocks(quad, "value2")
            lmax = quad.angular.design_order
            comps = [density] if density.ndim == 1 else [density[:, c] for c in range(density.shape[1])]
            for ci, comp in enumerate(comps):
                corr = np.einsum("id,id->i", vecs, quad.gradient(comp, lmax))
                corr = corr + 0.5 * np.einsum("ide,ide->i", quads2,
                                              _nodal_hessian(quad, comp, lmax))
                if density.ndim == 1:
                    out = out + corr
                else:
                    out[:, ci] += corr
        return out
    else:
        t = np.atleast_2d(np.asarray(targets, dtype=float))
        d = _pairwise_diff(t, quad.nodes)
        r = np.linalg.norm(d, axis=-1)
        if np.any(r < 1e-13):
            raise ValueError("off-node targets must not coincide with quadrature nodes")
        M = np.exp(1j * k0 * r) / (4.0 * np.pi * r) * quad.weights[None, :]
    return M @ density


_RADIAL_NEWTON_CACHE = {}


def _radial_newton_matrices(quad: VolumeQuadrature, n):
    """Matrices A, B on radial samples with
    (A f)_k = int_0^{r_k} f(s) s^{n+2} ds  and  (B f)_k = int_{r_k}^{R} f(s) s^{1-n} ds,
    integrating the per-annulus Lagrange interpolant of f exactly."""
    key = (id(quad), n)
    hit = _RADIAL_NEWTON_CACHE.get(key)
    if hit is not None and hit[0] is quad:
        return hit[1]
    from numpy.polynomial.legendre import leggauss
    K = quad.n_radial
    r = quad.radial_nodes
    A = np.zeros((K, K))
    B = np.zeros((K, K))
    nq = K + n // 2 + 12
    xs, ws = leggauss(nq)

    def seg_integral_rows(nodes, lo, hi, power):
        """Row weights: samples at `nodes` -> integral of interpolant * s^power over [lo, hi]."""
        if hi <= lo:
            return np.zeros(len(nodes))
        s = 0.5 * (hi - lo) * xs + 0.5 * (hi + lo)
        w = 0.5 * (hi - lo) * ws
        rows = _bary_eval_matrix(nodes, s)
        return (w * s**power) @ rows

    bounds = (quad.outer_radius,) + quad.interface_radii + (0.0,)
    n_ann = len(quad.radial_slices)
    full_below = np.zeros((n_ann, K))   # integral of f s^{n+2} over annulus a
    full_above = np.zeros((n_ann, K))   # integral of f s^{1-n} over annulus a
    for a, sl in enumerate(quad.radial_slices):
        hi, lo = bounds[a], bounds[a + 1]
        full_below[a, sl] = seg_integral_rows(r[sl], lo, hi, n + 2)
        full_above[a, sl] = seg_integral_rows(r[sl], lo, hi, 1 - n)
    for a, sl in enumerate(quad.radial_slices):
        hi, lo = bounds[a], bounds[a + 1]
        for k in range(sl.start, sl.stop):
            rk = r[k]
            row_in = np.zeros(K)
            row_out = np.zeros(K)
            # annuli strictly inside rk (indices > a) are fully below
            for b in range(a + 1, n_ann):
                row_in += full_below[b]
            for b in range(0, a):
                row_out += full_above[b]
            row_in_local = np.zeros(K)
            row_in_local[sl] = seg_integral_rows(r[sl], lo, rk, n + 2)
            row_out_local = np.zeros(K)
            row_out_local[sl] = seg_integral_rows(r[sl], rk, hi, 1 - n)
            A[k] = row_in + row_in_local
            B[k] = row_out + row_out_local
    _RADIAL_NEWTON_CACHE[key] = (quad, (A, B))
    return A, B


def _lagrange_eval_weights_vec(nodes, x0):
    from .geometry import _lagrange_eval_weights
    return _lagrange_eval_weights(nodes, x0)


def _bary_weights(nodes):
    nodes = np.asarray(nodes, dtype=float)
    K = len(nodes)
    w = np.ones(K)
    for k in range(K):
        w[k] = 1.0 / np.prod(nodes[k] - np.delete(nodes, k))
    return w


def _bary_eval_matrix(nodes, pts):
    """Rows of Lagrange interpolation weights at many points, vectorized."""
    nodes = np.asarray(nodes, dtype=float)
    pts = np.asarray(pts, dtype=float)
    w = _bary_weights(nodes)
    diffs = pts[:, None] - nodes[None, :]
    exact = diffs == 0.0
    safe = np.where(exact, 1.0, diffs)
    terms = w[None, :] / safe
    out = terms / terms.sum(axis=1, keepdims=True)
    hit = exact.any(axis=1)
    if np.any(hit):
        out[hit] = exact[hit].astype(float)
    return out


def _mode_radial_eval(quad: VolumeQuadrature, n, prof_n, radii):
    """g(rho) and g'(rho) of the degree-n Newtonian mode potential at radii.

    g(rho) = [rho^-(n+1) A(rho) + rho^n B(rho)] / (2n+1) with A, B the inner
    and outer moment integrals of the per-annulus interpolant of prof_n;
    the derivative collapses to [-(n+1) rho^-(n+2) A + n rho^(n-1) B]/(2n+1).
    Vectorized over the target radii.
    """
    from numpy.polynomial.legendre import leggauss
    r = quad.radial_nodes
    radii = np.asarray(radii, dtype=float)
    bounds = (quad.outer_radius,) + quad.interface_radii + (0.0,)
    nq = quad.n_radial + n // 2 + 12
    xs, ws = leggauss(nq)
    n_ann = len(quad.radial_slices)

    def seg_batch(lo, hi_arr, power, sl):
        """Integrals of interpolant * s^power over [lo, hi] for many hi."""
        hi_arr = np.atleast_1d(hi_arr)
        half = 0.5 * (hi_arr - lo)
        mid = 0.5 * (hi_arr + lo)
        s = half[:, None] * xs[None, :] + mid[:, None]         # (T, nq)
        wq = half[:, None] * ws[None, :]
        E = _bary_eval_matrix(r[sl], s.reshape(-1)).reshape(len(hi_arr), nq, -1)
        f = E @ prof_n[sl]
        return np.sum(wq * s**power * f, axis=1)

    full_in = np.array([seg_batch(bounds[a + 1], bounds[a], n + 2, sl)[0]
                        for a, sl in enumerate(quad.radial_slices)])
    full_out = np.array([seg_batch(bounds[a + 1], bounds[a], 1 - n, sl)[0]
                         for a, sl in enumerate(quad.radial_slices)])
    A_in = np.zeros(len(radii), dtype=complex)
    B_out = np.zeros(len(radii), dtype=complex)
    outside = radii >= quad.outer_radius - 1e-15 * quad.outer_radius
    A_in[outside] = full_in.sum()
    inside = ~outside
    if np.any(inside):
        rin = radii[inside]
        ann = np.zeros(len(rin), dtype=int)
        for a in range(n_ann):
            lo, hi = bounds[a + 1], bounds[a]
            ann[(rin < hi) & (rin >= lo)] = a
        Ai = np.zeros(len(rin), dtype=complex)
        Bo = np.zeros(len(rin), dtype=complex)
        for a, sl in enumerate(quad.radial_slices):
            mask = ann == a
            if not np.any(mask):
                continue
            Ai[mask] = full_in[a + 1:].sum() + seg_batch(bounds[a + 1], rin[mask], n + 2, sl)
            # outer part within the annulus: full - inner part
            part_out_full = full_out[a]
            part_out_in = seg_batch(bounds[a + 1], rin[mask], 1 - n, sl)
            Bo[mask] = full_out[:a].sum() + (part_out_full - part_out_in)
        A_in[inside] = Ai
        B_out[inside] = Bo
    g = (radii ** (-(n + 1)) * A_in + radii**n * B_out) / (2 * n + 1)
    gp = (-(n + 1) * radii ** (-(n + 2)) * A_in + n * radii ** (n - 1) * B_out) / (2 * n + 1)
    return g, gp


def volume_potential_modes_at(quad: VolumeQuadrature, density, lmax, targets, gradient=False):
    """Newtonian potential (and optionally gradient) of a nodal density at
    arbitrary targets through the mode expansion; valid at any radius,
    including points arbitrarily close to nodes or interfaces."""
    from .geometry import sph_harm_table, tangential_gradient_table
    density = np.asarray(density, dtype=complex)
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    rho = np.linalg.norm(t, axis=1)
    if np.any(rho < 1e-13):
        raise ValueError("mode evaluation requires targets away from the origin")
    theta = np.arccos(np.clip(t[:, 2] / rho, -1, 1))
    phi = np.arctan2(t[:, 1], t[:, 0])
    Yt = sph_harm_table(lmax, theta, phi)
    Gt = tangential_gradient_table(lmax, theta, phi) if gradient else None
    rhat = t / rho[:, None]
    comps = [density] if density.ndim == 1 else [density[:, c] for c in range(density.shape[1])]
    vals, grads = [], []
    for comp in comps:
        prof = quad.analyze_modes(comp, lmax)
        v = np.zeros(len(t), dtype=complex)
        g = np.zeros((len(t), 3), dtype=complex)
        i = 0
        for n in range(lmax + 1):
            for m in range(-n, n + 1):
                if np.max(np.abs(prof[i])) > 0:
                    coef_g, coef_gp = _mode_radial_eval(quad, n, prof[i], rho)
                    v += coef_g * Yt[i]
                    if gradient:
                        g += (coef_gp * Yt[i])[:, None] * rhat
                        g += (coef_g / rho)[:, None] * Gt[i]
                i += 1
        vals.append(v)
        grads.append(g)
    if density.ndim == 1:
        return (vals[0], grads[0]) if gradient else vals[0]
    v = np.stack(vals, axis=-1)
    if gradient:
        return v, np.stack(grads, axis=-1)
    return v


_MODE_MAT_CACHE = {}


def newtonian_mode_matrices(quad: VolumeQuadrature, lmax):
    """Real dense matrices of the Newtonian volume potential and its gradient
    on the quadrature's own nodes, built per harmonic degree.

    Returns dict with "V" of shape (N, N) and "G" of shape (3N, N),
    node-major rows for "G".
    """
    from .geometry import degree_projectors, degree_tangential_projectors
    key = (id(quad), lmax)
    hit = _MODE_MAT_CACHE.get(key)
    if hit is not None and hit[0] is quad:
        return hit[1]
    P = degree_projectors(quad.angular, lmax)
    Gtan = degree_tangential_projectors(quad.angular, lmax)
    r = quad.radial_nodes
    K = quad.n_radial
    A = quad.n_angular
    N = quad.n_nodes
    rhat = quad.angular.nodes
    V = np.zeros((N, N))
    G = np.zeros((N, 3, N))
    for n in range(lmax + 1):
        Ain, Bout = _radial_newton_matrices(quad, n)
        Gval = (r ** (-(n + 1)))[:, None] * Ain + (r**n)[:, None] * Bout
        Gval /= (2 * n + 1)
        Gder = (-(n + 1) * r ** (-(n + 2)))[:, None] * Ain + (n * r ** (n - 1))[:, None] * Bout
        Gder /= (2 * n + 1)
        V += np.kron(Gval, P[n])
        DP = np.kron(Gder, P[n])
        for c in range(3):
            G[:, c, :] += np.tile(rhat[:, c], K)[:, None] * DP
            G[:, c, :] += np.kron(Gval / r[:, None], Gtan[n][c])
    out = {"V": V, "G": G.reshape(3 * N, N)}
    _MODE_MAT_CACHE[key] = (quad, out)
    return out


def sphere_source_matrices(radius_src, quad: VolumeQuadrature, lmax, gradient=True):
    """Matrices of the single layer on the sphere radius_src (densities at the
    shared angular nodes) evaluated at the volume nodes: value (N, A) and
    gradient (3N, A)."""
    from .geometry import degree_projectors, degree_tangential_projectors
    P = degree_projectors(quad.angular, lmax)
    Gtan = degree_tangential_projectors(quad.angular, lmax)
    r = quad.radial_nodes
    K = quad.n_radial
    A = quad.n_angular
    N = quad.n_nodes
    rhat = quad.angular.nodes
    Rs = radius_src
    S = np.zeros((N, A))
    G = np.zeros((N, 3, A)) if gradient else None
    for n in range(lmax + 1):
        inside = r < Rs
        gval = np.where(inside, Rs ** (1 - n) * r**n, Rs ** (n + 2) * r ** (-(n + 1))) / (2 * n + 1)
        gder = np.where(inside, n * Rs ** (1 - n) * r ** (n - 1),
                        -(n + 1) * Rs ** (n + 2) * r ** (-(n + 2))) / (2 * n + 1)
        S += np.kron(gval[:, None], P[n])
        if gradient:
            DP = np.kron(gder[:, None], P[n])
            for c in range(3):
                G[:, c, :] += np.tile(rhat[:, c], K)[:, None] * DP
                G[:, c, :] += np.kron((gval / r)[:, None], Gtan[n][c])
    if gradient:
        return S, G.reshape(3 * N, A)
    return S


def single_layer_sphere_eval(squad: SurfaceQuadrature, density, targets, lmax=None, gradient=False):
    """Newtonian single layer of a sphere density at arbitrary targets via
    the mode expansion (exact in radius, no near-surface breakdown)."""
    from .geometry import sph_harm_table, tangential_gradient_table
    if lmax is None:
        lmax = squad.design_order
    coef = squad.analyze(np.asarray(density, dtype=complex), lmax)
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    rho = np.linalg.norm(t, axis=1)
    theta = np.arccos(np.clip(t[:, 2] / rho, -1, 1))
    phi = np.arctan2(t[:, 1], t[:, 0])
    Yt = sph_harm_table(lmax, theta, phi)
    R = squad.radius
    val = np.zeros(len(t), dtype=complex)
    grad = np.zeros((len(t), 3), dtype=complex)
    Gt = tangential_gradient_table(lmax, theta, phi) if gradient else None
    rhat = t / rho[:, None]
    for i, (n, m) in enumerate(mode_index(lmax)):
        inside = rho < R
        g = np.where(inside, R ** (1 - n) * rho**n, R ** (n + 2) * rho ** (-(n + 1))) / (2 * n + 1)
        val += coef[i] * g * Yt[i]
        if gradient:
            gd = np.where(inside, n * R ** (1 - n) * rho ** (n - 1),
                          -(n + 1) * R ** (n + 2) * rho ** (-(n + 2))) / (2 * n + 1)
            grad += coef[i] * (gd * Yt[i])[:, None] * rhat
            grad += coef[i] * (g / rho)[:, None] * Gt[i]
    if gradient:
        return val, grad
    return val


def volume_potential_modes(quad: VolumeQuadrature, density, lmax):
    """Newtonian volume potential through the harmonic-mode radial formula.

    Exact up to the angular bandlimit and the per-annulus polynomial
    interpolation of the radial profiles; serves as the high-precision
    independent route next to the kernel quadrature.
    """
    density = np.asarray(density, dtype=complex)
    comps = [density] if density.ndim == 1 else [density[:, c] for c in range(density.shape[1])]
    outs = []
    r = quad.radial_nodes
    for comp in comps:
        prof = quad.analyze_modes(comp, lmax)
        vals = np.zeros_like(prof)
        for i, (n, m) in enumerate(mode_index(lmax)):
            A, B = _radial_newton_matrices(quad, n)
            vals[i] = (r ** (-(n + 1)) * (A @ prof[i]) + r**n * (B @ prof[i])) / (2 * n + 1)
        outs.append(quad.synthesize_modes(vals, lmax))
    if density.ndim == 1:
        return outs[0]
    return np.stack(outs, axis=-1)


def single_layer_matrix_spectral(squad: SurfaceQuadrature, lmax, k0=0.0):
    """On-surface single layer through the harmonic transform.

    The Newtonian part is mode-diagonal with eigenvalue R/(2n+1); for
    k0 > 0 the continuous difference kernel is added by plain quadrature.
    """
    Y = squad.harmonic_table(lmax)
    eig = np.array([squad.radius / (2 * n + 1) for n, _ in mode_index(lmax)])
    analyze = Y.conj() * squad.weights / squad.radius**2
    M = (Y.T * eig) @ analyze
    if k0 != 0.0:
        d = _pairwise_diff(squad.nodes, squad.nodes)
        r = np.linalg.norm(d, axis=-1)
        np.fill_diagonal(r, 1.0)
        diff = (np.exp(1j * k0 * r) - 1.0) / (4.0 * np.pi * r)
        np.fill_diagonal(diff, 1j * k0 / (4.0 * np.pi))
        M = M + diff * squad.weights[None, :]
    return M


def single_layer_offsurface_matrix(k0, squad: SurfaceQuadrature, targets):
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    d = _pairwise_diff(t, squad.nodes)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r < 1e-13):
        raise ValueError("targets must stay off the source surface nodes")
    return np.exp(1j * k0 * r) / (4.0 * np.pi * r) * squad.weights[None, :]


def single_layer(k0, squad, density, targets=None):
    """Single layer potential; on-surface values when targets is None."""
    density = np.asarray(density, dtype=complex)
    if targets is None:
        lmax = squad.design_order
        M = single_layer_matrix_spectral(squad, lmax, k0)
    else:
        M = single_layer_offsurface_matrix(k0, squad, targets)
    return M @ density


def grad_single_layer_matrix(k0, squad: SurfaceQuadrature, targets):
    """grad S_k at strictly off-surface targets (node-major 3N rows)."""
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    d = _pairwise_diff(t, squad.nodes)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r < 1e-13):
        raise ValueError("gradient targets must stay off the source surface")
    g = np.exp(1j * k0 * r) * (1j * k0 * r - 1.0) / (4.0 * np.pi * r**3)
    K = g[:, :, None] * d * squad.weights[None, :, None]
    return np.swapaxes(K, 1, 2).reshape(3 * len(t), squad.n_nodes)


def double_layer_offsurface_matrix(squad: SurfaceQuadrature, targets):
    """Double layer with kernel d Gamma_0(x-y)/d nu_y, off-surface targets."""
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    d = _pairwise_diff(t, squad.nodes)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r < 1e-13):
        raise ValueError("targets must stay off the source surface nodes")
    ker = np.einsum("tjc,jc->tj", d, squad.normals) / (4.0 * np.pi * r**3)
    return ker * squad.weights[None, :]


def _sphere_pv_matrix(squad: SurfaceQuadrature, normal_side):
    """Principal-value matrix shared by K, K* and the on-surface D on spheres.

    normal_side selects the kernel (d/dnu_y or d/dnu_x); on a sphere both
    reduce to -1/(8 pi R |x-y|) and the row defect is closed with the exact
    value -1/2 of the operator on constants.
    """
    x = squad.nodes
    d = _pairwise_diff(x, x)
    r = np.linalg.norm(d, axis=-1)
    np.fill_diagonal(r, 1.0)
    if normal_side == "y":
        ker = np.einsum("ijc,jc->ij", d, squad.normals) / (4.0 * np.pi * r**3)
    else:
        ker = -np.einsum("ijc,ic->ij", d, squad.normals) / (4.0 * np.pi * r**3)
    M = ker * squad.weights[None, :]
    np.fill_diagonal(M, 0.0)
    diag = -0.5 - M.sum(axis=1)
    M[np.arange(len(x)), np.arange(len(x))] = diag
    return M


def np_operator(squad: SurfaceQuadrature, adjoint=True):
    """Dense Neumann-Poincare operator K (adjoint=False) or K* on a sphere."""
    M = _sphere_pv_matrix(squad, "x" if adjoint else "y")
    return OperatorMatrix(
        entries=M,
        domain_label=f"surface(R={squad.radius:g})",
        range_label=f"surface(R={squad.radius:g})",
        kernel_tag="K*" if adjoint else "K",
        wavenumber=0.0,
        domain_weights=squad.weights,
    )


def double_layer(squad, density, targets=None):
    """Double layer potential; on-surface targets use the principal value."""
    density = np.asarray(density, dtype=complex)
    if targets is None:
        return _sphere_pv_matrix(squad, "y") @ density
    return double_layer_offsurface_matrix(squad, targets) @ density


def dnu_single_layer_matrix(k0, squad_src: SurfaceQuadrature, targets, target_normals):
    """Normal derivative of S_k on a different surface (smooth kernel)."""
    G = grad_single_layer_matrix(k0, squad_src, targets)
    G = G.reshape(len(np.atleast_2d(targets)), 3, squad_src.n_nodes)
    return np.einsum("tcj,tc->tj", G, np.atleast_2d(target_normals))


def grad_volume_potential(k0, quad, density, targets=None, lmax=None, method="auto"):
    """grad V_k of a scalar density.

    At the rule's own nodes the default route is the per-mode radial formula
    (exact for band-limited densities, jump-safe at interfaces); the kernel
    route with singularity subtraction is kept for cross-validation and for
    explicit separated targets.  k > 0 adds the smooth difference kernel.
    """
    density = np.asarray(density, dtype=complex)
    if lmax is None:
        lmax = quad.angular.design_order
    if targets is None and method in ("auto", "modes"):
        out = (newtonian_mode_matrices(quad, lmax)["G"] @ density).reshape(-1, 3)
        if k0 != 0.0:
            out = out + _smooth_grad_difference(k0, quad) @ density
        return out
    G = grad_volume_potential_matrix(k0, quad, targets)
    npts = G.shape[0] // 3
    out = (G @ density).reshape(npts, 3)
    if targets is None:
        blocks = _first_order_blocks(quad, "grad")
        g = quad.gradient(density, lmax)
        out = out + np.einsum("icd,id->ic", blocks, g)
        blocks2 = _first_order_blocks(quad, "grad2")
        H = _nodal_hessian(quad, density, lmax)
        out = out + 0.5 * np.einsum("icde,ide->ic", blocks2, H)
    return out


def _smooth_grad_difference(k0, quad):
    """Matrix of grad(Gamma_k - Gamma_0) on the nodes (bounded kernel)."""
    x = quad.nodes
    w = quad.weights
    n = len(x)
    r = _pairwise_distance(quad)
    g = (np.exp(1j * k0 * r) * (1j * k0 * r - 1.0) + 1.0) / (4.0 * np.pi * r**3)
    out = np.empty((n, 3, n), dtype=complex)
    idx = np.arange(n)
    for c in range(3):
        d_c = x[:, None, c] - x[None, :, c]
        Kc = g * d_c * w[None, :]
        Kc[idx, idx] = 0.0
        out[:, c, :] = Kc
    return out.reshape(3 * n, n)


def d2_volume_potential(quad, density, div_density, targets=None, lmax=None):
    """grad V_0 [div Phi]: the second-derivative volume potential on
    compactly supported fields, realized without hypersingular kernels."""
    if div_density is None:
        raise ValueError("d2_volume_potential requires divergence samples")
    return grad_volume_potential(0.0, quad, div_density, targets=targets, lmax=lmax)


def curl_volume_potential(k0, quad, density, curl_density=None, targets=None, path="smooth"):
    """curl V_k of a compactly supported vector density.

    path="smooth" evaluates V_k[curl Phi] (preferred, weakly singular kernel
    only); path="kernel" differentiates the kernel for cross-validation.
    """
    if path == "smooth":
        if curl_density is None:
            raise ValueError("smooth path requires curl samples")
        return volume_potential(k0, quad, np.asarray(curl_density, dtype=complex), targets)
    density = np.asarray(density, dtype=complex)
    x = quad.nodes
    w = quad.weights
    self_rule = targets is None
    t = x if self_rule else np.atleast_2d(np.asarray(targets, dtype=float))
    if self_rule:
        r = _pairwise_distance(quad).copy()
    else:
        r = np.sqrt(np.maximum(
            np.sum(t**2, 1)[:, None] + np.sum(x**2, 1)[None, :] - 2.0 * (t @ x.T), 0.0))
        if np.any(r < 1e-13):
            raise ValueError("kernel-path targets must keep a distance from the nodes")
    g = np.exp(1j * k0 * r) * (1j * k0 * r - 1.0) / (4.0 * np.pi * r**3)
    out = np.empty((len(t), 3, 3), dtype=complex)
    for c in range(3):
        d_c = t[:, None, c] - x[None, :, c]
        Kc = g * d_c * w[None, :]
        if self_rule:
            np.fill_diagonal(Kc, 0.0)
        out[:, c, :] = Kc @ density
    if self_rule:
        # zeroth-order closure: the ball integral of grad Gamma_0 is exact
        corr = grad_newtonian_ball_potential(t, quad.outer_radius)
        g0 = -1.0 / (4.0 * np.pi * r**3)
        for c in range(3):
            d_c = t[:, None, c] - x[None, :, c]
            K0 = g0 * d_c
            np.fill_diagonal(K0, 0.0)
            corr[:, c] -= K0 @ w
        out += np.einsum("tc,td->tcd", corr, density)
        # first- and second-order closures against nodal Jacobian and Hessians
        blocks = _first_order_blocks(quad, "grad")
        blocks2 = _first_order_blocks(quad, "grad2")
        lmax = quad.angular.design_order
        jac = np.stack([quad.gradient(density[:, dcomp], lmax) for dcomp in range(3)], axis=-1)
        out += np.einsum("tcb,tbd->tcd", blocks, jac)
        for dcomp in range(3):
            H = _nodal_hessian(quad, density[:, dcomp], lmax)
            out[:, :, dcomp] += 0.5 * np.einsum("tcde,tde->tc", blocks2, H)
    return np.stack([out[:, 1, 2] - out[:, 2, 1],
                     out[:, 2, 0] - out[:, 0, 2],
                     out[:, 0, 1] - out[:, 1, 0]], axis=-1)


def l_operator_matrix(quad: VolumeQuadrature, targets=None):
    """Matrix of the linear-growth kernel operator -(1/4pi)|x-y| (continuous)."""
    x = quad.nodes
    t = x if targets is None else np.atleast_2d(np.asarray(targets, dtype=float))
    d = _pairwise_diff(t, x)
    r = np.linalg.norm(d, axis=-1)
    return -(r / (4.0 * np.pi)) * quad.weights[None, :]


def l_operator(quad, density, targets=None):
    density = np.asarray(density, dtype=complex)
    return l_operator_matrix(quad, targets) @ density


def neumann_function_ball(eps, x, y, radius=1.0):
    """Neumann function of div(eps grad .) on a ball, constant eps.

    Normalized by a constant boundary flux -1/|boundary| and zero boundary
    mean.  Closed form: image expansion of the Newtonian kernel plus the
    log term from summing (n+1)/(n(2n+1)) r^n rho^n P_n.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float)) / radius
    y = np.atleast_2d(np.asarray(y, dtype=float)) / radius
    if x.shape[0] == 1 and y.shape[0] > 1:
        x = np.broadcast_to(x, y.shape)
    if y.shape[0] == 1 and x.shape[0] > 1:
        y = np.broadcast_to(y, x.shape)
    diff = np.linalg.norm(x - y, axis=-1)
    if np.any(diff < 1e-14):
        raise ValueError("Neumann function evaluated on its diagonal x = y")
    dot = np.einsum("ic,ic->i", x, y)
    D = np.sqrt(np.maximum(1.0 - 2.0 * dot + np.sum(x**2, -1) * np.sum(y**2, -1), 0.0))
    val = (1.0 / diff + 1.0 / D + np.log(2.0 / (1.0 - dot + D)) - 2.0) / (4.0 * np.pi)
    val = val / (eps * radius)
    if val.shape == (1,):
        return float(val[0])
    return val


def nd_mode_eigenvalues(medium, lmax):
    """Per-mode Neumann-to-Dirichlet values on the layered ball.

    Mode n >= 1 maps the conormal coefficient of Y_n^m to the trace
    coefficient; the n = 0 entry is set to zero (mean-free domain).
    """
    radii = list(medium.layer_radii)
    eps = list(medium.eps_layers)
    m_regions = len(eps)
    r0 = radii[0]
    lam = np.zeros(lmax + 1)
    for n in range(1, lmax + 1):
        if m_regions == 1:
            lam[n] = r0 / (n * eps[0])
            continue
        # unknowns: (a_i, b_i) per region, core b = 0
        nun = 2 * m_regions - 1
        A = np.zeros((nun, nun))
        rhs = np.zeros(nun)

        def a_of(i):
            return 2 * i

        def b_of(i):
            return 2 * i + 1

        row = 0
        # outer Neumann data: eps_0 u_0'(r0) = 1
        A[row, a_of(0)] = eps[0] * n * r0 ** (n - 1)
        A[row, b_of(0)] = -eps[0] * (n + 1) * r0 ** (-n - 2)
        rhs[row] = 1.0
        row += 1
        for i in range(m_regions - 1):
            ri = radii[i + 1]
            inner_core = i + 1 == m_regions - 1
            # continuity of u
            A[row, a_of(i)] = ri**n
            A[row, b_of(i)] = ri ** (-n - 1)
            A[row, a_of(i + 1)] -= ri**n
            if not inner_core:
                A[row, b_of(i + 1)] -= ri ** (-n - 1)
            row += 1
            # continuity of eps u'
            A[row, a_of(i)] = eps[i] * n * ri ** (n - 1)
            A[row, b_of(i)] = -eps[i] * (n + 1) * ri ** (-n - 2)
            A[row, a_of(i + 1)] -= eps[i + 1] * n * ri ** (n - 1)
            if not inner_core:
                A[row, b_of(i + 1)] += eps[i + 1] * (n + 1) * ri ** (-n - 2)
            row += 1
        sol = np.linalg.solve(A, rhs)
        lam[n] = sol[a_of(0)] * r0**n + sol[b_of(0)] * r0 ** (-n - 1)
    return lam


def nd_map(medium, squad: SurfaceQuadrature, lmax=None):
    """Neumann-to-Dirichlet map on the outer sphere of a layered medium.

    Maps mean-free conormal data eps du/dnu to mean-free Dirichlet traces,
    assembled per spherical-harmonic mode from the radial transmission
    recurrence.
    """
    if lmax is None:
        lmax = squad.design_order
    if abs(squad.radius - medium.layer_radii[0]) > 1e-12:
        raise ValueError("quadrature sphere must be the outer boundary of the medium")
    lam_n = nd_mode_eigenvalues(medium, lmax)
    eig = np.array([lam_n[n] for n, _ in mode_index(lmax)])
    Y = squad.harmonic_table(lmax)
    analyze = Y.conj() * squad.weights / squad.radius**2
    M = (Y.T * eig) @ analyze
    return OperatorMatrix(
        entries=M,
        domain_label=f"surface(R={squad.radius:g}):mean-zero",
        range_label=f"surface(R={squad.radius:g}):mean-zero",
        kernel_tag="Lambda",
        wavenumber=0.0,
        mean_zero_domain=True,
        domain_weights=squad.weights,
    )

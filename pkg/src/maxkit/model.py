"""Domain data types shared across the toolkit: medium configurations on
nested balls, current sources with divergence/curl samples, boundary trace
datasets, asymptotic coefficients, harmonic moment sets, plus validation
and the closed-form source catalog.

All types are immutable after construction and safe to share across
workers; derived quantities (contrasts, wavenumbers) are recomputed from
the stored primaries on every call, never cached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import (VolumeQuadrature, SurfaceQuadrature, sph_harm_table,
                       tangential_gradient_table, make_sphere_quadrature, mode_index)


@dataclass(frozen=True)
class MediumConfig:
    """Layered piecewise-constant permittivity/conductivity on nested balls
    with a constant interior permeability.

    layer_radii are strictly decreasing; region j lives between radius j and
    radius j+1 (the last region is the core ball).  Exterior values are
    fixed to (eps0, mu0, 0).
    """

    layer_radii: tuple
    eps_layers: tuple
    sigma_layers: tuple
    mu_interior: float
    eps0: float = 1.0
    mu0: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layer_radii", tuple(float(r) for r in self.layer_radii))
        object.__setattr__(self, "eps_layers", tuple(float(e) for e in self.eps_layers))
        object.__setattr__(self, "sigma_layers", tuple(float(s) for s in self.sigma_layers))

    @property
    def n_regions(self):
        return len(self.eps_layers)

    @property
    def outer_radius(self):
        return self.layer_radii[0]

    @property
    def interface_radii(self):
        return self.layer_radii[1:]

    @property
    def is_constant(self):
        return self.n_regions == 1

    def wavenumber(self, omega):
        return omega * np.sqrt(self.eps0 * self.mu0)

    def gamma_tilde(self, omega):
        """Electric contrast per region, (eps + i sigma/omega - eps0)/eps0."""
        eps = np.asarray(self.eps_layers, dtype=complex)
        sig = np.asarray(self.sigma_layers, dtype=float)
        return (eps + 1j * sig / omega - self.eps0) / self.eps0

    @property
    def mu_tilde(self):
        return (self.mu_interior - self.mu0) / self.mu0

    def sigma_eps_ratio(self, tol=1e-12):
        """The constant c with sigma = c * eps, or None if not proportional."""
        ratios = [s / e for s, e in zip(self.sigma_layers, self.eps_layers)]
        if max(ratios) - min(ratios) <= tol * max(1.0, max(ratios)):
            return ratios[0]
        return None

    def c1(self, omega):
        """i / (eps0 (omega + c i)) for the proportional-conductivity case."""
        c = self.sigma_eps_ratio()
        if c is None:
            raise ValueError("c1 is defined only when sigma is proportional to eps")
        return 1j / (self.eps0 * (omega + c * 1j))

    def c_coeffs(self, omega):
        """Per-region (sigma + i eps omega) / (eps^2 omega^2 + sigma^2)."""
        eps = np.asarray(self.eps_layers)
        sig = np.asarray(self.sigma_layers)
        return (sig + 1j * eps * omega) / (eps**2 * omega**2 + sig**2)

    def validate(self):
        issues = []
        radii = self.layer_radii
        if any(r <= 0 for r in radii):
            issues.append("layer radii must be positive")
        if any(radii[i] <= radii[i + 1] for i in range(len(radii) - 1)):
            issues.append("layer radii must be strictly decreasing")
        if len(self.eps_layers) != len(radii) or len(self.sigma_layers) != len(radii):
            issues.append("eps/sigma lists must match the number of layers")
        if any(e <= 0 for e in self.eps_layers):
            issues.append("permittivities must be positive")
        if any(s < 0 for s in self.sigma_layers):
            issues.append("conductivities must be nonnegative")
        if self.mu_interior <= 0:
            issues.append("permeability must be positive")
        if self.eps0 <= 0 or self.mu0 <= 0:
            issues.append("background constants must be positive")
        return issues

    def to_dict(self):
        return {
            "layers": [
                {"radius": r, "eps": e, "sigma": s}
                for r, e, s in zip(self.layer_radii, self.eps_layers, self.sigma_layers)
            ],
            "mu": self.mu_interior,
            "eps0": self.eps0,
            "mu0": self.mu0,
        }

    @classmethod
    def from_dict(cls, d):
        layers = d["layers"]
        return cls(
            layer_radii=tuple(l["radius"] for l in layers),
            eps_layers=tuple(l["eps"] for l in layers),
            sigma_layers=tuple(l["sigma"] for l in layers),
            mu_interior=d["mu"],
            eps0=d.get("eps0", 1.0),
            mu0=d.get("mu0", 1.0),
        )


@dataclass(frozen=True)
class SourceSpec:
    """Current density on a volume quadrature with div/curl samples.

    class_tag is one of "curl_free", "div_free", "general".  tail=True marks
    catalog sources defined through potentials of truncated densities: their
    div/curl vanish outside support_radius exactly while the field itself
    carries the decaying harmonic-gradient tail.
    """

    quad: VolumeQuadrature
    values: np.ndarray
    div_values: np.ndarray
    curl_values: np.ndarray
    support_radius: float
    class_tag: str
    kind: str = "samples"
    params: dict = field(default_factory=dict)
    tail: bool = False

    def __post_init__(self):
        for a in (self.values, self.div_values, self.curl_values):
            a.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.values)

    def max_norm(self):
        return float(np.max(np.abs(self.values)))

    def to_dict(self):
        return {"kind": self.kind, "params": self.params,
                "support_radius": self.support_radius, "class_tag": self.class_tag}


@dataclass(frozen=True)
class BoundaryDataset:
    """Traces of (E, H) at surface nodes over an ascending frequency grid."""

    frequencies: tuple
    radius: float
    nodes: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    E_traces: np.ndarray   # (n_freq, n_nodes, 3) complex
    H_traces: np.ndarray

    def __post_init__(self):
        freqs = tuple(float(w) for w in self.frequencies)
        if len(set(freqs)) != len(freqs):
            raise ValueError("every frequency must appear exactly once")
        if any(freqs[i] >= freqs[i + 1] for i in range(len(freqs) - 1)):
            raise ValueError("frequencies must be sorted ascending")
        if any(f <= 0 for f in freqs):
            raise ValueError("frequencies must be positive")
        r = np.linalg.norm(self.nodes, axis=1)
        if np.any(np.abs(r - self.radius) > 1e-12 * max(1.0, self.radius)):
            raise ValueError("surface nodes must lie on the recorded sphere radius")
        object.__setattr__(self, "frequencies", freqs)
        for a in (self.nodes, self.normals, self.weights, self.E_traces, self.H_traces):
            a.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.nodes)


@dataclass(frozen=True)
class AsymptoticCoefficients:
    """Leading expansion coefficients of the boundary traces in omega."""

    E1: np.ndarray
    E2: np.ndarray
    H0: np.ndarray
    H1: np.ndarray
    fit_residual: float
    residual_threshold: float = 1e-6

    @property
    def is_asymptotic(self):
        return self.fit_residual <= self.residual_threshold


@dataclass(frozen=True)
class MomentSet:
    """Harmonic moments of a compactly supported scalar density:
    integral of |y|^n conj(Y_n^m)(y/|y|) f(y) dy for n <= max_degree."""

    max_degree: int
    coefficients: np.ndarray   # flat over mode_index(max_degree)
    support_radius: float = 1.0

    def __post_init__(self):
        self.coefficients.setflags(write=False)

    def coefficient(self, n, m):
        idx = mode_index(self.max_degree).index((n, m))
        return self.coefficients[idx]


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    issues: tuple
    medium_class: str
    source_class: str
    notes: tuple = ()


def classify_source(source: SourceSpec, tol=1e-8):
    scale = source.max_norm()
    if scale == 0.0:
        return "zero"
    div_ok = np.max(np.abs(source.div_values)) <= tol * scale
    curl_ok = np.max(np.abs(source.curl_values)) <= tol * scale
    if div_ok and curl_ok:
        return "contradiction"
    if div_ok:
        return "div_free"
    if curl_ok:
        return "curl_free"
    return "general"


def validate_config(medium: MediumConfig, source: SourceSpec, tol=1e-8):
    """Check every structural invariant; reports, never raises.

    The compact-support check applies to the field values for exact-support
    sources and to the div/curl samples for tail-type catalog sources (whose
    values decay like a harmonic gradient beyond the density support).
    """
    issues = list(medium.validate())
    notes = []
    if source.support_radius >= medium.outer_radius:
        issues.append("support radius must be strictly less than the outer radius")
    r = np.linalg.norm(source.quad.nodes, axis=1)
    outside = r >= source.support_radius
    scale = source.max_norm()
    if scale > 0 and np.any(outside):
        if source.tail:
            if np.max(np.abs(source.div_values[outside])) > 1e-12 * scale:
                issues.append("divergence samples do not vanish outside the support radius")
            if np.max(np.abs(source.curl_values[outside])) > 1e-12 * scale:
                issues.append("curl samples do not vanish outside the support radius")
            tail_frac = float(np.max(np.abs(source.values[outside])) / scale)
            notes.append(f"tail source: field check relaxed, max tail fraction {tail_frac:.3e}")
        else:
            if np.max(np.abs(source.values[outside])) > 1e-12 * scale:
                issues.append("values do not vanish outside the support radius")
    observed = classify_source(source, tol)
    if observed == "contradiction":
        issues.append("source is simultaneously divergence-free and curl-free "
                      "but not identically zero; no such compactly supported current exists")
    if source.class_tag == "div_free" and scale > 0:
        if np.max(np.abs(source.div_values)) > tol * scale:
            issues.append("declared div_free but divergence samples exceed tolerance")
    if source.class_tag == "curl_free" and scale > 0:
        if np.max(np.abs(source.curl_values)) > tol * scale:
            issues.append("declared curl_free but curl samples exceed tolerance")
    medium_class = f"layered({medium.n_regions})"
    return ValidationReport(
        passed=not issues,
        issues=tuple(issues),
        medium_class=medium_class,
        source_class=observed if observed != "zero" else source.class_tag,
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# source catalog

def _solid_harmonic_field(coeffs, lmax, points, support_radius, mode="potential"):
    """Fields built from truncated solid-harmonic densities.

    For density rho = sum c_nm r^n Y_nm restricted to r <= a, returns the
    Newtonian potential g_n(r) Y_nm (mode="potential") or its gradient
    (mode="gradient"), both exact in closed form.
    """
    p = np.atleast_2d(points)
    rho = np.linalg.norm(p, axis=1)
    rho = np.maximum(rho, 1e-300)
    theta = np.arccos(np.clip(p[:, 2] / rho, -1, 1))
    phi = np.arctan2(p[:, 1], p[:, 0])
    Yt = sph_harm_table(lmax, theta, phi)
    Gt = tangential_gradient_table(lmax, theta, phi)
    rhat = p / rho[:, None]
    a = support_radius
    val = np.zeros(len(p), dtype=complex)
    grad = np.zeros((len(p), 3), dtype=complex)
    for i, (n, m) in enumerate(mode_index(lmax)):
        c = coeffs.get((n, m), 0.0)
        if c == 0.0:
            continue
        inside = rho < a
        g = np.where(inside,
                     (rho ** (n + 2) / (2 * n + 3) + rho**n * (a**2 - rho**2) / 2.0),
                     a ** (2 * n + 3) / (2 * n + 3) * rho ** (-(n + 1)))
        g = g / (2 * n + 1)
        gp = np.where(inside,
                      ((n + 2) * rho ** (n + 1) / (2 * n + 3)
                       + n * rho ** (n - 1) * (a**2 - rho**2) / 2.0 - rho ** (n + 1)),
                      -(n + 1) * a ** (2 * n + 3) / (2 * n + 3) * rho ** (-(n + 2)))
        gp = gp / (2 * n + 1)
        val += c * g * Yt[i]
        grad += c * ((gp * Yt[i])[:, None] * rhat + (g / rho)[:, None] * Gt[i])
    if mode == "potential":
        return val
    return grad


def _toroidal_field(coeffs, lmax, points):
    """C = -x cross grad(q) for q = sum c_nm r^n Y_nm; components are
    harmonic polynomials, div-free, and tangential to every sphere."""
    p = np.atleast_2d(points)
    rho = np.linalg.norm(p, axis=1)
    rho = np.maximum(rho, 1e-300)
    theta = np.arccos(np.clip(p[:, 2] / rho, -1, 1))
    phi = np.arctan2(p[:, 1], p[:, 0])
    Yt = sph_harm_table(lmax, theta, phi)
    Gt = tangential_gradient_table(lmax, theta, phi)
    rhat = p / rho[:, None]
    grad_q = np.zeros((len(p), 3), dtype=complex)
    for i, (n, m) in enumerate(mode_index(lmax)):
        c = coeffs.get((n, m), 0.0)
        if c == 0.0:
            continue
        grad_q += c * ((n * rho ** (n - 1) * Yt[i])[:, None] * rhat
                       + (rho ** (n - 1))[:, None] * Gt[i])
    return -np.cross(p, grad_q)


def make_source(kind, params, quad: VolumeQuadrature) -> SourceSpec:
    """Closed-form source catalog with analytic divergence and curl.

    Kinds
    -----
    divfree_bump : J = curl(0, 0, psi), psi = amp (1 - (r/a)^2)^2, exactly
        supported in r <= a.
    gradient_bump : J = grad(amp (1 - (r/a)^2)^3), curl-free, exactly
        supported; all harmonic moments of div J vanish.
    harmonic_divergence : J = -grad V[rho], rho a truncated solid-harmonic
        sum (params "coeffs": {(n, m): c}); curl-free with div J = rho,
        decaying tail outside the density support.
    toroidal_curl : J = curl V[C], C toroidal from q = sum c_nm r^n Y_nm;
        div-free with curl J = C restricted to r <= a (tail outside).
    mixture : params "parts": list of (kind, params, weight) summed.
    """
    x = quad.nodes
    r = np.linalg.norm(x, axis=1)
    if kind == "divfree_bump":
        a = params.get("support_radius", 0.8)
        amp = params.get("amplitude", 1.0)
        axis = np.asarray(params.get("axis", (0.0, 0.0, 1.0)), dtype=float)
        axis = axis / np.linalg.norm(axis)
        u = (r / a) ** 2
        inside = r < a
        # J = curl(psi e) = grad(psi) x e with psi = amp (1 - u)^2
        fp_over = np.where(inside, -4 * amp * (1 - u) / a**2, 0.0)   # psi'(r)/r
        J = np.cross(fp_over[:, None] * x, axis).astype(complex)
        # curl J = -(4 amp/a^2)(4u - 2) e + (8 amp (e.x)/a^4) x
        coef = np.where(inside, -4 * amp / a**2 * (4 * u - 2), 0.0)
        curl = coef[:, None] * axis[None, :]
        curl = curl + (np.where(inside, 8 * amp / a**4, 0.0) * (x @ axis))[:, None] * x
        return SourceSpec(quad=quad, values=J, div_values=np.zeros(len(x), complex),
                          curl_values=curl.astype(complex), support_radius=a,
                          class_tag="div_free", kind=kind, params=dict(params))
    if kind == "gradient_bump":
        a = params.get("support_radius", 0.8)
        amp = params.get("amplitude", 1.0)
        u = (r / a) ** 2
        inside = r < a
        J = (np.where(inside, -6 * amp * (1 - u) ** 2 / a**2, 0.0))[:, None] * x
        div = np.where(inside, -6 * amp / a**2 * (1 - u) * (3 - 7 * u), 0.0)
        return SourceSpec(quad=quad, values=J.astype(complex),
                          div_values=div.astype(complex),
                          curl_values=np.zeros((len(x), 3), complex),
                          support_radius=a, class_tag="curl_free",
                          kind=kind, params=dict(params))
    if kind == "harmonic_divergence":
        a = params.get("support_radius", 0.8)
        coeffs = {tuple(k) if not isinstance(k, tuple) else k: v
                  for k, v in params["coeffs"].items()}
        lmax = max(n for n, _ in coeffs)
        J = -_solid_harmonic_field(coeffs, lmax, x, a, mode="gradient")
        rho_vals = np.zeros(len(x), dtype=complex)
        theta = np.arccos(np.clip(x[:, 2] / np.maximum(r, 1e-300), -1, 1))
        phi = np.arctan2(x[:, 1], x[:, 0])
        Yt = sph_harm_table(lmax, theta, phi)
        for i, (n, m) in enumerate(mode_index(lmax)):
            c = coeffs.get((n, m), 0.0)
            if c:
                rho_vals += c * r**n * Yt[i] * (r < a)
        return SourceSpec(quad=quad, values=J, div_values=rho_vals,
                          curl_values=np.zeros((len(x), 3), complex),
                          support_radius=a, class_tag="curl_free",
                          kind=kind, params=dict(params), tail=True)
    if kind == "poloidal_bump":
        # J = curl(psi(r) C_q) with C_q toroidal from q = sum c r^n Y: exactly
        # supported, div-free, with poloidal content (nonzero radial E response)
        a = params.get("support_radius", 0.8)
        amp = params.get("amplitude", 1.0)
        coeffs = {tuple(k) if not isinstance(k, tuple) else k: v
                  for k, v in params["coeffs"].items()}
        lq = max(n for n, _ in coeffs)
        rr = np.maximum(r, 1e-300)
        u = (r / a) ** 2
        inside = r < a
        psi = np.where(inside, amp * (1 - u) ** 2, 0.0)
        dpsi = np.where(inside, -4 * amp * r * (1 - u) / a**2, 0.0)
        theta = np.arccos(np.clip(x[:, 2] / rr, -1, 1))
        phi = np.arctan2(x[:, 1], x[:, 0])
        Yt = sph_harm_table(lq, theta, phi)
        from .geometry import tangential_gradient_table as _tgt
        Gt = _tgt(lq, theta, phi)
        rhat = x / rr[:, None]
        J = np.zeros((len(x), 3), dtype=complex)
        curl = np.zeros((len(x), 3), dtype=complex)
        for i, (n, m) in enumerate(mode_index(lq)):
            c = coeffs.get((n, m), 0.0)
            if c == 0.0:
                continue
            grad_q = (n * rr ** (n - 1) * Yt[i])[:, None] * rhat \
                + (rr ** (n - 1))[:, None] * Gt[i]
            dr_q = n * rr ** (n - 1) * Yt[i]
            J += c * (dpsi[:, None] * (rr[:, None] * grad_q - x * dr_q[:, None])
                      + (n + 1) * psi[:, None] * grad_q)
            w_r = np.where(inside,
                           4 * amp / a**2 * rr**n * ((2 * n + 3) - (2 * n + 5) * u), 0.0)
            C_unit = -np.cross(x, grad_q)   # = r^n (rhat x grad_S Y)
            curl += c * (w_r / rr**n)[:, None] * C_unit
        return SourceSpec(quad=quad, values=J, div_values=np.zeros(len(x), complex),
                          curl_values=curl, support_radius=a, class_tag="div_free",
                          kind=kind, params=dict(params))
    if kind == "toroidal_curl":
        a = params.get("support_radius", 0.8)
        coeffs = {tuple(k) if not isinstance(k, tuple) else k: v
                  for k, v in params["coeffs"].items()}
        lq = max(n for n, _ in coeffs)
        C = _toroidal_field(coeffs, lq, x) * (r < a)[:, None]
        J = toroidal_curl_potential_field(coeffs, a, x)
        return SourceSpec(quad=quad, values=J, div_values=np.zeros(len(x), complex),
                          curl_values=C, support_radius=a, class_tag="div_free",
                          kind=kind, params=dict(params), tail=True)
    if kind == "mixture":
        parts = [make_source(k, p, quad) for k, p, _ in params["parts"]]
        weights = [wgt for _, _, wgt in params["parts"]]
        J = sum(w * s.values for w, s in zip(weights, parts))
        div = sum(w * s.div_values for w, s in zip(weights, parts))
        curl = sum(w * s.curl_values for w, s in zip(weights, parts))
        return SourceSpec(quad=quad, values=J, div_values=div, curl_values=curl,
                          support_radius=max(s.support_radius for s in parts),
                          class_tag="general", kind=kind, params=dict(params),
                          tail=any(s.tail for s in parts))
    raise ValueError(f"unknown source kind {kind!r}")


def toroidal_curl_potential_field(coeffs, a, points):
    """J = curl V[C chi_a] for toroidal C built from q = sum c_nm r^n Y_nm.

    Each Cartesian component of C is a harmonic polynomial; its truncated
    Newtonian potential has the closed per-mode form, so J is exact.
    """
    probe = make_sphere_quadrature(1.0, max(6, 2 * max(n for n, _ in coeffs) + 2))
    lq = max(n for n, _ in coeffs)
    C_probe = _toroidal_field(coeffs, lq, probe.nodes)
    p = np.atleast_2d(points)
    W_grad = []          # gradients of V[C_i chi_a]
    for comp in range(3):
        comp_coef = probe.analyze(C_probe[:, comp], lq)
        cdict = {}
        for i, (n, m) in enumerate(mode_index(lq)):
            # component of a degree-lq harmonic polynomial: coefficient of r^n Y_nm
            if abs(comp_coef[i]) > 1e-13:
                cdict[(n, m)] = comp_coef[i]
        if cdict:
            W_grad.append(_solid_harmonic_field(cdict, lq, p, a, mode="gradient"))
        else:
            W_grad.append(np.zeros((len(p), 3), dtype=complex))
    J = np.empty((len(p), 3), dtype=complex)
    J[:, 0] = W_grad[2][:, 1] - W_grad[1][:, 2]
    J[:, 1] = W_grad[0][:, 2] - W_grad[2][:, 0]
    J[:, 2] = W_grad[1][:, 0] - W_grad[0][:, 1]
    return J


def source_from_callable(fn, quad: VolumeQuadrature, support_radius,
                         class_tag="general", step=1e-4):
    """Raw source from a callable on points, with 4th-order finite-difference
    divergence and curl on an auxiliary stencil."""
    x = quad.nodes
    vals = np.asarray(fn(x), dtype=complex)
    jac = np.empty((len(x), 3, 3), dtype=complex)
    for c in range(3):
        e = np.zeros(3)
        e[c] = step
        fp1 = np.asarray(fn(x + e), dtype=complex)
        fm1 = np.asarray(fn(x - e), dtype=complex)
        fp2 = np.asarray(fn(x + 2 * e), dtype=complex)
        fm2 = np.asarray(fn(x - 2 * e), dtype=complex)
        jac[:, :, c] = (8 * (fp1 - fm1) - (fp2 - fm2)) / (12 * step)
    div = jac[:, 0, 0] + jac[:, 1, 1] + jac[:, 2, 2]
    curl = np.stack([jac[:, 2, 1] - jac[:, 1, 2],
                     jac[:, 0, 2] - jac[:, 2, 0],
                     jac[:, 1, 0] - jac[:, 0, 1]], axis=-1)
    return SourceSpec(quad=quad, values=vals, div_values=div, curl_values=curl,
                      support_radius=support_radius, class_tag=class_tag,
                      kind="callable")


# ---------------------------------------------------------------------------
# JSON config plumbing

def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def medium_from_config(cfg) -> MediumConfig:
    return MediumConfig.from_dict(cfg["medium"])


def source_from_config(cfg, quad) -> SourceSpec:
    src = cfg["source"]
    params = dict(src.get("params", {}))
    if "coeffs" in params:
        params["coeffs"] = {tuple(int(t) for t in k.split(",")): complex(v[0], v[1])
                            if isinstance(v, (list, tuple)) else v
                            for k, v in params["coeffs"].items()}
    return make_source(src["kind"], params, quad)


def frequencies_from_config(cfg):
    fr = cfg["frequencies"]
    start, count, ratio = fr["start"], fr["count"], fr.get("ratio", 0.5)
    return tuple(sorted(start * ratio**k for k in range(count)))


def discretization_from_config(cfg):
    d = cfg.get("discretization", {})
    return {
        "lmax": d.get("lmax", 6),
        "angular_order": d.get("angular_order", d.get("lmax", 6)),
        "radial_order": d.get("radial_order", 8),
    }

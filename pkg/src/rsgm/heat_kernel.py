"""Exact heat kernels for the ``(1/2) Laplacian`` heat flow on T^d and S^2.

Torus kernels are products of wrapped Gaussian theta series in each
coordinate; the sphere kernel is the Legendre expansion

    H(t, c) = sum_l (2l + 1) / (4 pi) * exp(-l (l + 1) t / 2) * P_l(c),

with ``c = <x, y>``. Every evaluation reports the number of series terms and
a certified bound on the truncated remainder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .manifold import Manifold, Sphere, TangentVec, Torus, _components_at

SPHERE_T_MIN = 1e-4


class KernelDomainError(ValueError):
    pass


@dataclass(frozen=True)
class KernelTolerance:
    abs_tol: float = 1e-10

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ValueError("abs_tol must be positive")


DEFAULT_TOL = KernelTolerance()


@dataclass(frozen=True)
class KernelEval:
    value: np.ndarray
    truncation_terms: int
    tail_bound: float


# ---------------------------------------------------------------------------
# wrapped Gaussian (circle of unit circumference)


def _image_tail(n_wrap: int, t: float) -> float:
    """Bound on the images with ``|n| > n_wrap`` when ``|delta| <= 1/2``."""
    a = n_wrap + 0.5
    phi = math.exp(-a * a / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)
    return 2.0 * (phi + 0.5 * float(erfc(a / math.sqrt(2.0 * t))))


def image_count(t: float, tol: float = DEFAULT_TOL.abs_tol, start: int | None = None) -> int:
    """Smallest ``N >= start`` with certified image tail below ``tol``."""
    n = int(math.ceil(1.0 + 6.0 * math.sqrt(t))) if start is None else int(start)
    while _image_tail(n, t) > tol:
        n += 1
    return n


def relative_image_count(t: float, rtol: float = 1e-14) -> int:
    """Images needed so dropped terms are below ``rtol`` times the kept ones at every offset.

    The nearest dropped image sits at ``N + 1/2`` while the nearest kept one is
    within ``1/2``, so the ratio is at most ``exp(-N (N + 1) / (2 t))``.
    """
    need = 2.0 * t * (math.log(1.0 / rtol) + math.log(4.0))
    n = 1
    while n * (n + 1) < need:
        n += 1
    return n


def _wrapped_terms(delta: np.ndarray, t: float, n_wrap: int):
    """Image offsets ``delta + n`` and Gaussian terms, images on the last axis."""
    n = np.arange(-n_wrap, n_wrap + 1, dtype=float)
    shifted = np.asarray(delta, dtype=float)[..., None] + n
    g = np.exp(-shifted**2 / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)
    return shifted, g


def _paired_sum(terms: np.ndarray, n_wrap: int) -> np.ndarray:
    """Sum over images adding ``n`` and ``-n`` first, so odd sums vanish exactly at 0."""
    centre = terms[..., n_wrap]
    if n_wrap == 0:
        return centre
    return centre + (terms[..., n_wrap + 1:] + terms[..., n_wrap - 1::-1]).sum(axis=-1)


def wrapped_normal_pdf(delta, t: float, tol: float = DEFAULT_TOL.abs_tol) -> KernelEval:
    """Wrapped Gaussian density of variance ``t`` at offset ``delta``."""
    if not t > 0:
        raise KernelDomainError(f"t must be positive, got {t}")
    delta = _wrap(delta)
    n_wrap = image_count(t, tol)
    _, g = _wrapped_terms(delta, t, n_wrap)
    return KernelEval(g.sum(axis=-1), 2 * n_wrap + 1, _image_tail(n_wrap, t))


def _wrap(delta):
    w = np.asarray(delta, dtype=float) - np.floor(delta)
    return np.where(w > 0.5, w - 1.0, w)


# Above this variance the Fourier (dual theta) series needs fewer terms.
_FOURIER_MIN_VAR = 0.1


def wrapped_log_density(delta, var: float, tol: float = 1e-13):
    """``log k(var; delta)`` and its derivative in ``delta``.

    Picks the image sum or the Fourier series depending on ``var``; both are
    truncated so the dropped remainder is below ``tol`` relative to the kept
    sum.
    """
    delta = _wrap(delta)
    if var < _FOURIER_MIN_VAR:
        n_wrap = relative_image_count(var, tol)
        shifted, _ = _wrapped_terms(delta, var, n_wrap)
        expo = -shifted**2 / (2.0 * var)
        m = expo.max(axis=-1, keepdims=True)
        w = np.exp(expo - m)
        s = w.sum(axis=-1)
        logk = np.log(s) + m[..., 0] - 0.5 * math.log(2.0 * math.pi * var)
        dlogk = -_paired_sum(shifted * w, n_wrap) / (var * s)
        return logk, dlogk
    # k = 1 + 2 sum_n q^(n^2) cos(2 pi n delta), q = exp(-2 pi^2 var)
    a = 2.0 * math.pi**2 * var
    n_terms = 1
    while 2.0 * math.exp(-a * (n_terms + 1) ** 2) / (1.0 - math.exp(-a)) > tol:
        n_terms += 1
    n = np.arange(1, n_terms + 1, dtype=float)
    q = np.exp(-a * n**2)
    ang = 2.0 * math.pi * delta[..., None] * n
    k = 1.0 + 2.0 * (q * np.cos(ang)).sum(axis=-1)
    dk = -4.0 * math.pi * (n * q * np.sin(ang)).sum(axis=-1)
    return np.log(k), dk / k


# ---------------------------------------------------------------------------
# torus


def hk_torus(t: float, x, y, tol: KernelTolerance = DEFAULT_TOL) -> KernelEval:
    """Heat kernel on T^d as a product of per-coordinate theta series."""
    if not t > 0:
        raise KernelDomainError(f"t must be positive, got {t}")
    delta = _wrap(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))
    d = delta.shape[-1]
    n_wrap = int(math.ceil(1.0 + 6.0 * math.sqrt(t)))
    # each coordinate factor is at most its peak plus the Gaussian integral
    k_max = 1.0 / math.sqrt(2.0 * math.pi * t) + 1.0
    while True:
        e = _image_tail(n_wrap, t)
        bound = (k_max + e) ** d - k_max**d
        if bound <= tol.abs_tol:
            break
        n_wrap += 1
    _, g = _wrapped_terms(delta, t, n_wrap)
    value = np.prod(g.sum(axis=-1), axis=-1)
    return KernelEval(value, 2 * n_wrap + 1, bound)


def _torus_grad_log(t, x, y, tol):
    delta = _wrap(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))
    n_wrap = max(relative_image_count(t), image_count(t, tol.abs_tol))
    shifted, g = _wrapped_terms(delta, t, n_wrap)
    return -_paired_sum(shifted * g, n_wrap) / (t * g.sum(axis=-1))


# ---------------------------------------------------------------------------
# sphere


def sphere_terms(t: float, tol: float = DEFAULT_TOL.abs_tol) -> tuple[int, float]:
    """Truncation degree ``L`` and certified tail for the S^2 series at time ``t``."""
    L = max(16, int(math.ceil(10.0 / math.sqrt(t))))
    while True:
        # summand decreasing past 1/sqrt(t); integral of (2x+1) exp(-x(x+1)t/2) from L
        tail = (2.0 / t) * math.exp(-L * (L + 1) * t / 2.0) / (4.0 * math.pi)
        if tail <= tol:
            return L, tail
        L += max(1, L // 8)


def _sphere_coeffs(t: float, L: int) -> np.ndarray:
    ell = np.arange(L + 1, dtype=float)
    return (2.0 * ell + 1.0) / (4.0 * math.pi) * np.exp(-ell * (ell + 1.0) * t / 2.0)


def legendre_clenshaw(coeffs: np.ndarray, c) -> np.ndarray:
    """``sum_l coeffs[l] P_l(c)`` by Clenshaw's recurrence."""
    c = np.asarray(c, dtype=float)
    b1 = np.zeros_like(c)
    b2 = np.zeros_like(c)
    for k in range(len(coeffs) - 1, 0, -1):
        # P_{k+1} = (2k+1)/(k+1) c P_k - k/(k+1) P_{k-1}
        alpha = (2.0 * k + 1.0) / (k + 1.0)
        beta = -(k + 1.0) / (k + 2.0)
        b1, b2 = coeffs[k] + alpha * c * b1 + beta * b2, b1
    return coeffs[0] + c * b1 - 0.5 * b2


def legendre_series_with_derivative(coeffs: np.ndarray, c):
    """Values of ``sum a_l P_l(c)`` and ``sum a_l P_l'(c)`` by forward recurrence."""
    c = np.asarray(c, dtype=float)
    p_prev, p = np.ones_like(c), c.copy()
    dp_prev, dp = np.zeros_like(c), np.ones_like(c)
    val = coeffs[0] * p_prev
    dval = np.zeros_like(c)
    if len(coeffs) > 1:
        val = val + coeffs[1] * p
        dval = dval + coeffs[1] * dp
    for ell in range(1, len(coeffs) - 1):
        p_next = ((2 * ell + 1) * c * p - ell * p_prev) / (ell + 1)
        dp_next = dp_prev + (2 * ell + 1) * p
        p_prev, p = p, p_next
        dp_prev, dp = dp, dp_next
        val = val + coeffs[ell + 1] * p
        dval = dval + coeffs[ell + 1] * dp
    return val, dval


def _check_sphere_time(t: float):
    if not t >= SPHERE_T_MIN:
        raise KernelDomainError(
            f"sphere kernel needs t >= {SPHERE_T_MIN:g}, got {t!r}; use pushforward_gaussian below that")


def hk_sphere(t: float, c, tol: KernelTolerance = DEFAULT_TOL) -> KernelEval:
    """Heat kernel on the unit 2-sphere as a function of ``c = <x, y>``."""
    _check_sphere_time(t)
    c = np.clip(np.asarray(c, dtype=float), -1.0, 1.0)
    L, tail = sphere_terms(t, tol.abs_tol)
    value = legendre_clenshaw(_sphere_coeffs(t, L), c)
    return KernelEval(value, L + 1, tail)


# image indices pair up as (n, -1 - n) so the kernel stays smooth at the antipode
_IMAGES = np.arange(-2, 2, dtype=float)


def _sphere_log_kernel_integral(t: float, theta: np.ndarray):
    """``log H`` and ``d log H / d theta`` from the integral representation

        H(t, theta) = sqrt(2) e^(t/8) (2 pi t)^(-3/2)
                      * int_theta^pi f(phi) / sqrt(cos theta - cos phi) dphi,
        f(phi) = sum_n (-1)^n (phi + 2 pi n) exp(-(phi + 2 pi n)^2 / (2 t)).

    Substituting ``sin(b/2) = sin(a/2) sin(w)`` with ``a = pi - theta`` and
    ``b = pi - phi`` removes the endpoint singularity. Everything is scaled by
    ``exp(theta^2 / (2 t))`` so tiny kernels do not underflow.
    """
    theta = np.asarray(theta, dtype=float)
    n_nodes = int(min(2000, max(48, math.ceil(3.0 / math.sqrt(t)))))
    w, wt = np.polynomial.legendre.leggauss(n_nodes)
    w = (w + 1.0) * (math.pi / 4.0)
    wt = wt * (math.pi / 4.0)
    a = (math.pi - theta)[..., None]
    sin_half_a = np.sin(a / 2.0)
    b = 2.0 * np.arcsin(np.clip(sin_half_a * np.sin(w), -1.0, 1.0))
    cos_half_b = np.cos(b / 2.0)
    phi = math.pi - b
    p = phi[..., None] + 2.0 * math.pi * _IMAGES
    sign = np.where(_IMAGES % 2 == 0, 1.0, -1.0)
    g = sign * np.exp(-(p**2 - theta[..., None, None] ** 2) / (2.0 * t))
    f = (p * g).sum(axis=-1)
    df = ((1.0 - p**2 / t) * g).sum(axis=-1)
    den = np.sum(wt * f / cos_half_b, axis=-1)
    db_da = np.cos(a / 2.0) * np.sin(w) / cos_half_b
    d_integrand = (-df / cos_half_b + f * np.sin(b / 2.0) / (2.0 * cos_half_b**2)) * db_da
    num = np.sum(wt * d_integrand, axis=-1)
    log_h = (t / 8.0 - 1.5 * math.log(2.0 * math.pi * t) + math.log(2.0)
             + np.log(den) - theta**2 / (2.0 * t))
    return log_h, -num / den


# below this fraction of H(t, 1) the series loses too many digits to cancellation
_SERIES_RELIABLE = 1e-6


def sphere_log_kernel_dc(t: float, c, tol: float = 1e-13):
    """``log H(t, c)`` and ``d/dc log H(t, c)`` on S^2.

    Uses the Legendre series where it is accurate and the integral
    representation in the far tail, where the series cancels catastrophically.
    """
    _check_sphere_time(t)
    c = np.clip(np.asarray(c, dtype=float), -1.0, 1.0)
    L, _ = sphere_terms(t, tol)
    coeffs = _sphere_coeffs(t, L)
    val, dval = legendre_series_with_derivative(coeffs, c)
    far = ~(val > _SERIES_RELIABLE * coeffs.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        log_h = np.log(val)
        dlog = dval / val
    if np.any(far):
        theta = np.arccos(c[far])
        lh, dth = _sphere_log_kernel_integral(t, theta)
        sin_theta = np.sin(theta)
        log_h = np.array(log_h, copy=True)
        dlog = np.array(dlog, copy=True)
        log_h[far] = lh
        dlog[far] = np.where(sin_theta > 0, -dth / np.where(sin_theta > 0, sin_theta, 1.0), 0.0)
    return log_h, dlog


def _require_s2(manifold: Manifold):
    if not (isinstance(manifold, Sphere) and manifold.dim == 2):
        raise NotImplementedError("sphere heat kernels are implemented on S^2 only")


def heat_kernel(manifold: Manifold, t: float, x, y, tol: KernelTolerance = DEFAULT_TOL) -> KernelEval:
    if isinstance(manifold, Torus):
        return hk_torus(t, x, y, tol)
    _require_s2(manifold)
    c = np.sum(np.asarray(x, dtype=float) * np.asarray(y, dtype=float), axis=-1)
    return hk_sphere(t, c, tol)


def hk_grad_log(manifold: Manifold, t: float, x, y, tol: KernelTolerance = DEFAULT_TOL) -> TangentVec:
    """Riemannian gradient in ``y`` of ``log H(t, x, y)``, as a tangent vector at ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not t > 0:
        raise KernelDomainError(f"t must be positive, got {t}")
    if isinstance(manifold, Torus):
        comps = _torus_grad_log(t, x, y, tol)
        return TangentVec(np.broadcast_to(y, comps.shape).copy(), comps)
    _require_s2(manifold)
    c = np.sum(x * y, axis=-1)
    _, dlog = sphere_log_kernel_dc(t, c)
    comps = dlog[..., None] * manifold.to_tangent(y, x)
    return TangentVec(np.broadcast_to(y, comps.shape).copy(), comps)


# ---------------------------------------------------------------------------
# parametrix


def pushforward_gaussian(manifold: Manifold, t: float, x, y, drift=None) -> np.ndarray:
    """Density (w.r.t. volume) of ``exp_x`` applied to ``N(drift * t, t I)`` in T_x M."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(manifold.distance(x, y) >= manifold.injectivity_radius):
        raise KernelDomainError("y is outside the injectivity radius of x")
    u = manifold.log_map(x, y)
    mean = 0.0 if drift is None else _components_at(x, drift) * t
    sq = np.sum((u.components - mean) ** 2, axis=-1)
    d = manifold.dim
    gauss = (2.0 * math.pi * t) ** (-d / 2.0) * np.exp(-sq / (2.0 * t))
    return gauss / manifold.jacobian_det(u.base, u)


def parametrix_deviation(t: float, n_rho: int = 201, exponent: float = 5.0 / 12.0) -> float:
    """``max |H / Phi - 1|`` on S^2 over ``rho <= t**exponent`` with zero drift."""
    rho = np.linspace(0.0, t**exponent, n_rho)
    x = np.array([0.0, 0.0, 1.0])
    y = np.stack([np.sin(rho), np.zeros_like(rho), np.cos(rho)], axis=-1)
    exact = hk_sphere(t, np.cos(rho)).value
    approx = pushforward_gaussian(Sphere(2), t, x, y)
    return float(np.max(np.abs(exact / approx - 1.0)))


# ---------------------------------------------------------------------------
# bound checks

LI_YAU_DELTA = 1.0
LI_YAU_ALPHA = 2.0


def ball_volume(manifold: Manifold, r: float) -> float:
    """Riemannian volume of a geodesic ball of radius ``r`` (NaN if not closed form)."""
    r = float(r)
    if isinstance(manifold, Sphere):
        _require_s2(manifold)
        return 2.0 * math.pi * (1.0 - math.cos(min(r, math.pi)))
    d = manifold.dim
    if d == 1:
        return min(2.0 * r, 1.0)
    if r <= 0.5:
        return math.pi ** (d / 2.0) * r**d / math.gamma(d / 2.0 + 1.0)
    if d == 2:
        if r >= math.sqrt(0.5):
            return 1.0
        a = 0.5
        segment = r * r * math.acos(a / r) - a * math.sqrt(r * r - a * a)
        return math.pi * r * r - 4.0 * segment
    return float("nan")


def harnack_lower_bound(d: int, K: float, t: float, rho) -> np.ndarray:
    """Harnack-type lower bound, evaluated for the ``(1/2) Laplacian`` flow at time ``t``."""
    s = t / 2.0
    rho = np.asarray(rho, dtype=float)
    return (4.0 * math.pi * s) ** (-d / 2.0) * np.exp(
        -rho**2 / (4.0 * s) * (1.0 + K * s / 3.0) - d * K * s / 4.0)


def li_yau_upper_bound(manifold: Manifold, t: float, rho) -> np.ndarray:
    """Gaussian upper bound with the free constants fixed to ``delta=1, alpha=2``."""
    s = t / 2.0
    d, K = manifold.dim, manifold.curvature_bound
    dl, al = LI_YAU_DELTA, LI_YAU_ALPHA
    C = (1.0 + dl) ** (d * al) * math.exp((1.0 + al) / dl)
    C1 = al * d / (al - 1.0)
    V = ball_volume(manifold, math.sqrt(s))
    rho = np.asarray(rho, dtype=float)
    return C / V * np.exp(-rho**2 / ((4.0 + dl) * s) + C1 * dl * K * s)


@dataclass
class BoundReport:
    rows: list = field(default_factory=list)
    li_yau_constants: dict = field(default_factory=lambda: {"delta_sch": LI_YAU_DELTA, "alpha": LI_YAU_ALPHA})

    @property
    def violations(self) -> list:
        return [r for r in self.rows if not r["ok"]]

    @property
    def lower_violations(self) -> list:
        return [r for r in self.rows if not r["kernel"] >= r["lower_bound"]]


def _kernel_relative(manifold: Manifold, t: float, x, y) -> float:
    """Kernel value accurate to a relative tolerance, also deep in the tail."""
    if isinstance(manifold, Torus):
        return float(hk_torus(t, x, y).value)
    _require_s2(manifold)
    log_h, _ = sphere_log_kernel_dc(t, float(np.dot(x, y)))
    return float(np.exp(log_h))


def check_kernel_bounds(manifold: Manifold, t_grid, pair_samples, paired: bool = False,
                        scale: float = 1.0) -> BoundReport:
    """Compare exact kernels against the Harnack lower and Li-Yau upper bounds.

    Rows cover every ``(t, pair)`` combination, or zip the two sequences when
    ``paired`` is set. ``scale`` multiplies the kernel (fault-injection hook).
    Violations are reported, never raised.
    """
    t_grid = [float(t) for t in t_grid]
    pairs = [(np.asarray(x, dtype=float), np.asarray(y, dtype=float)) for x, y in pair_samples]
    if paired:
        if len(t_grid) != len(pairs):
            raise ValueError("paired check needs as many times as pairs")
        combos = list(zip(t_grid, pairs))
    else:
        combos = [(t, p) for t in t_grid for p in pairs]
    report = BoundReport()
    d, K = manifold.dim, manifold.curvature_bound
    for t, (x, y) in combos:
        rho = float(manifold.distance(x, y))
        kernel = scale * _kernel_relative(manifold, t, x, y)
        lower = float(harnack_lower_bound(d, K, t, rho))
        upper = float(li_yau_upper_bound(manifold, t, rho))
        ok = kernel >= lower and (math.isnan(upper) or kernel <= upper)
        report.rows.append({"t": t, "rho_or_delta": rho, "kernel": kernel,
                            "lower_bound": lower, "upper_bound": upper, "ok": ok})
    return report


# ---------------------------------------------------------------------------
# quadrature checks


def normalization_residual(manifold: Manifold, t: float, x=None, scale: float = 1.0,
                           grid: int = 2048) -> float:
    """``|int H(t, x, .) dmu - 1|`` by periodic Riemann sums (torus) or Gauss-Legendre (S^2)."""
    if isinstance(manifold, Torus):
        d = manifold.dim
        if d > 2:
            raise ValueError("normalization grid check supports d <= 2")
        x = np.zeros(d) if x is None else np.asarray(x, dtype=float)
        axes = [np.arange(grid) / grid] * d
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        total = 0.0
        for start in range(0, len(pts), 1 << 16):
            total += hk_torus(t, x, pts[start:start + (1 << 16)]).value.sum()
        return abs(scale * total / grid**d - 1.0)
    _require_s2(manifold)
    L, _ = sphere_terms(t)
    nodes, weights = np.polynomial.legendre.leggauss(L + 2)
    total = scale * 2.0 * math.pi * np.dot(weights, hk_sphere(t, nodes).value)
    return abs(total - 1.0)


def semigroup_residual(manifold: Manifold, s: float, t: float, x, y, grid: int = 2048) -> float:
    """``|int H(s,x,z) H(t,z,y) dmu(z) - H(s+t,x,y)|``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(manifold, Torus):
        if manifold.dim != 1:
            raise ValueError("semigroup grid check supports d = 1")
        z = (np.arange(grid) / grid)[:, None]
        integral = np.sum(hk_torus(s, x, z).value * hk_torus(t, z, y).value) / grid
        return abs(integral - float(hk_torus(s + t, x, y).value))
    _require_s2(manifold)
    Ls, _ = sphere_terms(s)
    Lt, _ = sphere_terms(t)
    deg = Ls + Lt
    nodes, weights = np.polynomial.legendre.leggauss(deg // 2 + 2)
    n_phi = deg + 2
    phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
    # coordinates with x at the pole and y in the x-z half plane
    a = float(np.clip(np.dot(x, y), -1.0, 1.0))
    sa = math.sqrt(max(0.0, 1.0 - a * a))
    ct = nodes[:, None]
    st = np.sqrt(1.0 - ct**2)
    c_zy = ct * a + st * sa * np.cos(phi)[None, :]
    integrand = hk_sphere(s, ct).value * hk_sphere(t, c_zy).value
    integral = np.sum(weights[:, None] * integrand) * (2.0 * math.pi / n_phi)
    return abs(integral - float(hk_sphere(s + t, a).value))

"""Surface energy densities, the alpha-surface-energy matrix and the minimal
stabilizing function.

Angles are inclination angles of the tangent, tau = (cos t, sin t) and
n(t) = (-sin t, cos t). Every evaluator is vectorised over numpy arrays.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import numpy as np
import pandas as pd
from scipy import optimize

from core.errors import (
    DensityParameterError,
    NonexistentStabilizer,
    StabilizerTableError,
    UnknownDensityError,
)

logger = logging.getLogger(__name__)

TABLE_NODES = np.array([-np.pi + j * np.pi / 10 for j in range(21)])
PHI_GRID_POINTS = 8192
SIN_EXCLUSION = 1e-6
REFINE_CLEARANCE = 1e-4
KMIN_TOLERANCE = 1e-10
DDG_GRID_POINTS = 4096

_FAMILY_ALIASES = {
    "iso": "isotropic",
    "isotropic": "isotropic",
    "mfold": "m-fold",
    "m-fold": "m-fold",
    "case2": "caseII",
    "caseii": "caseII",
    "l4": "l4norm",
    "l4norm": "l4norm",
    "fourier": "fourier",
}


def wrap_angle(theta):
    """Map angles into (-pi, pi]"""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2 * np.pi)


def tangent(theta):
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def normal(theta):
    theta = np.asarray(theta, dtype=float)
    return np.stack([-np.sin(theta), np.cos(theta)], axis=-1)


class AnisotropyDensity:
    """A 2pi-periodic positive surface energy density with its first two
    derivatives.

    Args:
        name: Human-readable name
        evaluator: Callable mapping an angle array to (g, g', g'')
        smooth: True for C2 families
        discontinuities: Angles where g'' (or g') jumps, for piecewise-C2
            families; values there are left limits
        spec: Spec string that rebuilds this density, if it has one
    """

    def __init__(self, name, evaluator, smooth=True, discontinuities=(), spec=None):
        self.name = name
        self._evaluator = evaluator
        self.smooth = smooth
        self.discontinuities = tuple(discontinuities)
        self.spec = spec

    def evaluate(self, theta):
        theta = np.asarray(theta, dtype=float)
        g, dg, ddg = self._evaluator(theta)
        shape = theta.shape
        return (
            np.broadcast_to(g, shape).astype(float),
            np.broadcast_to(dg, shape).astype(float),
            np.broadcast_to(ddg, shape).astype(float),
        )

    def gamma(self, theta):
        return self.evaluate(theta)[0]

    def __call__(self, theta):
        return self.gamma(theta)

    def to_spec(self):
        if self.spec is None:
            raise DensityParameterError(f"Density {self.name!r} has no spec string")
        return self.spec

    @classmethod
    def from_spec(cls, text):
        """Parse `iso`, `mfold:m=3,beta=1/9,phase=0`, `case2`, `l4` or
        `fourier:a0=1,a3=0.1,...`"""
        family, _, arg_text = text.strip().partition(":")
        args = {}
        for item in filter(None, (part.strip() for part in arg_text.split(","))):
            key, sep, value = item.partition("=")
            if not sep:
                raise DensityParameterError(f"Malformed density argument {item!r} in {text!r}")
            args[key.strip().lower()] = _parse_real(value)

        canonical = _FAMILY_ALIASES.get(family.strip().lower())
        if canonical is None:
            raise UnknownDensityError(family)
        if canonical == "m-fold":
            unknown = set(args) - {"m", "beta", "phase"}
            if unknown:
                raise DensityParameterError(f"Unknown m-fold arguments {sorted(unknown)}")
            params = [args.get("beta", 0.0), args.get("m", 4), args.get("phase", 0.0)]
        elif canonical == "fourier":
            params = _fourier_params(args)
        else:
            if args:
                raise DensityParameterError(f"Density {canonical} takes no arguments")
            params = []
        return builtin_density(canonical, params)

    def __repr__(self):
        return f"AnisotropyDensity({self.spec or self.name})"


def _parse_real(text):
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        try:
            return float(Fraction(text))
        except (ValueError, ZeroDivisionError):
            raise DensityParameterError(f"Not a real number: {text!r}") from None


def _fourier_params(args):
    """Flatten {a0, a1, b1, a2, ...} into [a0, a1, b1, a2, b2, ...]"""
    order = 0
    for key in args:
        if len(key) < 2 or key[0] not in "ab" or not key[1:].isdigit():
            raise DensityParameterError(f"Unknown fourier coefficient {key!r}")
        order = max(order, int(key[1:]))
    if "b0" in args:
        raise DensityParameterError("fourier has no b0 coefficient")
    params = [args.get("a0", 1.0)]
    for k in range(1, order + 1):
        params.extend([args.get(f"a{k}", 0.0), args.get(f"b{k}", 0.0)])
    return params


def _isotropic(theta):
    return np.ones_like(theta), np.zeros_like(theta), np.zeros_like(theta)


def _m_fold(beta, m, phase):
    def evaluate(theta):
        arg = m * (theta + phase)
        return (
            1.0 + beta * np.cos(arg),
            -beta * m * np.sin(arg),
            -beta * m * m * np.cos(arg),
        )

    return evaluate


def _case_two(theta):
    # weight 4 where n1 = -sin(theta) > 0, weight 1 where n1 < 0; left limits at the jumps
    w = np.where(wrap_angle(theta) > 0.0, 1.0, 4.0)
    s = np.sin(theta)
    g2 = 1.0 + (w - 1.0) * s * s
    g = np.sqrt(g2)
    dg2 = (w - 1.0) * np.sin(2 * theta)
    ddg2 = 2.0 * (w - 1.0) * np.cos(2 * theta)
    return g, dg2 / (2 * g), ddg2 / (2 * g) - dg2 * dg2 / (4 * g**3)


def _l4_norm(theta):
    # n1^4 + n2^4 = (3 + cos 4t) / 4
    q = (3.0 + np.cos(4 * theta)) / 4.0
    dq = -np.sin(4 * theta)
    ddq = -4.0 * np.cos(4 * theta)
    g = q**0.25
    dg = 0.25 * q**-0.75 * dq
    ddg = 0.25 * (q**-0.75 * ddq - 0.75 * q**-1.75 * dq * dq)
    return g, dg, ddg


def _fourier(coefficients):
    a0 = coefficients[0]
    pairs = [
        (k + 1, coefficients[1 + 2 * k], coefficients[2 + 2 * k])
        for k in range((len(coefficients) - 1) // 2)
    ]

    def evaluate(theta):
        g = np.full_like(theta, a0)
        dg = np.zeros_like(theta)
        ddg = np.zeros_like(theta)
        for k, a, b in pairs:
            c, s = np.cos(k * theta), np.sin(k * theta)
            g = g + a * c + b * s
            dg = dg + k * (b * c - a * s)
            ddg = ddg - k * k * (a * c + b * s)
        return g, dg, ddg

    return evaluate


def builtin_density(name, params=()):
    """Build one of the closed-form density families.

    Args:
        name: isotropic | m-fold | caseII | l4norm | fourier (or their
            short spec names)
        params: [beta, m, phase] for m-fold; [a0, a1, b1, a2, b2, ...] for
            fourier; empty otherwise

    Returns:
        AnisotropyDensity with exact analytic derivatives
    """
    family = _FAMILY_ALIASES.get(str(name).strip().lower())
    if family is None:
        raise UnknownDensityError(name)
    params = [float(p) for p in params]

    if family == "isotropic":
        return AnisotropyDensity("isotropic", _isotropic, spec="iso")

    if family == "m-fold":
        if len(params) not in (1, 2, 3):
            raise DensityParameterError("m-fold expects [beta, m, phase]")
        beta = params[0]
        m = params[1] if len(params) > 1 else 4.0
        phase = params[2] if len(params) > 2 else 0.0
        if abs(beta) >= 1.0:
            raise DensityParameterError(f"m-fold density needs |beta| < 1, got {beta}")
        if m != int(m) or m < 1:
            raise DensityParameterError(f"m-fold symmetry must be a positive integer, got {m}")
        m = int(m)
        return AnisotropyDensity(
            f"1 + {beta:g} cos {m}(theta + {phase:g})",
            _m_fold(beta, m, phase),
            spec=f"mfold:m={m},beta={beta!r},phase={phase!r}",
        )

    if family == "caseII":
        return AnisotropyDensity(
            "sqrt((5/2 + 3/2 sgn n1) n1^2 + n2^2)",
            _case_two,
            smooth=False,
            discontinuities=(0.0, np.pi),
            spec="case2",
        )

    if family == "l4norm":
        return AnisotropyDensity("(n1^4 + n2^4)^(1/4)", _l4_norm, spec="l4")

    if not params or len(params) % 2 == 0:
        raise DensityParameterError("fourier expects [a0, a1, b1, ..., aK, bK]")
    evaluator = _fourier(params)
    grid = np.linspace(-np.pi, np.pi, DDG_GRID_POINTS, endpoint=False)
    if np.min(evaluator(grid)[0]) <= 0.0:
        raise DensityParameterError("fourier density is not positive on the circle")
    terms = [f"a0={params[0]!r}"]
    for k in range((len(params) - 1) // 2):
        a, b = params[1 + 2 * k], params[2 + 2 * k]
        if a:
            terms.append(f"a{k + 1}={a!r}")
        if b:
            terms.append(f"b{k + 1}={b!r}")
    return AnisotropyDensity("fourier series", evaluator, spec="fourier:" + ",".join(terms))


def xi_vector(density, theta):
    """Cahn-Hoffman vector xi = g n - g' tau, shape (..., 2)"""
    g, dg, _ = density.evaluate(theta)
    return g[..., None] * normal(theta) - dg[..., None] * tangent(theta)


class ConstantStabilizer:
    def __init__(self, value):
        self.value = float(value)

    def __call__(self, theta):
        return np.full(np.shape(theta), self.value)

    def to_dict(self):
        return {"mode": "constant", "value": self.value}


class StabilizerTable:
    """Stabilizer sampled at theta_j = -pi + j pi/10, j = 0..20, read back by
    periodic piecewise-linear interpolation."""

    def __init__(self, values, alpha=None, density_spec=None):
        values = np.asarray(values, dtype=float)
        if values.shape != TABLE_NODES.shape:
            raise StabilizerTableError(
                f"Stabilizer table needs {TABLE_NODES.size} values, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise StabilizerTableError("Stabilizer table has non-finite values")
        if abs(values[0] - values[-1]) > 1e-12 * max(1.0, abs(values[0])):
            raise StabilizerTableError(
                f"Stabilizer table is not periodic: {values[0]!r} != {values[-1]!r}"
            )
        self.nodes = TABLE_NODES.copy()
        self.values = values
        self.alpha = alpha
        self.density_spec = density_spec

    def __call__(self, theta):
        t = np.mod(np.asarray(theta, dtype=float) + np.pi, 2 * np.pi) - np.pi
        return np.interp(t, self.nodes, self.values)

    def to_frame(self):
        return pd.DataFrame({"theta": self.nodes, "value": self.values})

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, alpha=None):
        frame = pd.read_csv(path, float_precision="round_trip")
        if list(frame.columns) != ["theta", "value"]:
            raise StabilizerTableError(f"{path}: expected header 'theta,value'")
        if len(frame) != TABLE_NODES.size or not np.allclose(
            frame["theta"].to_numpy(), TABLE_NODES, atol=1e-9
        ):
            raise StabilizerTableError(f"{path}: expected the 21 nodes -pi + j pi/10")
        return cls(frame["value"].to_numpy(), alpha=alpha)

    def to_dict(self):
        return {
            "mode": "table",
            "alpha": self.alpha,
            "density": self.density_spec,
            "theta": self.nodes.tolist(),
            "value": self.values.tolist(),
        }


class EnergyMatrixParams:
    """Hyperparameter alpha with the stabilizer k(theta).

    When the minimal table is known the stabilizer is compared against it at
    the table nodes; a stabilizer below it is kept (instability studies) but
    flagged and logged.
    """

    def __init__(self, alpha, stabilizer, k_min=None):
        self.alpha = float(alpha)
        if isinstance(stabilizer, (int, float)):
            stabilizer = ConstantStabilizer(stabilizer)
        self.stabilizer = stabilizer
        self.k_min = k_min
        self.below_minimal = False
        self.worst_shortfall = 0.0

        if k_min is not None:
            shortfall = k_min(TABLE_NODES) - stabilizer(TABLE_NODES)
            self.worst_shortfall = float(np.max(shortfall))
            if self.worst_shortfall > KMIN_TOLERANCE:
                self.below_minimal = True
                worst = TABLE_NODES[int(np.argmax(shortfall))]
                logger.warning(
                    "Stabilizer is below k_min by %.3e at theta=%.4f; "
                    "energy decay is not guaranteed",
                    self.worst_shortfall,
                    worst,
                )

    @classmethod
    def minimal(cls, density, alpha, **kwargs):
        table = k_min_table(density, alpha, **kwargs)
        return cls(alpha, table, k_min=table)

    def k(self, theta):
        return self.stabilizer(theta)

    def to_dict(self):
        data = {"alpha": self.alpha, "stabilizer": self.stabilizer.to_dict()}
        if self.k_min is not None and self.k_min is not self.stabilizer:
            data["k_min"] = self.k_min.to_dict()
        data["below_minimal"] = self.below_minimal
        return data


def energy_matrix(density, theta, params, form="compact"):
    """The alpha-surface-energy matrix G_k^alpha(theta), shape (..., 2, 2).

    `form="xi"` builds g I - n xi^T + alpha xi n^T + k n n^T literally;
    `form="compact"` uses g I + g'(n tau^T - alpha tau n^T) + (k + (alpha-1) g) n n^T.
    """
    theta = np.asarray(theta, dtype=float)
    g, dg, _ = density.evaluate(theta)
    k = np.asarray(params.k(theta), dtype=float)
    alpha = params.alpha
    n = normal(theta)
    t = tangent(theta)
    eye = np.broadcast_to(np.eye(2), theta.shape + (2, 2))
    nn = n[..., :, None] * n[..., None, :]

    if form == "xi":
        xi = xi_vector(density, theta)
        return (
            g[..., None, None] * eye
            - n[..., :, None] * xi[..., None, :]
            + alpha * xi[..., :, None] * n[..., None, :]
            + k[..., None, None] * nn
        )

    skew = n[..., :, None] * t[..., None, :] - alpha * t[..., :, None] * n[..., None, :]
    return (
        g[..., None, None] * eye
        + dg[..., None, None] * skew
        + (k + (alpha - 1.0) * g)[..., None, None] * nn
    )


def aux_P(density, phi, theta, alpha, a):
    g, dg, _ = density.evaluate(theta)
    phi = np.asarray(phi, dtype=float)
    return g + 0.5 * (alpha - 1.0) * dg * np.sin(2 * phi) + a * np.sin(phi) ** 2


def aux_Q(density, phi, theta, alpha):
    g, dg, _ = density.evaluate(theta)
    phi = np.asarray(phi, dtype=float)
    return density.gamma(np.asarray(theta) - phi) + g * np.cos(phi) + alpha * dg * np.sin(phi)


def _bounded_minimum(func, lo, hi):
    result = optimize.minimize_scalar(
        func, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12}
    )
    return float(result.x), float(result.fun)


def margin_search(density, grid_n=3600):
    """Return (c, theta*) with c = inf 3g(theta) - g(theta - pi)"""
    if grid_n < 360:
        raise ValueError(f"grid_n must be at least 360, got {grid_n}")
    step = 2 * np.pi / grid_n
    grid = -np.pi + step * np.arange(grid_n)

    def margin(theta):
        return 3.0 * density.gamma(theta) - density.gamma(np.asarray(theta) - np.pi)

    values = margin(grid)
    i = int(np.argmin(values))
    best_theta, best = float(grid[i]), float(values[i])
    theta_r, value_r = _bounded_minimum(
        lambda t: float(margin(t)), best_theta - step, best_theta + step
    )
    if value_r < best:
        best_theta, best = theta_r, value_r
    return best, float(wrap_angle(best_theta))


def stability_margin(density, grid_n=3600):
    return margin_search(density, grid_n)[0]


def _k0_search(density, theta, alpha, n_phi=PHI_GRID_POINTS):
    """Return (k0, reason); reason is None unless k0 is infinite"""
    theta = float(theta)
    g, dg, ddg = (float(v) for v in density.evaluate(theta))
    gm, dgm, ddgm = (float(v) for v in density.evaluate(theta - np.pi))
    scale = g * g

    # phi -> pi: the constraint reduces to 4 g^2 >= Q(pi)^2
    q_pi = gm - g
    n_pi = q_pi * q_pi - 4.0 * g * g
    if n_pi > 1e-12 * scale:
        return math.inf, "3*gamma(theta) < gamma(theta - pi)"

    candidates = []
    # removable singularity at phi -> 0
    candidates.append((alpha - 1.0) ** 2 * dg * dg / (4.0 * g) + 0.5 * (ddg - g))
    if n_pi > -1e-12 * scale:
        dq_pi = -dgm - alpha * dg
        dn_pi = 2.0 * q_pi * dq_pi - 4.0 * g * (alpha - 1.0) * dg
        if abs(dn_pi) > 1e-9 * scale:
            return math.inf, "3*gamma(theta) = gamma(theta - pi) with (alpha + 1) gamma'(theta) != 0"
        candidates.append((2.0 * dq_pi * dq_pi + 2.0 * q_pi * (ddgm + g)) / (8.0 * g))

    def ratio(phi):
        numerator = aux_Q(density, phi, theta, alpha) ** 2 - 4.0 * g * aux_P(
            density, phi, theta, alpha, 0.0
        )
        return numerator / (4.0 * g * np.sin(phi) ** 2)

    step = 2 * np.pi / n_phi
    phi = step * np.arange(n_phi)
    phi = phi[np.abs(np.sin(phi)) >= SIN_EXCLUSION]
    values = ratio(phi)
    i = int(np.argmax(values))
    candidates.append(float(values[i]))

    lo, hi = phi[i] - step, phi[i] + step
    boundary = np.pi * round(phi[i] / np.pi)
    if phi[i] > boundary:
        lo = max(lo, boundary + REFINE_CLEARANCE)
    else:
        hi = min(hi, boundary - REFINE_CLEARANCE)
    if lo < hi:
        _, neg = _bounded_minimum(lambda p: -float(ratio(p)), lo, hi)
        candidates.append(-neg)

    return max(0.0, max(candidates)), None


def k0_at(density, theta, alpha, n_phi=PHI_GRID_POINTS):
    """k_0^alpha(theta) = inf{a >= 0 | 4 g P_a >= Q^2 for all phi}; math.inf when
    no finite a exists"""
    return _k0_search(density, theta, alpha, n_phi)[0]


def k_min_table(density, alpha, n_phi=PHI_GRID_POINTS, workers=None):
    """Minimal stabilizer k_min = k_0 - (alpha - 1) g sampled on the 21 table nodes"""
    nodes = TABLE_NODES[:-1]

    def node_value(theta):
        return _k0_search(density, theta, alpha, n_phi)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(node_value, nodes))
    else:
        results = [node_value(theta) for theta in nodes]

    for theta, (value, reason) in zip(nodes, results):
        if math.isinf(value):
            raise NonexistentStabilizer(float(theta), reason)

    k0 = np.array([value for value, _ in results])
    values = k0 - (alpha - 1.0) * density.gamma(nodes)
    values = np.append(values, values[0])
    logger.debug("k_min table for %s, alpha=%g: %s", density, alpha, values)
    return StabilizerTable(values, alpha=alpha, density_spec=density.spec)


def k0_upper_bound(density, theta, alpha, c, sup_ddg=None):
    """Global upper bound of k_0 valid when the stability margin c is positive"""
    if c <= 0:
        raise DensityParameterError(f"The k_0 upper bound needs c > 0, got {c}")
    if sup_ddg is None:
        grid = np.linspace(-np.pi, np.pi, DDG_GRID_POINTS, endpoint=False)
        sup_ddg = float(np.max(np.abs(density.evaluate(grid)[2])))
    g, dg, _ = (float(v) for v in density.evaluate(theta))
    c_alpha = max(5.0, 4.0 / np.pi**2 * (2 * abs(alpha) + 1) ** 2)
    b = 2.0 / c * (alpha + 1) ** 2 * dg * dg
    a = np.pi**2 / 8 * (c_alpha * sup_ddg + (3 * abs(alpha) + 2) * abs(dg) + g + b)
    return (a * a + 4 * g * a + (alpha - 1) ** 2 * dg * dg) / (4 * g)


def local_energy_gap(density, params, p, q):
    """(1/|q|)(G(theta) p).(p - q) - (g(phi)|p| - g(theta)|q|) for vector pairs,
    theta and phi being the directions of q and p; nonnegative when k >= k_min"""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    theta = np.arctan2(q[..., 1], q[..., 0])
    phi = np.arctan2(p[..., 1], p[..., 0])
    mat = energy_matrix(density, theta, params)
    gp = np.einsum("...ij,...j->...i", mat, p)
    q_len = np.linalg.norm(q, axis=-1)
    p_len = np.linalg.norm(p, axis=-1)
    lhs = np.einsum("...i,...i->...", gp, p - q) / q_len
    return lhs - (density.gamma(phi) * p_len - density.gamma(theta) * q_len)

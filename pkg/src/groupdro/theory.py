"""Numerical checks of the convex-case theory of online group DRO.

Convex problems here are finite mixtures of quadratics on a box: group ``g``
has scale ``a_g`` and support points ``z``, with per-example loss
``a_g * |theta - z|^2``. Group risks, gradients and the certified constants
(parameter radius, gradient bound, loss bound) are all closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from groupdro.errors import InvalidArgument

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class BoundInputs:
    m: int
    B_theta: float
    B_grad: float
    B_loss: float
    T: int

    def __post_init__(self):
        if self.m < 1 or self.T < 1:
            raise InvalidArgument("m and T must be positive")
        if min(self.B_theta, self.B_grad, self.B_loss) <= 0:
            raise InvalidArgument("bounds must be positive")


def convergence_bound(inputs: BoundInputs) -> float:
    """Expected excess worst-case risk bound of the average iterate after T steps."""
    b = inputs
    inner = 10.0 * (b.B_theta ** 2 * b.B_grad ** 2 + b.B_loss ** 2 * math.log(b.m)) / b.T
    return 2.0 * b.m * math.sqrt(inner)


@dataclass(frozen=True)
class QuadraticGroup:
    scale: float
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if self.scale <= 0:
            raise InvalidArgument("scale must be positive")
        object.__setattr__(self, "points", pts)

    @property
    def center(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def spread(self) -> float:
        return float(np.mean(np.sum((self.points - self.center) ** 2, axis=1)))


@dataclass(frozen=True)
class ConvexProblem:
    """Group risks ``a_g (|theta - c_g|^2 + v_g)`` over ``[-radius, radius]^d``."""

    groups: tuple
    radius: float
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.groups:
            raise InvalidArgument("need at least one group")
        dims = {grp.points.shape[1] for grp in self.groups}
        if len(dims) != 1:
            raise InvalidArgument("groups disagree on dimension")
        if self.radius <= 0:
            raise InvalidArgument("radius must be positive")

    @classmethod
    def quadratics(cls, centers, scales=None, radius=2.0, name=""):
        """Noise-free groups: one support point per group."""
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64).T).T
        scales = np.ones(len(centers)) if scales is None else scales
        return cls(tuple(QuadraticGroup(float(a), c[None, :]) for a, c in zip(scales, centers)), radius, name)

    @property
    def m(self) -> int:
        return len(self.groups)

    @property
    def d(self) -> int:
        return self.groups[0].points.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.array([grp.scale for grp in self.groups])

    @property
    def centers(self) -> np.ndarray:
        return np.array([grp.center for grp in self.groups])

    @property
    def spreads(self) -> np.ndarray:
        return np.array([grp.spread for grp in self.groups])

    def group_risks(self, theta) -> np.ndarray:
        """Shape ``(..., m)`` risks for ``theta`` of shape ``(..., d)``."""
        theta = np.asarray(theta, dtype=np.float64)
        diff = theta[..., None, :] - self.centers
        return self.scales * (np.sum(diff ** 2, axis=-1) + self.spreads)

    def group_gradients(self, theta) -> np.ndarray:
        """Shape ``(m, d)`` gradients at a single ``theta``."""
        theta = np.asarray(theta, dtype=np.float64).reshape(self.d)
        return 2.0 * self.scales[:, None] * (theta - self.centers)

    def worst_risk(self, theta) -> np.ndarray:
        return self.group_risks(theta).max(axis=-1)

    def project(self, theta):
        return np.clip(theta, -self.radius, self.radius)

    def bound_inputs(self, T: int) -> BoundInputs:
        """Certified constants: the farthest box corner from any support point."""
        far = [np.sum((self.radius + np.abs(grp.points)) ** 2, axis=1).max() for grp in self.groups]
        B_loss = max(a * f for a, f in zip(self.scales, far))
        B_grad = max(2.0 * a * math.sqrt(f) for a, f in zip(self.scales, far))
        return BoundInputs(self.m, self.radius * math.sqrt(self.d), B_grad, B_loss, T)


def golden_section(f, lo: float, hi: float, xtol: float):
    """Minimize a unimodal scalar function on ``[lo, hi]``; returns ``(x, f(x))``."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    e = a + GOLDEN * (b - a)
    fc, fe = f(c), f(e)
    while b - a > xtol:
        if fc <= fe:
            b, e, fe = e, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + GOLDEN * (b - a)
            fe = f(e)
    best = min(((f(x), x) for x in (a, 0.5 * (a + b), b)), key=lambda t: t[0])
    return best[1], best[0]


def _nested_min(f, d, radius, xtol, prefix=()):
    # min over the box of a convex f; partial minima of a convex function stay convex
    if d == 1:
        x, v = golden_section(lambda t: f(prefix + (t,)), -radius, radius, xtol)
        return prefix + (x,), v

    def outer(t):
        return _nested_min(f, d - 1, radius, xtol, prefix + (t,))[1]

    x0, _ = golden_section(outer, -radius, radius, xtol)
    return _nested_min(f, d - 1, radius, xtol, prefix + (x0,))


def _scalar_worst_risk(problem):
    # plain-float evaluation; numpy overhead dominates at d <= 3
    terms = [(float(a), tuple(float(c) for c in ctr), float(v))
             for a, ctr, v in zip(problem.scales, problem.centers, problem.spreads)]

    def worst(theta):
        best = -math.inf
        for a, ctr, v in terms:
            r = v
            for t, c in zip(theta, ctr):
                r += (t - c) * (t - c)
            r *= a
            if r > best:
                best = r
        return best

    return worst


@dataclass(frozen=True)
class Saddle:
    theta: np.ndarray
    q: np.ndarray
    value: float
    gap: float
    boundary: bool


def _feasible_residual_q(problem: ConvexProblem, theta, value, tol):
    """Mixture ``q`` over near-maximal groups minimizing the projected stationarity residual."""
    risks = problem.group_risks(theta)
    active = np.flatnonzero(risks >= value - max(tol, 1e-9) * 10)
    G = problem.group_gradients(theta)[active].T
    upper = theta >= problem.radius - tol
    lower = theta <= -problem.radius + tol
    signs = np.where(upper, 1.0, np.where(lower, -1.0, 0.0))
    slack_cols = np.diag(signs)[:, signs != 0]
    rho = 1e6 * (1.0 + np.abs(G).max())
    A = np.vstack([np.hstack([G, slack_cols]),
                   np.concatenate([np.full(active.size, rho), np.zeros(slack_cols.shape[1])])])
    b = np.concatenate([np.zeros(problem.d), [rho]])
    sol, _ = nnls(A, b, maxiter=1000)
    q_active = sol[:active.size]
    q_active = q_active / q_active.sum()
    q = np.zeros(problem.m)
    q[active] = q_active
    v = G @ q_active
    resid = np.where(upper, np.maximum(v, 0.0), np.where(lower, np.minimum(v, 0.0), v))
    return q, float(np.linalg.norm(resid)), bool(upper.any() or lower.any())


def reference_saddle(problem: ConvexProblem, tol: float = 1e-9) -> Saddle:
    """High-resolution solution of ``min_theta max_g risk_g(theta)`` over the box.

    Uses nested golden-section search on the (convex) worst-group risk, so
    only ``d <= 3`` is supported. ``q`` is recovered from the near-active
    groups as the mixture whose gradient is most nearly stationary.
    """
    if not tol > 0:
        raise InvalidArgument("tol must be positive")
    if problem.d > 3:
        raise InvalidArgument("reference solver supports d <= 3")
    B = problem.bound_inputs(1)
    xtol = min(tol, 1e-6) / (10.0 * B.B_grad)
    point, _ = _nested_min(_scalar_worst_risk(problem), problem.d, problem.radius, xtol)
    theta = np.array(point)
    value = float(problem.worst_risk(theta))
    q, gap, boundary = _feasible_residual_q(problem, theta, value, tol)
    return Saddle(theta, q, float(value), gap, boundary)


def convergence_error(theta_bar, problem: ConvexProblem, reference: Saddle | None = None,
                      tol: float = 1e-9) -> float:
    """Worst-group risk of ``theta_bar`` above the minimax value."""
    ref = reference_saddle(problem, tol) if reference is None else reference
    return float(problem.worst_risk(np.asarray(theta_bar, dtype=np.float64)) - ref.value)


@dataclass(frozen=True)
class Prop1Check:
    theta_star: np.ndarray
    q_star: np.ndarray
    stationarity_gap: float
    boundary: bool
    passed: bool


def check_prop1(problem: ConvexProblem, tol: float = 1e-6, ref_tol: float = 1e-10) -> Prop1Check:
    """Recover a group mixture whose weighted risk is minimized at the minimax point.

    The gap is the norm of the ``q*``-weighted gradient at ``theta*``,
    restricted to feasible directions when ``theta*`` touches the box.
    """
    ref = reference_saddle(problem, ref_tol)
    return Prop1Check(ref.theta, ref.q, ref.gap, ref.boundary, ref.gap <= tol)


def designed_step_sizes(inputs: BoundInputs):
    """Constant mirror-descent step sizes for a horizon of ``inputs.T`` steps.

    Euclidean geometry on the box and entropy on the simplex, scaled for the
    literal update ``theta -= eta_theta * q_g * grad`` and
    ``q_g *= exp(eta_q * loss)`` under uniform group sampling.
    """
    b = inputs
    scale = math.sqrt(b.B_theta ** 2 * b.B_grad ** 2 + 2.0 * math.log(b.m) * b.B_loss ** 2)
    root = math.sqrt(5.0 * b.T)
    eta_theta = 2.0 * b.B_theta ** 2 / (scale * root)
    eta_q = 4.0 * math.log(b.m) / (scale * root)
    return eta_theta, eta_q


def run_online_dro(problem: ConvexProblem, T: int, seeds, eta_theta=None, eta_q=None, theta0=None):
    """Per-example online group DRO (no momentum) with projection onto the box.

    Runs one replicate per seed in lockstep and returns the average iterates,
    shape ``(len(seeds), d)``. Step sizes default to :func:`designed_step_sizes`.
    """
    seeds = list(seeds)
    S, m, d = len(seeds), problem.m, problem.d
    if eta_theta is None or eta_q is None:
        et, eq = designed_step_sizes(problem.bound_inputs(T))
        eta_theta = et if eta_theta is None else eta_theta
        eta_q = eq if eta_q is None else eta_q
    counts = np.array([grp.points.shape[0] for grp in problem.groups])
    padded = np.zeros((m, counts.max(), d))
    for gid, grp in enumerate(problem.groups):
        padded[gid, :counts[gid]] = grp.points
    groups = np.empty((S, T), dtype=np.int64)
    picks = np.empty((S, T), dtype=np.int64)
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        groups[i] = rng.integers(m, size=T)
        picks[i] = np.floor(rng.random(T) * counts[groups[i]]).astype(np.int64)
    scales = problem.scales
    theta = np.zeros((S, d)) if theta0 is None else np.tile(np.asarray(theta0, dtype=np.float64), (S, 1))
    logq = np.full((S, m), -math.log(m))
    theta_bar = np.zeros((S, d))
    rows = np.arange(S)
    for t in range(T):
        g = groups[:, t]
        z = padded[g, picks[:, t]]
        diff = theta - z
        a = scales[g]
        losses = a * np.sum(diff ** 2, axis=1)
        logq[rows, g] += eta_q * losses
        logq -= logq.max(axis=1, keepdims=True)
        q = np.exp(logq)
        q /= q.sum(axis=1, keepdims=True)
        logq = np.log(q)
        step = (eta_theta * q[rows, g] * 2.0 * a)[:, None] * diff
        theta = problem.project(theta - step)
        theta_bar += (theta - theta_bar) / (t + 1)
    return theta_bar


@dataclass
class ConvergenceStudy:
    rows: list = field(default_factory=list)
    mean_error: dict = field(default_factory=dict)
    bound: dict = field(default_factory=dict)
    slope: float = float("nan")

    def to_csv(self) -> str:
        lines = ["T,seed,eps_T,bound"]
        lines += [f"{T},{seed},{eps!r},{bound!r}" for T, seed, eps, bound in self.rows]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "mean_eps_T": {str(k): v for k, v in self.mean_error.items()},
            "bound": {str(k): v for k, v in self.bound.items()},
            "slope": self.slope,
        }


def convergence_study(problem: ConvexProblem, horizons, seeds, tol: float = 1e-10) -> ConvergenceStudy:
    """Mean excess risk of the average iterate per horizon, and its log-log slope."""
    ref = reference_saddle(problem, tol)
    study = ConvergenceStudy()
    seeds = list(seeds)
    for T in horizons:
        bars = run_online_dro(problem, T, seeds)
        errors = problem.worst_risk(bars) - ref.value
        bound = convergence_bound(problem.bound_inputs(T))
        study.rows += [(T, s, float(e), bound) for s, e in zip(seeds, errors)]
        study.mean_error[T] = float(np.mean(errors))
        study.bound[T] = bound
    logs_T = np.log(np.array(list(study.mean_error)))
    logs_e = np.log(np.maximum(np.array(list(study.mean_error.values())), 1e-300))
    study.slope = float(np.polyfit(logs_T, logs_e, 1)[0])
    return study


# Piecewise-linear two-point counterexample on [0, 1].
COUNTEREXAMPLE_BREAKS = (
    (np.array([0.0, 0.2, 0.5, 1.0]), np.array([0.0, 1.0, 0.6, 1.0])),
    (np.array([0.0, 0.5, 0.8, 1.0]), np.array([1.0, 0.6, 1.0, 0.0])),
)


def counterexample_losses(theta):
    """Losses ``(l1, l2)`` of the non-convex two-point example at ``theta``."""
    arr = np.asarray(theta, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise InvalidArgument("theta must lie in [0, 1]")
    l1 = np.interp(arr, *COUNTEREXAMPLE_BREAKS[0])
    l2 = np.interp(arr, *COUNTEREXAMPLE_BREAKS[1])
    if arr.ndim == 0:
        return float(l1), float(l2)
    return l1, l2


@dataclass(frozen=True)
class CounterexampleReport:
    weights: np.ndarray
    minimizers: np.ndarray
    minimizer_worst_loss: np.ndarray
    dro_theta: float
    dro_value: float

    def passed(self, tol: float = 1e-9) -> bool:
        return (
            bool(np.all(np.abs(self.minimizers) <= tol))
            and bool(np.all(np.abs(self.minimizer_worst_loss - 1.0) <= tol))
            and abs(self.dro_theta - 0.5) <= tol
            and abs(self.dro_value - 0.6) <= tol
        )

    def to_dict(self) -> dict:
        return {
            "n_weightings": int(self.weights.shape[0]),
            "weighted_minimizers": sorted(set(self.minimizers.tolist())),
            "weighted_worst_case": sorted(set(self.minimizer_worst_loss.tolist())),
            "dro_theta": self.dro_theta,
            "dro_value": self.dro_value,
        }


def counterexample_sweep(theta_grid_points: int = 1001, weight_grid_points: int = 101) -> CounterexampleReport:
    """Minimize every reweighting ``w1 l1 + w2 l2`` (``w1 >= w2``) and the worst case on a grid."""
    if theta_grid_points < 101 or weight_grid_points < 11:
        raise InvalidArgument("need >= 101 theta points and >= 11 weight points")
    thetas = np.linspace(0.0, 1.0, theta_grid_points)
    l1, l2 = counterexample_losses(thetas)
    w1 = np.linspace(0.0, 1.0, weight_grid_points)
    w1 = w1[w1 >= 1.0 - w1]
    weights = np.stack([w1, 1.0 - w1], axis=1)
    objective = weights[:, :1] * l1 + weights[:, 1:] * l2
    best = np.argmin(objective, axis=1)
    worst = np.maximum(l1, l2)
    dro = int(np.argmin(worst))
    return CounterexampleReport(weights, thetas[best], worst[best], float(thetas[dro]), float(worst[dro]))


def certified_instance() -> ConvexProblem:
    """Two noisy 1-d quadratic groups on ``[-2, 2]`` with saddle at ``theta = 0``.

    Each group draws ``z`` from two points, so sampled gradients are noisy
    even within a group. Group risks are ``(theta -+ 1)^2 + 0.25``.
    """
    return ConvexProblem(
        (QuadraticGroup(1.0, [[0.5], [1.5]]), QuadraticGroup(1.0, [[-1.5], [-0.5]])),
        radius=2.0,
        name="noisy-symmetric",
    )


def prop1_instances() -> dict:
    return {
        "symmetric": ConvexProblem.quadratics([[1.0], [-1.0]], radius=2.0, name="symmetric"),
        "asymmetric": ConvexProblem.quadratics([[1.0], [-0.5]], [1.0, 4.0], radius=2.0, name="asymmetric"),
        "single": ConvexProblem.quadratics([[0.7]], radius=2.0, name="single"),
    }


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    measured: str


SUITES = ("convergence", "prop1", "counterexample")


def run_suite(only=None, tol: float = 1e-10, seeds=range(20), horizons=(100, 1000, 10000),
              prop1_tol: float = 1e-6):
    """Run the theory checks; returns ``(results, artifacts)``.

    ``tol`` is passed to the reference saddle solver. ``artifacts`` holds the
    convergence study and counterexample report for serialization.
    """
    chosen = SUITES if only is None else tuple(only)
    unknown = set(chosen) - set(SUITES)
    if unknown:
        raise InvalidArgument(f"unknown suite(s) {sorted(unknown)}")
    results, artifacts = [], {}
    if "convergence" in chosen:
        problem = certified_instance()
        study = convergence_study(problem, horizons, seeds, tol)
        artifacts["convergence"] = study
        for T in horizons:
            ok = study.mean_error[T] <= study.bound[T]
            results.append(SuiteResult(f"convergence.bound.T={T}", ok,
                                       f"mean eps_T={study.mean_error[T]:.6g} bound={study.bound[T]:.6g}"))
        ok = -0.75 <= study.slope <= -0.30
        results.append(SuiteResult("convergence.slope", ok, f"slope={study.slope:.4f}"))
        low = min(e for _, _, e, _ in study.rows)
        results.append(SuiteResult("convergence.nonnegative", low >= -tol, f"min eps_T={low:.3g}"))
    if "prop1" in chosen:
        for name, problem in prop1_instances().items():
            check = check_prop1(problem, prop1_tol, tol)
            results.append(SuiteResult(
                f"prop1.{name}", check.passed,
                f"q*={np.round(check.q_star, 6).tolist()} gap={check.stationarity_gap:.3g}",
            ))
    if "counterexample" in chosen:
        report = counterexample_sweep(1001, 101)
        artifacts["counterexample"] = report
        results.append(SuiteResult(
            "counterexample", report.passed(1e-9),
            f"weighted worst-case={sorted(set(report.minimizer_worst_loss.tolist()))} "
            f"dro=(theta={report.dro_theta}, value={report.dro_value})",
        ))
    return results, artifacts

"""Maximum-likelihood fitting of the target and nuisance models.

The target model is ``theta(V) = alpha' W``. The nuisance model is either the
log odds product ``phi(V) = beta' Z`` (``LOG_OP``, unconstrained) or a linear
baseline risk ``p0(V) = beta' Z`` (``LINEAR_P0``, constrained to keep both
risks in (0, 1); kept as a comparator).
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize

from .design import Dataset, DesignSpec, build_design
from .exceptions import ConvergenceError, SingularityError, SpecError
from .linkmap import Measure, inverse_full, partials_from_probs

log = logging.getLogger(__name__)


class NuisanceForm(str, enum.Enum):
    LOG_OP = "log_op"
    LINEAR_P0 = "linear_p0"

    @classmethod
    def coerce(cls, value) -> "NuisanceForm":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"logop": "log_op", "log_op": "log_op", "p0": "linear_p0", "linear_p0": "linear_p0"}
        if key not in aliases:
            raise SpecError(f"unknown nuisance form {value!r}")
        return cls(aliases[key])


@dataclass(frozen=True)
class OutcomeModelSpec:
    measure: Measure
    w: DesignSpec
    z: DesignSpec
    nuisance: NuisanceForm = NuisanceForm.LOG_OP

    def __post_init__(self):
        object.__setattr__(self, "measure", Measure.coerce(self.measure))
        object.__setattr__(self, "nuisance", NuisanceForm.coerce(self.nuisance))

    def to_dict(self) -> dict:
        return {"measure": self.measure.value, "w": self.w.to_dict(), "z": self.z.to_dict(),
                "nuisance": self.nuisance.value}

    @classmethod
    def from_dict(cls, d) -> "OutcomeModelSpec":
        return cls(d["measure"], DesignSpec.from_dict(d["w"]), DesignSpec.from_dict(d["z"]),
                   d.get("nuisance", "log_op"))


def outcome_probs(theta, eta, measure, form):
    """Risks, their complements and partial derivatives under either nuisance form.

    ``eta`` is the nuisance linear predictor (log odds product, or baseline
    risk for ``LINEAR_P0``). Returns ``(p0, p1, q0, q1, partials)`` with
    ``partials = (dp0/dtheta, dp0/deta, dp1/dtheta, dp1/deta)``. Under
    ``LINEAR_P0`` the risks may leave (0, 1); callers check feasibility.
    """
    measure = Measure.coerce(measure)
    if NuisanceForm.coerce(form) is NuisanceForm.LOG_OP:
        p0, p1, q0, q1 = inverse_full(theta, eta, measure)
        return p0, p1, q0, q1, partials_from_probs(p0, p1, q0, q1, measure)
    theta = np.asarray(theta, dtype=float)
    p0 = np.asarray(eta, dtype=float) * np.ones_like(theta)
    zero = np.zeros_like(p0)
    one = np.ones_like(p0)
    if measure is Measure.RR:
        et = np.exp(theta)
        p1 = p0 * et
        parts = (zero, one, p1, et)
    else:
        rho = np.tanh(theta)
        p1 = p0 + rho
        parts = (zero, one, 1.0 - rho * rho, one)
    return p0, p1, 1.0 - p0, 1.0 - p1, parts


class _Likelihood:
    """Row-level likelihood pieces for fixed data and designs."""

    def __init__(self, data: Dataset, spec: OutcomeModelSpec, W=None, Z=None):
        self.spec = spec
        self.W = build_design(data, spec.w).values if W is None else W
        self.Z = build_design(data, spec.z).values if Z is None else Z
        self.y = data.y
        self.exposed = data.a == 1
        self.p = self.W.shape[1]
        self.q = self.Z.shape[1]

    def split(self, x):
        return x[:self.p], x[self.p:]

    def linear(self, x):
        alpha, beta = self.split(np.asarray(x, dtype=float))
        return self.W @ alpha, self.Z @ beta

    def probs(self, x):
        theta, eta = self.linear(x)
        return outcome_probs(theta, eta, self.spec.measure, self.spec.nuisance)

    def _arm(self, x):
        p0, p1, q0, q1, (d0t, d0e, d1t, d1e) = self.probs(x)
        ex = self.exposed
        return (np.where(ex, p1, p0), np.where(ex, q1, q0),
                np.where(ex, d1t, d0t), np.where(ex, d1e, d0e))

    def loglik(self, x) -> float:
        return self.evaluate(x, derivatives=False)[0]

    def gradients(self, x):
        """Observed-arm risk, its complement and the row gradients of that risk."""
        pa, qa, dt, de = self._arm(x)
        return pa, qa, np.hstack([dt[:, None] * self.W, de[:, None] * self.Z])

    def evaluate(self, x, derivatives=True, relaxed=False):
        """Log-likelihood, score rows and expected information from one pass over the link map.

        ``relaxed`` only requires the probability of the observed outcome to
        be positive, so the score stays defined on the boundary of the
        linear baseline-risk model (used for curvature there).
        """
        pa, qa, dt, de = self._arm(x)
        y1 = self.y == 1
        if relaxed:
            feasible = np.all(np.where(y1, pa, qa) > 0)
        else:
            feasible = np.all(pa > 0) and np.all(qa > 0)
        if not feasible:
            return -np.inf, None, None
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = float(np.sum(np.where(y1, np.log(pa), np.log(qa))))
            if not derivatives:
                return ll, None, None
            grad = np.hstack([dt[:, None] * self.W, de[:, None] * self.Z])
            rows = np.where(y1, 1.0 / pa, -1.0 / qa)[:, None] * grad
            einfo = (grad / (pa * qa)[:, None]).T @ grad if not relaxed else None
        return ll, rows, einfo

    def score_rows(self, x, relaxed=False):
        rows = self.evaluate(x, relaxed=relaxed)[1]
        if rows is None:
            raise SpecError("score undefined: risks outside (0, 1) under the linear baseline model")
        return rows

    def score(self, x, relaxed=False):
        return self.score_rows(x, relaxed).sum(axis=0)

    def hessian(self, x, relaxed=False):
        """Central differences of the analytic score, symmetrized."""
        x = np.asarray(x, dtype=float)
        k = x.size
        hess = np.empty((k, k))
        for j in range(k):
            h = 1e-6 * (1.0 + abs(x[j]))
            up, dn = x.copy(), x.copy()
            up[j] += h
            dn[j] -= h
            hess[:, j] = (self.score(up, relaxed) - self.score(dn, relaxed)) / (2 * h)
        return 0.5 * (hess + hess.T)


@dataclass
class NuisanceFit:
    """Result of :func:`fit_mle`.

    ``information`` is the observed information (negative Hessian of the
    summed log-likelihood) for the stacked vector ``(alpha, beta)``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    loglik: float
    theta: np.ndarray
    eta: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    information: np.ndarray
    converged: bool
    iterations: int
    spec: OutcomeModelSpec
    w_names: list[str]
    z_names: list[str]
    score_norm: float = np.nan
    trace: list[float] = field(default_factory=list)
    on_boundary: bool = False

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    @property
    def names(self) -> list[str]:
        return [f"alpha:{c}" for c in self.w_names] + [f"beta:{c}" for c in self.z_names]

    def to_dict(self) -> dict:
        return {
            "estimator": "mle",
            "spec": self.spec.to_dict(),
            "coefficients": dict(zip(self.names, self.params.tolist())),
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "score_norm": self.score_norm,
            "on_boundary": self.on_boundary,
        }


def log_likelihood(alpha, beta, data: Dataset, spec: OutcomeModelSpec) -> float:
    """Summed Bernoulli log-likelihood; ``-inf`` if a ``LINEAR_P0`` risk leaves (0, 1)."""
    lik = _Likelihood(data, spec)
    x = _stack(alpha, beta, lik)
    return lik.loglik(x)


def score(alpha, beta, data: Dataset, spec: OutcomeModelSpec) -> np.ndarray:
    """Gradient of :func:`log_likelihood` with respect to ``(alpha, beta)``."""
    lik = _Likelihood(data, spec)
    x = _stack(alpha, beta, lik)
    if not np.isfinite(lik.loglik(x)):
        raise SpecError("score undefined: risks outside (0, 1) under the linear baseline model")
    return lik.score(x)


def _stack(alpha, beta, lik):
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if alpha.size != lik.p or beta.size != lik.q:
        raise SpecError(f"parameter sizes ({alpha.size}, {beta.size}) do not match designs ({lik.p}, {lik.q})")
    return np.concatenate([alpha, beta])


def _start(lik: _Likelihood, data: Dataset) -> np.ndarray:
    x = np.zeros(lik.p + lik.q)
    if lik.spec.nuisance is NuisanceForm.LOG_OP:
        return x
    # LINEAR_P0: constant baseline at the clipped unexposed mean, no effect
    unexposed = ~lik.exposed
    m0 = data.y[unexposed].mean() if unexposed.any() else data.y.mean()
    m0 = float(np.clip(m0, 0.05, 0.95))
    beta, *_ = np.linalg.lstsq(lik.Z, np.full(data.n, m0), rcond=None)
    x[lik.p:] = beta
    return x


def _edge_distance(lik: _Likelihood, x) -> float:
    pa, qa, _, _ = lik._arm(x)
    return float(np.min(np.where(lik.y == 1, qa, pa)))


def _flat_but_better(cand, ll, gmax) -> bool:
    """Accept a step whose log-likelihood loss is at roundoff level if the score shrinks.

    Near the optimum the change in the summed log-likelihood drops below its
    rounding error and a strict ascent test would stall the iteration.
    """
    slack = 1e-12 * max(1.0, abs(ll))
    return cand[0] >= ll - slack and np.max(np.abs(cand[1].sum(axis=0))) < gmax


def fit_mle(data: Dataset, spec: OutcomeModelSpec, *, max_iter: int = 200, tol: float = 1e-8,
            rel_tol: float = 1e-12, start=None, newton_switch: float = 1e-2) -> NuisanceFit:
    """Maximize the log-likelihood by damped Newton ascent.

    While the score max-norm exceeds ``newton_switch`` the step uses the
    expected information (Fisher scoring); closer in, it uses a
    finite-difference Hessian of the analytic score. When the curvature
    matrix is not positive definite the step falls back to the gradient. Each step is halved until the log-likelihood does not
    decrease. Converged when the max-norm of the (summed) score is below
    ``tol`` or a full Newton step changes the log-likelihood by less than
    ``rel_tol`` relatively.
    """
    if data.n == 0:
        raise SpecError("cannot fit an empty dataset")
    lik = _Likelihood(data, spec)
    k = lik.p + lik.q
    if data.n <= k:
        warnings.warn(f"n={data.n} observations for {k} parameters", RuntimeWarning, stacklevel=2)

    x = _start(lik, data) if start is None else np.asarray(start, dtype=float).copy()
    ll, rows, einfo = lik.evaluate(x)
    if not np.isfinite(ll):
        raise ConvergenceError("infeasible starting value for the linear baseline-risk model; "
                               "consider the log odds-product nuisance model", x)
    g = rows.sum(axis=0)
    trace = [ll]
    boundary_possible = spec.nuisance is NuisanceForm.LINEAR_P0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gmax = np.max(np.abs(g))
        if gmax < tol:
            converged, it = True, it - 1
            break
        # Fisher scoring far from the optimum, Newton on the observed Hessian near it
        newton = gmax < newton_switch
        curv = -lik.hessian(x) if newton else einfo
        try:
            np.linalg.cholesky(curv)
            d = np.linalg.solve(curv, g)
        except np.linalg.LinAlgError:
            d, newton = g, False
        if g @ d <= 0:
            d, newton = g, False
        accepted = False
        for direction in (d, g):
            step = 1.0
            for _ in range(60):
                cand = lik.evaluate(x + step * direction)
                if np.isfinite(cand[0]) and (cand[0] >= ll or _flat_but_better(cand, ll, gmax)):
                    accepted = True
                    break
                step *= 0.5
            if accepted or direction is g:
                break
            newton = False
        if not accepted:
            break
        ll_new, rows, einfo = cand
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        x, ll = x + step * direction, ll_new
        trace.append(ll)
        g = rows.sum(axis=0)
        if np.max(np.abs(g)) < tol or (newton and step == 1.0 and rel < rel_tol):
            converged = True
            break
        if boundary_possible and step < 1.0 and _edge_distance(lik, x) < 1e-8:
            break  # pinned against the feasibility boundary; handled below

    gnorm = float(np.max(np.abs(g)))
    on_boundary = False
    if not converged and spec.nuisance is NuisanceForm.LINEAR_P0:
        refined = _boundary_refine(lik, x, _start(lik, data))
        if refined is not None:
            x, ll, gnorm, on_boundary = refined
            converged = True
            trace.append(ll)
    if not converged:
        raise ConvergenceError(f"maximum likelihood did not converge after {it} iterations "
                               f"(score max-norm {gnorm:.3g})", x, gnorm)
    info = -lik.hessian(x, relaxed=on_boundary)
    theta, eta = lik.linear(x)
    p0, p1, *_ = lik.probs(x)
    return NuisanceFit(alpha=x[:lik.p].copy(), beta=x[lik.p:].copy(), loglik=ll, theta=theta,
                       eta=eta, p0=p0, p1=p1, information=info, converged=True, iterations=it,
                       spec=spec, w_names=spec.w.column_names, z_names=spec.z.column_names,
                       score_norm=gnorm, trace=trace, on_boundary=on_boundary)


def _boundary_refine(lik: _Likelihood, x0, x_inner=None, kkt_tol: float = 1e-6):
    """Maximize the linear baseline-risk likelihood on a feasibility boundary.

    Rows whose observed outcome keeps a finite log-probability at the edge
    (``y = 1`` with risk 1, ``y = 0`` with risk 0) can be pulled onto the
    boundary, where the score no longer vanishes. Follows the log-barrier
    path ``loglik + mu * sum(log s_i)`` with ``s_i`` the distance of row
    ``i`` from its edge, for ``mu`` from 1e-2 down to 1e-10, taking Newton
    steps from a strictly feasible start pulled back from ``x0`` toward
    ``x_inner``. The result is accepted when the KKT conditions hold, with
    multipliers for the active rows found by nonnegative least squares.
    The last ``mu`` leaves active rows about 1e-12 inside the boundary;
    going further loses the slack to rounding in ``1 - p``.
    Returns ``(x, loglik, kkt_residual, any_active)`` or ``None``.
    """
    y1 = lik.y == 1
    sign = np.where(y1, -1.0, 1.0)

    def slack(x):
        pa, qa, grad = lik.gradients(x)
        return np.where(y1, qa, pa), sign[:, None] * grad

    def barrier_grad(x, mu):
        _, rows, _ = lik.evaluate(x)
        s, ds = slack(x)
        return rows.sum(axis=0) + (mu / s) @ ds, rows.sum(axis=0)

    def barrier_value(x, mu):
        ll = lik.loglik(x)
        s, _ = slack(x)
        if not np.isfinite(ll) or np.any(s <= 0):
            return -np.inf
        return ll + mu * float(np.sum(np.log(s)))

    # begin at a well-interior point on the segment toward the feasible start
    x0 = np.asarray(x0, dtype=float)
    inner = x_inner if x_inner is not None else x0
    x = None
    for t in (0.01, 0.05, 0.2, 0.5, 1.0):
        cand = x0 + t * (inner - x0)
        if np.isfinite(barrier_value(cand, 1.0)) and slack(cand)[0].min() > 1e-3:
            x = cand
            break
    if x is None:
        x = x0.copy()
        if not np.isfinite(barrier_value(x, 1.0)):
            return None
    k = x.size
    for mu in 10.0 ** -np.arange(2, 11):
        for _ in range(50):
            g, gll = barrier_grad(x, mu)
            if np.max(np.abs(g)) < 1e-9 * max(1.0, np.max(np.abs(gll))):
                break
            s, ds = slack(x)
            lam = mu / s
            # curvature of the log-likelihood and of sum(lam_i s_i) at fixed lam, by
            # differences of smooth gradients; the lam^2/mu term is exact
            hess = np.empty((k, k))
            for j in range(k):
                h = 1e-6 * (1.0 + abs(x[j]))
                up, dn = x.copy(), x.copy()
                up[j] += h
                dn[j] -= h
                hess[:, j] = ((lik.score(up, relaxed=True) + lam @ slack(up)[1])
                              - (lik.score(dn, relaxed=True) + lam @ slack(dn)[1])) / (2 * h)
            hess = 0.5 * (hess + hess.T) - (ds * (lam * lam / mu)[:, None]).T @ ds
            try:
                d = np.linalg.solve(-hess, g)
            except np.linalg.LinAlgError:
                d = g
            if g @ d <= 0:
                d = g
            f0 = barrier_value(x, mu)
            if g @ d < 1e-13 * max(1.0, abs(f0)):
                break  # Newton decrement at rounding level
            step = 1.0
            for _ in range(60):
                f1 = barrier_value(x + step * d, mu)
                if np.isfinite(f1) and f1 >= f0 - 1e-12 * max(1.0, abs(f0)):
                    break
                step *= 0.5
            else:
                break
            x = x + step * d
        log.debug("barrier mu=%.0e: |grad| %.3g, min slack %.3g", mu,
                  np.max(np.abs(barrier_grad(x, mu)[0])), slack(x)[0].min())
    # KKT: the score must be a nonnegative combination of the active edge normals
    ll, rows, _ = lik.evaluate(x)
    gll = rows.sum(axis=0)
    s, ds = slack(x)
    active = s < 1e-6
    if active.any():
        _, resid = optimize.nnls(-ds[active].T, gll)
    else:
        resid = float(np.linalg.norm(gll))
    if resid > kkt_tol * max(1.0, float(np.max(np.abs(gll)))):
        log.debug("boundary refinement failed the KKT check (residual %.3g)", resid)
        return None
    return x, ll, float(resid), bool(active.any())


def predict(fit: NuisanceFit, covariates, spec: OutcomeModelSpec | None = None,
            alpha=None) -> pd.DataFrame:
    """Per-row theta, risks and RR (or RD) on a new covariate table.

    ``alpha`` overrides the fitted target coefficients (e.g. with a doubly
    robust estimate); the baseline still comes from the fitted nuisance.
    """
    spec = spec or fit.spec
    if isinstance(covariates, Dataset):
        covariates = covariates.covariates
    W = build_design(covariates, spec.w).values
    Z = build_design(covariates, spec.z, n=W.shape[0]).values
    alpha = fit.alpha if alpha is None else np.asarray(alpha, dtype=float)
    theta = W @ alpha
    p0, p1, *_ = outcome_probs(theta, Z @ fit.beta, spec.measure, spec.nuisance)
    out = pd.DataFrame({"theta": theta, "p0": p0, "p1": p1})
    if spec.measure is Measure.RR:
        out["rr"] = np.exp(theta)
    else:
        out["rd"] = np.tanh(theta)
    return out


def information_inverse(info: np.ndarray, names=None, rcond_min: float = 1e-12) -> np.ndarray:
    """Invert a symmetric positive definite matrix or raise :class:`SingularityError`.

    The error message lists the columns loading on the near-null direction.
    """
    info = 0.5 * (info + info.T)
    w, v = np.linalg.eigh(info)
    top = np.max(np.abs(w)) if w.size else 0.0
    if w.size == 0 or top == 0 or w.min() <= rcond_min * top:
        vec = v[:, 0] if w.size else np.array([])
        idx = np.flatnonzero(np.abs(vec) > 0.1) if vec.size else []
        labels = [names[i] if names else str(i) for i in idx]
        raise SingularityError("information matrix is singular or ill-conditioned; "
                               f"near-dependent columns: {', '.join(labels) or 'unknown'}")
    return (v / w) @ v.T

"""Numerical release gate: every check returns a residual compared to its tolerance.

Checks reach the functions under test through their modules
(``regularizers.reg_collapsed_mean``), so a test can swap one out and
watch the matching check fail.
"""

import json
import logging
import math
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass
from pathlib import Path

import click
import numpy as np
from scipy.integrate import quad
from scipy.stats import norm

from . import autodiff, networks, regularizers, theory
from .core import VariationalOutput

log = logging.getLogger(__name__)

type CheckFn = Callable[[np.random.Generator], float]


@dataclass(frozen=True)
class Check:
    name: str
    tolerance: float
    fn: CheckFn


@dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    tolerance: float
    passed: bool
    error: str | None = None


CHECKS: dict[str, Check] = {}


def check(name: str, tolerance: float):
    def register(fn: CheckFn) -> CheckFn:
        if name in CHECKS:
            raise ValueError(f"Duplicate check {name!r}")
        CHECKS[name] = Check(name=name, tolerance=tolerance, fn=fn)
        return fn

    return register


def _random_output(rng: np.random.Generator, shape: tuple[int, ...]) -> VariationalOutput:
    return VariationalOutput.of(rng.normal(size=shape), rng.uniform(0.05, 2.0, size=shape))


@check("autodiff_gradients", tolerance=1e-5)
def _autodiff_gradients(rng: np.random.Generator) -> float:
    spec = networks.MlpSpec(input_dim=2, hidden=(4,), output_dim=3)
    net = networks.init_network(spec, int(rng.integers(2**31)))
    X = rng.normal(size=(5, 2))
    y = rng.integers(0, 3, size=5)
    aux = rng.normal(size=(5, 2))
    cfg = regularizers.ObjectiveConfig(eta=0.1, eta_aux=0.1, M=3)
    prior = regularizers.CollapsedMean()
    noise_seed = int(rng.integers(2**31))

    def objective() -> autodiff.Tensor:
        noise = np.random.default_rng(noise_seed)
        return regularizers.total_objective(net, X, y, aux, prior, cfg, noise)

    params = net.parameters()
    analytic = autodiff.grad(objective(), params)
    numeric = autodiff.numeric_grad(lambda: objective().item(), params)
    return autodiff.relative_error(analytic, numeric)


@check("logsumexp_shift", tolerance=1e-12)
def _logsumexp_shift(rng: np.random.Generator) -> float:
    v = rng.normal(size=(20, 7))
    c = 5.0 * rng.normal()
    shifted = autodiff.logsumexp(v + c).data
    return float(np.max(np.abs(shifted - (autodiff.logsumexp(v).data + c))))


@check("collapsed_mean_plugin", tolerance=1e-8)
def _collapsed_mean_plugin(rng: np.random.Generator) -> float:
    q = _random_output(rng, (20, 4))
    gamma, alpha = 0.3, 5.7
    m_tilde, v_tilde = theory.collapsed_mean_posterior(q, gamma, alpha)
    direct = theory.collapsed_objective_direct(q, gamma, alpha, m_tilde, v_tilde)
    closed = regularizers.reg_collapsed_mean(q, gamma, alpha).data
    return float(np.max(np.abs(direct - closed)))


@check("collapsed_mean_optimality", tolerance=1e-12)
def _collapsed_mean_optimality(rng: np.random.Generator) -> float:
    q = _random_output(rng, (1, 3))
    gamma, alpha = 0.3, 5.7
    m_tilde, v_tilde = theory.collapsed_mean_posterior(q, gamma, alpha)
    best = float(np.sum(theory.collapsed_objective_direct(q, gamma, alpha, m_tilde, v_tilde)))
    worst_gain = math.inf
    for _ in range(20):
        moved_m = m_tilde + 0.3 * rng.normal(size=m_tilde.shape)
        moved_v = v_tilde * math.exp(0.3 * rng.normal())
        value = float(np.sum(theory.collapsed_objective_direct(q, gamma, alpha, moved_m, moved_v)))
        worst_gain = min(worst_gain, value - best)
    return max(0.0, -worst_gain)


@check("collapsed_mv_plugin", tolerance=1e-8)
def _collapsed_mv_plugin(rng: np.random.Generator) -> float:
    q = _random_output(rng, (20, 4))
    alpha, beta, delta = 0.5, 0.01, 0.1
    closed = regularizers.reg_collapsed_mv(q, alpha, beta, delta).data
    closed = closed + regularizers.collapsed_mv_constant(q.K, alpha, beta, delta)
    plugin = theory.collapsed_mv_plugin(q, alpha, beta, delta)
    return float(np.max(np.abs(plugin - closed)))


@check("mv_all_plugin", tolerance=1e-8)
def _mv_all_plugin(rng: np.random.Generator) -> float:
    q = _random_output(rng, (20, 4))
    alpha, beta, delta = 0.5, 0.01, 0.1
    closed = regularizers.reg_mv_all(q, alpha, beta, delta).item()
    closed += regularizers.mv_all_constant(20, q.K, alpha, beta, delta)
    return abs(theory.collapsed_mv_all_plugin(q, alpha, beta, delta) - closed)


@check("eb_plugin", tolerance=1e-8)
def _eb_plugin(rng: np.random.Generator) -> float:
    q = _random_output(rng, (20, 4))
    alpha, beta = 4.4798, 10.0
    s = regularizers.eb_optimal_s(q, alpha, beta)
    full = regularizers.eb_objective(q, s, alpha, beta).data
    kl = full - (alpha + 1.0) * np.log(s.data) - beta / s.data
    return float(np.max(np.abs(regularizers.reg_eb(q, alpha, beta).data - kl)))


@check("eb_optimum", tolerance=1e-6)
def _eb_optimum(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(20):
        q = _random_output(rng, (4,))
        alpha, beta = rng.uniform(0.5, 5.0), rng.uniform(0.1, 10.0)
        closed = float(regularizers.eb_optimal_s(q, alpha, beta).data)
        numeric = theory.eb_optimal_s_numeric(q, alpha, beta)
        worst = max(worst, abs(closed - numeric) / closed)
    return worst


@check("linear_gap_constant", tolerance=1e-8)
def _linear_gap_constant(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(10):
        d = int(rng.integers(1, 6))
        inst = theory.random_linear_instance(d, int(rng.integers(d + 1, 21)), rng)
        gaps = [
            theory.objective_gap(rng.normal(size=d), theory.random_spd(d, rng), inst)
            for _ in range(20)
        ]
        worst = max(worst, float(np.std(gaps)))
    return worst


@check("pseudo_inverse_identity", tolerance=1e-8)
def _pseudo_inverse_identity(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(10):
        d = int(rng.integers(1, 6))
        inst = theory.random_linear_instance(d, int(rng.integers(d + 1, 21)), rng)
        w, V = rng.normal(size=d), theory.random_spd(d, rng)
        direct = theory.correlated_kl_direct(w, V, inst).value
        simplified = theory.simplified_correlated_kl(w, V, inst)
        worst = max(worst, abs(direct - simplified) / max(1.0, abs(simplified)))
    return worst


def _relu_moment_quadrature(w_bar: float, u_bar: float, sigma_u: float, x1: float) -> float:
    density = norm(loc=u_bar, scale=sigma_u).pdf
    if x1 >= 0:
        value, _ = quad(lambda u: u * x1 * density(u), 0.0, math.inf, epsabs=1e-13, epsrel=1e-12)
    else:
        value, _ = quad(lambda u: u * x1 * density(u), -math.inf, 0.0, epsabs=1e-13, epsrel=1e-12)
    return w_bar * value


@check("relu_moment_closed_form", tolerance=1e-8)
def _relu_moment_closed_form(rng: np.random.Generator) -> float:
    worst = 0.0
    for u_bar in (-2.0, 0.0, 2.0):
        for sigma_u in (0.5, 1.0, 2.0):
            for x1 in (-3.0, -1.0, 1.0, 3.0):
                closed = theory.relu_moment(1.3, u_bar, sigma_u, x1)
                numeric = _relu_moment_quadrature(1.3, u_bar, sigma_u, x1)
                worst = max(worst, abs(closed - numeric) / max(1.0, abs(numeric)))
    return worst


@check("relu_witness", tolerance=0.5)
def _relu_witness_check(rng: np.random.Generator) -> float:
    witness = theory.relu_witness()
    holds = (
        witness.positive_moment > 0 and witness.negative_moment > 0 and not witness.reproducible
    )
    return 0.0 if holds else 1.0


def run_checks(names: Iterable[str] | None = None, *, seed: int = 0) -> list[CheckResult]:
    """Run the named checks (all by default), each on its own seeded generator."""
    selected = list(names) if names is not None else list(CHECKS)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise LookupError(f"Unknown check(s): {', '.join(unknown)}")

    results = []
    for index, name in enumerate(selected):
        entry = CHECKS[name]
        rng = np.random.default_rng([seed, index])
        error = None
        try:
            residual = float(entry.fn(rng))
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
            residual, error = math.inf, f"{type(e).__name__}: {e}"
        passed = residual <= entry.tolerance
        log.info(
            "check name=%s residual=%.3e tolerance=%.1e passed=%s",
            name,
            residual,
            entry.tolerance,
            passed,
        )
        results.append(CheckResult(name, residual, entry.tolerance, passed, error))
    return results


def report(results: list[CheckResult]) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "checks": [
            asdict(r) | {"residual": r.residual if math.isfinite(r.residual) else None}
            for r in results
        ],
    }


@click.command("verify")
@click.option("--out", type=click.Path(dir_okay=False), default="verify.json", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--check", "names", multiple=True, help="Run only these checks (repeatable).")
def verify_command(out, seed, names):
    """Run the numerical checks and write a JSON report; exit 1 if any fails."""
    try:
        results = run_checks(names or None, seed=seed)
    except LookupError as e:
        raise click.ClickException(str(e)) from None
    Path(out).write_text(json.dumps(report(results), indent=2) + "\n", encoding="utf-8")
    for result in results:
        status = "ok  " if result.passed else "FAIL"
        click.echo(f"{status} {result.name:<28} {result.residual:.3e} (tol {result.tolerance:.0e})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise click.ClickException(f"failed checks: {', '.join(failed)}")

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
import logging
import os
from typing import Callable

import numpy as np

from utils.adapter_utils import AdapterState
from utils.agop_utils import AgopConfig, init_from_head, observe_batch, refresh_basis, spectrum
from utils.errors import ConfigError
from utils.linalg_utils import (
    cumulative_spectral_energy,
    least_norm_delta,
    null_space_projector,
    numerical_rank,
    pseudoinverse,
    random_orthonormal,
    subspace_similarity,
    sym_eig,
)
from utils.loss_utils import LossConfig, softmax, total_loss_and_grads
from utils.model_utils import PrototypeBank, backbone_activations, init_teacher, make_backbone, make_head


logger = logging.getLogger(__name__)

SUITES = ("minimality", "rank-bound", "penrose", "gradient-check", "agop-alignment")
FAULTS = ("none", "minimality")
CONSTRAINT_TOL = 1e-8
PENROSE_TOL = 1e-8
GRAD_STEP = 1e-5
GRAD_RTOL = 1e-4
GRAD_FLOOR = 1e-4
ALIGN_TOL = 1e-6
KAPPA_TOL = 1e-8
PERTURBATIONS = 50

Solver = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TrialResult:
    suite: str
    trial: int
    seed: int
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class SuiteReport:
    suite: str
    results: tuple[TrialResult, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[TrialResult]:
        return [r for r in self.results if not r.passed]


def oracle_threads() -> int:
    raw = os.environ.get("GOLD_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(f"GOLD_THREADS must be an integer, got {raw!r}") from exc
    if threads < 1:
        raise ConfigError(f"GOLD_THREADS must be positive, got {threads}")
    return threads


def _sign_flipped(w: np.ndarray, delta_y: np.ndarray) -> np.ndarray:
    return -least_norm_delta(w, delta_y)


def _solver(fault: str) -> Solver:
    return _sign_flipped if fault == "minimality" else least_norm_delta


def _classifier(rng: np.random.Generator, deficient: bool = False) -> np.ndarray:
    c = int(rng.integers(2, 11))
    l = int(rng.integers(c, 65))
    if deficient:
        k = int(rng.integers(1, c))
        return rng.standard_normal((c, k)) @ rng.standard_normal((k, l))
    return rng.standard_normal((c, l))


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def minimality_trial(rng: np.random.Generator, solver: Solver = least_norm_delta) -> tuple[bool, str]:
    """dF* satisfies dF* W^T = dY and no feasible point dF* + Z P_null is smaller."""
    w = _classifier(rng)
    delta_y = rng.standard_normal((int(rng.integers(1, 9)), w.shape[0]))
    delta_f = solver(w, delta_y)
    residual = _relative(delta_f @ w.T, delta_y)
    if residual > CONSTRAINT_TOL:
        return False, f"constraint residual {residual:.3e}"
    base = np.linalg.norm(delta_f)
    projector = null_space_projector(w)
    for k in range(PERTURBATIONS):
        candidate = delta_f + rng.standard_normal(delta_f.shape) @ projector * 10.0 ** rng.uniform(-6, 1)
        if np.linalg.norm(candidate) < base * (1.0 - 1e-12):
            return False, f"perturbation {k} is feasible and smaller"
    return True, ""


def rank_bound_trial(rng: np.random.Generator, solver: Solver = least_norm_delta) -> tuple[bool, str]:
    w = _classifier(rng, deficient=bool(rng.integers(0, 2)))
    delta_y = rng.standard_normal((int(rng.integers(1, 80)), w.shape[0]))
    rank_f = numerical_rank(solver(w, delta_y))
    rank_w = numerical_rank(w)
    if rank_f > rank_w:
        return False, f"rank(dF*) = {rank_f} > rank(W) = {rank_w}"
    return True, ""


def penrose_trial(rng: np.random.Generator) -> tuple[bool, str]:
    a = _classifier(rng, deficient=bool(rng.integers(0, 2)))
    if rng.integers(0, 2):
        a = a.T
    a_pinv = pseudoinverse(a)
    checks = {
        "A A+ A = A": _relative(a @ a_pinv @ a, a),
        "A+ A A+ = A+": _relative(a_pinv @ a @ a_pinv, a_pinv),
        "(A A+)^T = A A+": _relative((a @ a_pinv).T, a @ a_pinv),
        "(A+ A)^T = A+ A": _relative((a_pinv @ a).T, a_pinv @ a),
    }
    for name, err in checks.items():
        if err > PENROSE_TOL:
            return False, f"{name} violated ({err:.3e})"
    return True, ""


def gradient_instance(rng: np.random.Generator, lambda_trg: float = 1.0, lambda_cont: float = 1.0):
    """Small random model, adapter and batch for finite-difference checks."""
    l_in, l, c, r, b = 5, 8, 3, 2, 6
    backbone = make_backbone(rng.standard_normal((l, l_in)) * 0.5, rng.standard_normal(l) * 0.1)
    backbone = replace(backbone, gain=1.0 + 0.2 * rng.standard_normal(l), abias=0.1 * rng.standard_normal(l))
    head = make_head(rng.standard_normal((c, l)), 0.1 * rng.standard_normal(c))
    teacher = init_teacher(head, backbone, 0.99)
    teacher = replace(teacher, gain=teacher.gain + 0.05 * rng.standard_normal(l))
    protos = PrototypeBank(p=rng.standard_normal((c, l)), counts=np.full(c, 10.0))
    state = AdapterState(v=random_orthonormal(rng, l, r), s=0.3 * rng.standard_normal(r))
    x = rng.standard_normal((b, l_in))
    h = backbone_activations(backbone, x)
    h_aug = backbone_activations(backbone, x + 0.1 * rng.standard_normal(x.shape))
    cfg = LossConfig(lambda_trg=lambda_trg, lambda_cont=lambda_cont, temperature=0.5)
    return state, backbone, head, teacher, h, h_aug, protos, cfg


def _loss_at(state, backbone, head, teacher, h, h_aug, protos, cfg) -> float:
    return total_loss_and_grads(state, backbone, head, teacher, h, h_aug, protos, cfg).loss_total


def finite_difference_errors(instance) -> dict[str, float]:
    """Worst relative error of each analytic gradient against central differences."""
    state, backbone, head, teacher, h, h_aug, protos, cfg = instance
    grads = total_loss_and_grads(state, backbone, head, teacher, h, h_aug, protos, cfg)

    def perturbed(name: str, index: int, delta: float) -> float:
        if name == "s":
            s = state.s.copy()
            s[index] += delta
            return _loss_at(AdapterState(v=state.v, s=s), backbone, head, teacher, h, h_aug, protos, cfg)
        field_name = "gain" if name == "gain" else "abias"
        value = getattr(backbone, field_name).copy()
        value[index] += delta
        bumped = replace(backbone, **{field_name: value})
        return _loss_at(state, bumped, head, teacher, h, h_aug, protos, cfg)

    errors: dict[str, float] = {}
    for name, analytic in (("s", grads.d_s), ("gain", grads.d_gain), ("bias", grads.d_bias)):
        worst = 0.0
        for i in range(analytic.size):
            numeric = (perturbed(name, i, GRAD_STEP) - perturbed(name, i, -GRAD_STEP)) / (2.0 * GRAD_STEP)
            scale = max(abs(analytic[i]), abs(numeric), GRAD_FLOOR)
            worst = max(worst, abs(analytic[i] - numeric) / scale)
        errors[name] = worst
    return errors


def gradient_trial(rng: np.random.Generator) -> tuple[bool, str]:
    lambdas = [(1.0, 1.0), (1.0, 0.0), (0.0, 1.0)][int(rng.integers(0, 3))]
    errors = finite_difference_errors(gradient_instance(rng, *lambdas))
    for name, err in errors.items():
        if err >= GRAD_RTOL:
            return False, f"d_{name} relative error {err:.3e} with lambdas {lambdas}"
    return True, ""


def alignment_trial(rng: np.random.Generator) -> tuple[bool, str]:
    """Linear head with r = C: the AGOP basis spans the row space of W exactly."""
    c = int(rng.integers(2, 11))
    l = int(rng.integers(c + 1, 65))
    head = make_head(rng.standard_normal((c, l)))
    est = init_from_head(head, AgopConfig(alpha=0.1, tau=0.0, t_eig=1, rank=c))
    reference = sym_eig(head.w.T @ head.w).vectors[:, :c]
    for t in range(int(np.ceil(3 / est.alpha))):
        f = rng.standard_normal((16, l))
        est, _ = observe_batch(est, head, softmax(f @ head.w.T), f)
        similarity = subspace_similarity(refresh_basis(est), reference)
        if similarity < 1.0 - ALIGN_TOL:
            return False, f"alignment {similarity:.8f} at batch {t}"
    kappa = cumulative_spectral_energy(spectrum(est), c)
    if abs(kappa - 1.0) > KAPPA_TOL:
        return False, f"kappa(C) = {kappa:.10f}"
    return True, ""


def _trial_count(suite: str, trials: int) -> int:
    if suite == "gradient-check":
        return max(1, trials // 10)
    if suite == "agop-alignment":
        return max(1, trials // 50)
    return trials


def _run_trial(suite: str, suite_index: int, trial: int, seed: int, fault: str) -> TrialResult:
    trial_seed = [seed, suite_index, trial]
    rng = np.random.default_rng(trial_seed)
    if suite == "minimality":
        passed, detail = minimality_trial(rng, _solver(fault))
    elif suite == "rank-bound":
        passed, detail = rank_bound_trial(rng, _solver(fault))
    elif suite == "penrose":
        passed, detail = penrose_trial(rng)
    elif suite == "gradient-check":
        passed, detail = gradient_trial(rng)
    else:
        passed, detail = alignment_trial(rng)
    return TrialResult(suite=suite, trial=trial, seed=seed, passed=passed, detail=detail)


def run_oracles(
    trials: int = 200,
    seed: int = 0,
    fault: str = "none",
    threads: int | None = None,
    suites: tuple[str, ...] = SUITES,
) -> list[SuiteReport]:
    """Run every suite; trials are independent and ordered by index in the report."""
    if trials < 1:
        raise ConfigError(f"--trials must be positive, got {trials}")
    if fault not in FAULTS:
        raise ConfigError(f"unknown fault {fault!r}; choose from {FAULTS}")
    threads = oracle_threads() if threads is None else threads
    reports: list[SuiteReport] = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for suite in suites:
            index = SUITES.index(suite)
            futures = [
                pool.submit(_run_trial, suite, index, trial, seed, fault)
                for trial in range(_trial_count(suite, trials))
            ]
            results = sorted((f.result() for f in futures), key=lambda r: r.trial)
            report = SuiteReport(suite=suite, results=tuple(results))
            logger.info(
                "Oracle %s: %d/%d trials passed",
                suite,
                len(results) - len(report.failures),
                len(results),
            )
            reports.append(report)
    return reports


def format_table(reports: list[SuiteReport]) -> str:
    lines = [f"{'suite':<16} {'trials':>6} {'failed':>6}  status"]
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        lines.append(f"{report.suite:<16} {len(report.results):>6} {len(report.failures):>6}  {status}")
        for failure in report.failures[:3]:
            lines.append(f"  {report.suite} trial {failure.trial} (seed {failure.seed}): {failure.detail}")
    return "\n".join(lines)

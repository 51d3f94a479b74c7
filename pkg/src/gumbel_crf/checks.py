"""Oracle checks shared by the ``check`` command and the acceptance tests.

Every function returns a plain dict of measured quantities plus a
``passed`` flag computed against the thresholds passed in, so callers can
both gate on the flag and report the numbers.
"""

from __future__ import annotations

import math
import time
import zlib

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import estimators as est
from .crf_core import enumerate_posterior, entropy, forward, marginals, viterbi, backward, logsumexp
from .golden import GoldenInstance, verify_instance
from .sampling import GumbelNoiseStream, ffbs_many, gumbelized_ffbs_many, perturb_and_map_many

TAU_GRID = (1.0, 0.5, 0.1, 0.01)
BENCH_BUDGETS = (2, 4, 8, 16)
BENCH_TAUS = (1.0, 0.5)


def cell_stream(seed: int, *labels) -> GumbelNoiseStream:
    """Noise stream owned by one (seed, labels...) cell; independent of run order."""
    key = tuple(zlib.crc32(str(lab).encode()) for lab in labels)
    return GumbelNoiseStream(np.random.SeedSequence(seed, spawn_key=key))


def objective_for(inst: GoldenInstance) -> est.DownstreamObjective:
    return est.quadratic_objective(inst.T, inst.K, inst.objective_seed())


# -- exact DP --------------------------------------------------------------------


def registry_integrity(inst: GoldenInstance) -> dict:
    problems = verify_instance(inst)
    return {"check": "registry", "instance": inst.name, "passed": not problems, "problems": problems}


def dp_exactness(inst: GoldenInstance, tol_logz=1e-10, tol_marg=1e-10, tol_ent=1e-8) -> dict:
    pot = inst.table()
    post = enumerate_posterior(pot)
    fwd = forward(pot)
    lz_bwd = float(logsumexp(pot.log_initial + pot.log_emission[0] + backward(pot).log_beta[0]))
    logz_err = max(abs(fwd.log_Z - post.log_Z), abs(lz_bwd - post.log_Z))
    marg_err = float(np.max(np.abs(marginals(pot) - post.marginals(pot.K))))
    ent_err = abs(entropy(pot) - post.entropy())
    best = post.paths[int(np.argmax(post.log_probs))]
    vit_ok = bool(np.array_equal(np.array(viterbi(pot).states), best))
    return {
        "check": "dp_exactness",
        "instance": inst.name,
        "log_Z_error": logz_err,
        "marginal_error": marg_err,
        "entropy_error": ent_err,
        "viterbi_match": vit_ok,
        "passed": logz_err < tol_logz and marg_err < tol_marg and ent_err < tol_ent and vit_ok,
    }


# -- samplers --------------------------------------------------------------------


def _counts(post, paths, K):
    return np.bincount(post.index_of(paths, K), minlength=len(post.log_probs))


def chi_square_gof(observed: np.ndarray, probs: np.ndarray, min_expected: float = 5.0) -> tuple[float, int, int]:
    """Pearson goodness of fit with cells of expected count < ``min_expected``
    pooled into one; zero-probability cells are excluded and their hits
    returned separately. Returns ``(p_value, dof, impossible_hits)``."""
    n = observed.sum()
    possible = probs > 0
    impossible = int(observed[~possible].sum())
    obs, exp = observed[possible].astype(float), n * probs[possible]
    big = exp >= min_expected
    o, e = list(obs[big]), list(exp[big])
    if (~big).any():
        rest_o, rest_e = obs[~big].sum(), exp[~big].sum()
        if rest_e >= min_expected or not e:
            o.append(rest_o)
            e.append(rest_e)
        else:
            o[-1] += rest_o
            e[-1] += rest_e
    if len(o) < 2:
        return 1.0, 0, impossible
    res = stats.chisquare(np.array(o), np.array(e))
    return float(res.pvalue), len(o) - 1, impossible


def total_variation(post, paths, K) -> float:
    freq = _counts(post, paths, K) / len(paths)
    return float(0.5 * np.sum(np.abs(freq - post.probs)))


def sampler_exactness(inst: GoldenInstance, n: int = 100_000, seed: int = 0, alpha: float = 1e-3,
                      tau: float = 0.5) -> dict:
    pot = inst.table()
    post = enumerate_posterior(pot)
    trellis = forward(pot)
    hard = ffbs_many(pot, trellis, cell_stream(seed, "sampler", inst.name), n)
    g_hard, g_soft = gumbelized_ffbs_many(pot, trellis, cell_stream(seed, "sampler", inst.name), tau, n)
    p_ffbs, dof, bad_ffbs = chi_square_gof(_counts(post, hard, pot.K), post.probs)
    p_gumbel, _, bad_gumbel = chi_square_gof(_counts(post, g_hard, pot.K), post.probs)
    coupled = float(np.mean(np.argmax(g_soft, axis=2) == g_hard))
    identical = bool(np.array_equal(hard, g_hard))
    return {
        "check": "sampler_exactness",
        "instance": inst.name,
        "n": n,
        "p_value_ffbs": p_ffbs,
        "p_value_gumbelized": p_gumbel,
        "dof": dof,
        "impossible_hits": bad_ffbs + bad_gumbel,
        "tv_ffbs": total_variation(post, hard, pot.K),
        "coupling_fraction": coupled,
        "identical_hard_paths": identical,
        "passed": p_ffbs > alpha and p_gumbel > alpha and coupled == 1.0 and identical and bad_ffbs + bad_gumbel == 0,
    }


def temperature_limit(inst: GoldenInstance, n: int = 10_000, seed: int = 0, taus=TAU_GRID,
                      eps: float = 1e-3, required: float = 0.99) -> dict:
    """Deviation of relaxed FFBS paths from their hard paths over a temperature grid.

    The same noise block is reused for every temperature.
    """
    pot = inst.table()
    trellis = forward(pot)
    g = cell_stream(seed, "temperature", inst.name).gumbel((n, pot.T, pot.K))
    means, fracs = [], []
    for tau in taus:
        hard, soft = gumbelized_ffbs_many(pot, trellis, GumbelNoiseStream.fixed(g), tau, n)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, hard[..., None], 1.0, axis=2)
        dev = np.max(np.abs(soft - onehot), axis=(1, 2))
        means.append(float(np.mean(dev)))
        fracs.append(float(np.mean(dev < eps)))
    monotone = all(a >= b for a, b in zip(means, means[1:]))
    return {
        "check": "temperature_limit",
        "instance": inst.name,
        "taus": list(taus),
        "mean_deviation": means,
        "fraction_within_eps": fracs,
        "monotone": monotone,
        "fraction_at_smallest_tau": fracs[-1],
        "passed": monotone and fracs[-1] >= required,
    }


def pm_mrf_bias(inst: GoldenInstance, n: int | None = None, seed: int = 0) -> dict:
    bounds = inst.bounds
    n = int(n or bounds.get("n_samples", 100_000))
    pot = inst.table()
    post = enumerate_posterior(pot)
    pm = perturb_and_map_many(pot, cell_stream(seed, "pm_mrf", inst.name), n)
    ff = ffbs_many(pot, forward(pot), cell_stream(seed, "pm_mrf", inst.name), n)
    tv_pm, tv_ff = total_variation(post, pm, pot.K), total_variation(post, ff, pot.K)
    floor, ceiling = bounds["pm_mrf_tv_floor"], bounds["ffbs_tv_ceiling"]
    return {
        "check": "pm_mrf_bias",
        "instance": inst.name,
        "n": n,
        "tv_pm_mrf": tv_pm,
        "tv_ffbs": tv_ff,
        "tv_floor": floor,
        "tv_ceiling": ceiling,
        "passed": tv_pm > floor and tv_ff < ceiling,
    }


# -- estimators ------------------------------------------------------------------


def estimator_unbiasedness(inst: GoldenInstance, estimator: str, seed: int = 0, n_per_estimate: int = 5,
                           budget: int = 100_000, c: float = 1.0, z_max: float = 3.0) -> dict:
    """Component-wise z-tests of the averaged estimate against the oracle gradient.

    The standard error is the estimator's exact one, from enumeration. The
    spread of the sampled estimates is reported alongside but not tested:
    components driven by paths too rare to appear in ``budget`` draws have a
    near-zero sample spread and would give meaningless z-scores.
    """
    pot = inst.table()
    f = objective_for(inst)
    exact = est.exact_gradient(f, pot)
    cc = c if estimator == "reinforce_ms_c" else 0.0
    rep = est.run_estimator(
        estimator, f, pot, cell_stream(seed, "unbiased", inst.name, estimator),
        n_samples=n_per_estimate, c=c, replications=budget // n_per_estimate, oracle=exact,
    )
    se = np.sqrt(est.reinforce_ms_variance(f, pot, n_per_estimate, cc) / rep.n_estimates)
    diff = rep.mean - exact
    tiny = 1e-12 * max(1.0, float(np.max(np.abs(exact))))
    z = np.where(se > tiny, diff / np.maximum(se, tiny), np.where(np.abs(diff) > tiny, np.inf, 0.0))
    return {
        "check": "estimator_unbiasedness",
        "instance": inst.name,
        "estimator": estimator,
        "budget": rep.n_samples,
        "max_abs_z": float(np.max(np.abs(z))),
        "max_abs_z_sample_se": float(np.max(np.abs(rep.z_scores(exact)))),
        "failing_components": [int(i) for i in np.flatnonzero(np.abs(z) > z_max)],
        "bias_norm": rep.bias_norm,
        "seconds": rep.seconds,
        "passed": bool(np.all(np.abs(z) <= z_max)),
    }


def relaxed_finite_difference(inst: GoldenInstance, sampler: str, seed: int = 0, tau: float = 0.5,
                              tol: float = 1e-4, step: float = 1e-5) -> dict:
    """Tape gradient of a frozen-noise relaxed estimator vs central differences."""
    pot = inst.table()
    f = objective_for(inst)
    g = cell_stream(seed, "fd", inst.name, sampler).gumbel((1, pot.T, pot.K))
    fn = est.gumbel_crf if sampler == "ffbs" else est.pm_mrf
    rep = fn(f, pot, tau, 1, GumbelNoiseStream.fixed(g))
    vec = est.flatten_params(pot)
    fd = ad.finite_diff(lambda v: est.relaxed_objective(f, est.unflatten_params(v, pot.K, pot.T), g, tau, sampler),
                        [vec], step)[0]
    err = ad.relative_error(rep.mean, fd)
    return {"check": "relaxed_fd", "instance": inst.name, "sampler": sampler, "relative_error": err,
            "passed": err < tol}


def primitive_finite_differences(trials: int = 100, seed: int = 0, tol: float = 1e-6) -> dict:
    """Randomised central-difference checks of every differentiable primitive."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    failures: list[str] = []
    for trial in range(trials):
        for name, fn, shapes, kind in _PRIMITIVE_CASES:
            vals = [rng.standard_normal(s) for s in shapes]
            if kind == "positive":
                vals = [np.abs(v) + 0.5 for v in vals]
            w = rng.standard_normal(np.shape(fn(*[ad.constant(v) for v in vals]).value))

            def loss(*xs):
                return ad.sum(fn(*xs) * w)

            _, grads = ad.grad(loss, *vals)
            fd = ad.finite_diff(lambda *xs: loss(*[ad.constant(x) for x in xs]).value, vals, 1e-5)
            err = max(_fd_error(a, b, name) for a, b in zip(grads, fd))
            worst[name] = max(worst.get(name, 0.0), err)
            if err >= tol:
                failures.append(f"{name}#{trial}")
    return {"check": "primitive_fd", "trials": trials, "worst_error": worst, "failures": failures,
            "passed": not failures}


def _fd_error(a, b, name) -> float:
    if name == "tanh":
        # saturated inputs have tiny derivatives; compare absolutely there
        sat = np.abs(b) < 1e-2
        rel = ad.relative_error(a[~sat], b[~sat]) if (~sat).any() else 0.0
        ab = float(np.max(np.abs(a[sat] - b[sat]))) if sat.any() else 0.0
        return rel if ab < 1e-8 else max(rel, ab * 1e6)
    return ad.relative_error(a, b)


_PRIMITIVE_CASES = [
    ("add", lambda a, b: ad.add(a, b), [(3, 4), (3, 4)], "any"),
    ("sub", lambda a, b: ad.sub(a, b), [(3, 4), (4,)], "any"),
    ("mul", lambda a, b: ad.mul(a, b), [(2, 3, 4), (3, 4)], "any"),
    ("matmul", lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)], "any"),
    ("scalar_scale", lambda a: ad.scalar_scale(a, 1.7), [(5,)], "any"),
    ("tanh", lambda a: ad.tanh(a), [(4, 3)], "any"),
    ("exp", lambda a: ad.exp(a), [(4, 3)], "any"),
    ("log", lambda a: ad.log(a), [(4, 3)], "positive"),
    ("gather_row", lambda a: ad.gather_row(a, np.array([2, 0, 2])), [(4, 3)], "any"),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)], "any"),
    ("sum", lambda a: ad.sum(a, axis=1), [(3, 4)], "any"),
    ("mean", lambda a: ad.mean(a, axis=0), [(3, 4)], "any"),
    ("logsumexp_row", lambda a: ad.logsumexp_row(a), [(3, 5)], "any"),
    ("softmax_with_temperature", lambda a: ad.softmax_with_temperature(a, 0.7), [(3, 5)], "any"),
    ("log_softmax", lambda a: ad.log_softmax(a), [(2, 4)], "any"),
    ("transpose", lambda a: ad.transpose(a, (0, 2, 1)), [(2, 3, 4)], "any"),
    ("reshape", lambda a: ad.reshape(a, (4, 3)), [(2, 6)], "any"),
    ("stack", lambda a, b: ad.stack([a, b], axis=1), [(3, 2), (3, 2)], "any"),
    ("take", lambda a: ad.take(a, (np.array([0, 1, 1]), np.array([2, 0, 2]))), [(2, 3)], "any"),
    ("max_row", lambda a: ad.max_row(a), [(3, 5)], "any"),
]


# -- benchmark ---------------------------------------------------------------------


def variance_points(inst: GoldenInstance, seed: int = 0, budgets=BENCH_BUDGETS, taus=BENCH_TAUS,
                    replications: int = 2000, c: float = 1.0) -> list[dict]:
    """Variance ratios of every estimator at every (budget, tau) cell.

    Estimators in one (budget, tau) cell share a noise stream.
    """
    pot = inst.table()
    f = objective_for(inst)
    exact = est.exact_gradient(f, pot)
    rows = []
    for budget in budgets:
        for tau in taus:
            for name in est.ESTIMATORS:
                if name.startswith("reinforce") and budget < 2:
                    continue
                rep = est.run_estimator(name, f, pot, cell_stream(seed, "variance", inst.name, budget, tau),
                                        n_samples=budget, tau=tau, c=c, replications=replications, oracle=exact)
                rows.append({"instance": inst.name, "estimator": name, "seed": seed, "budget": budget,
                             "tau": tau if not name.startswith("reinforce") else None,
                             "r": rep.variance_ratio, "degenerate": rep.degenerate, "bias_norm": rep.bias_norm,
                             "seconds": rep.seconds, "report": rep})
    return rows


def variance_ordering(inst: GoldenInstance, seed: int = 0, required: float = 0.8, **kwargs) -> dict:
    """Fraction of (budget, tau, relaxed, score-function) points where the
    Gumbel-CRF estimator has the lower variance ratio."""
    rows = variance_points(inst, seed, **kwargs)
    table = {(r["estimator"], r["budget"], r["tau"]): r["r"] for r in rows}
    points = []
    for (name, budget, tau), r in table.items():
        if name not in ("gumbel_crf", "gumbel_crf_st"):
            continue
        for base in ("reinforce_ms", "reinforce_ms_c"):
            rb = table[(base, budget, None)]
            points.append({"relaxed": name, "baseline": base, "budget": budget, "tau": tau,
                           "r_relaxed": r, "r_baseline": rb, "below": bool(r < rb)})
    frac = float(np.mean([p["below"] for p in points]))
    return {"check": "variance_ordering", "instance": inst.name, "points": points, "fraction_below": frac,
            "passed": frac >= required, "rows": rows}


def budget_to_target(inst: GoldenInstance, seed: int = 0, tau: float = 1.0, budgets=(1, 2, 4, 8, 16, 32),
                     replications: int = 2000, c: float = 1.0) -> dict:
    """Smallest samples-per-estimate at which each estimator's variance
    ratio reaches the one-sample Gumbel-CRF value."""
    pot = inst.table()
    f = objective_for(inst)
    reports = {}
    for name in ("gumbel_crf", "gumbel_crf_st", "reinforce_ms", "reinforce_ms_c"):
        for b in budgets:
            if name.startswith("reinforce") and b < 2:
                continue
            reports[(name, b)] = est.run_estimator(name, f, pot, cell_stream(seed, "budget", inst.name, b),
                                                   n_samples=b, tau=tau, c=c, replications=replications)
    target = reports[("gumbel_crf", 1)].variance_ratio
    needed, per_estimate = {}, {}
    for (name, b), rep in sorted(reports.items(), key=lambda kv: kv[0][1]):
        per_estimate.setdefault(name, {})[b] = rep.seconds_per_estimate
        if name not in needed and not rep.degenerate and rep.variance_ratio <= target:
            needed[name] = rep.samples_per_estimate
    for name in ("gumbel_crf", "gumbel_crf_st", "reinforce_ms", "reinforce_ms_c"):
        needed.setdefault(name, None)
    ms_needed = [needed[n] for n in ("reinforce_ms", "reinforce_ms_c")]
    passed = needed["gumbel_crf"] == 1 and all(m is None or m >= 2 for m in ms_needed)
    return {
        "check": "budget_accounting",
        "instance": inst.name,
        "target_r": target,
        "samples_needed": needed,
        "seconds_per_estimate": per_estimate,
        "r": {f"{n}@{b}": rep.variance_ratio for (n, b), rep in reports.items()},
        "passed": passed,
    }


def timed(fn, *args, **kwargs) -> dict:
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    out["seconds"] = out.get("seconds", time.perf_counter() - start)
    return out


def json_safe(obj):
    """Recursively convert numpy scalars and NaN for JSON output."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items() if k not in ("report", "rows")}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj

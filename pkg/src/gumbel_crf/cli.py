"""Command-line entry point: ``check``, ``estimate``, ``train``, ``sample``.

Exit codes: 0 success, 1 a check failed (or training aborted), 2 bad
configuration or input.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checks, golden
from . import estimators as est
from . import vae
from .config import ConfigError, resolve, write
from .crf_core import PotentialTable, forward
from .data import generate_hmm_dataset
from .sampling import GumbelNoiseStream, ffbs, gumbelized_ffbs, perturbed_table, relaxed_viterbi

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
CSV_COLUMNS = ("estimator", "seed", "budget", "tau", "r", "bias_norm", "seconds")


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(fh, record, echo=None):
    line = json.dumps(checks.json_safe(record))
    fh.write(line + "\n")
    fh.flush()
    if echo is not None:
        echo(record)


# -- check -----------------------------------------------------------------------


def run_checks(cfg: dict):
    """Yield one result dict per oracle check."""
    c = cfg["check"]
    seed = cfg["seed"]
    reg = golden.load_registry(c["registry"])
    insts = list(reg.values())
    for g in insts:
        yield checks.registry_integrity(g)
    dp = [g for g in insts if g.kind == "dp"]
    for g in dp:
        yield checks.dp_exactness(g)
    for g in insts:
        yield checks.sampler_exactness(g, n=c["sampler_samples"], seed=seed)
    for g in insts:
        yield checks.temperature_limit(g, n=c["temperature_samples"], seed=seed)
    for g in insts:
        if g.kind == "adversarial":
            yield checks.pm_mrf_bias(g, seed=seed)
    for g in insts:
        for name in ("reinforce_ms", "reinforce_ms_c"):
            yield checks.estimator_unbiasedness(g, name, seed=seed, budget=c["estimator_budget"],
                                                n_per_estimate=c["samples_per_estimate"])
    for g in insts:
        if g.kind in ("estimator", "benchmark"):
            for sampler in ("ffbs", "viterbi"):
                yield checks.relaxed_finite_difference(g, sampler, seed=seed)
    yield checks.primitive_finite_differences(trials=c["fd_trials"], seed=seed)


def _check_label(r):
    parts = [r["check"]]
    for k in ("instance", "estimator", "sampler"):
        if k in r:
            parts.append(str(r[k]))
    return "/".join(parts)


def cmd_check(cfg) -> int:
    out = _out_dir(cfg)
    failed = []
    start = time.perf_counter()
    with open(out / "check.jsonl", "w") as fh:
        for r in run_checks(cfg):
            _emit(fh, r)
            label = _check_label(r)
            print(f"{'PASS' if r['passed'] else 'FAIL'} {label}")
            if not r["passed"]:
                failed.append(label)
    print(f"{len(failed)} failed checks in {time.perf_counter() - start:.1f}s")
    for name in failed:
        print(f"  failed: {name}")
    return EXIT_FAIL if failed else EXIT_OK


# -- estimate --------------------------------------------------------------------


def _estimate_cell(args):
    inst_name, registry, name, seed, budget, tau, replications, c = args
    inst = golden.get(inst_name, registry)
    pot = inst.table()
    f = checks.objective_for(inst)
    exact = est.exact_gradient(f, pot)
    stream = checks.cell_stream(seed, "estimate", inst_name, budget, tau)
    row = {"instance": inst_name, "estimator": name, "seed": seed, "budget": budget,
           "tau": None if name.startswith("reinforce") else tau}
    try:
        rep = est.run_estimator(name, f, pot, stream, n_samples=budget, tau=tau, c=c,
                                replications=replications, oracle=exact)
    except ValueError as exc:
        row["error"] = str(exc)
        return row, None
    return row, rep.to_dict()


def estimate_cells(cfg):
    e = cfg["estimate"]
    cells = []
    for inst in e["instances"]:
        for seed in e["seeds"]:
            for budget in sorted(e["budgets"]):
                for tau in e["taus"]:
                    for name in e["estimators"]:
                        if name.startswith("reinforce") and tau != e["taus"][0]:
                            continue  # temperature does not enter score-function estimators
                        cells.append((inst, cfg["check"]["registry"], name, seed, budget, tau,
                                      e["replications"], e["c"]))
    return cells


def cmd_estimate(cfg) -> int:
    out = _out_dir(cfg)
    cells = estimate_cells(cfg)
    reg = golden.load_registry(cfg["check"]["registry"])
    missing = [c[0] for c in cells if c[0] not in reg]
    if missing:
        raise ConfigError(f"unknown golden instances: {sorted(set(missing))}")
    workers = int(cfg["estimate"]["workers"])
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_estimate_cell, cells))
    else:
        results = [_estimate_cell(c) for c in cells]
    with open(out / "estimates.jsonl", "w") as fh, open(out / "variance.csv", "w", newline="") as ch:
        writer = csv.writer(ch)
        writer.writerow(("instance",) + CSV_COLUMNS + ("error",))
        for row, rep in results:
            record = dict(row)
            if rep is not None:
                record.update(rep)
            fh.write(json.dumps(checks.json_safe(record)) + "\n")
            r = None if rep is None else rep["variance_ratio"]
            bias = None if rep is None else rep["bias_norm"]
            secs = None if rep is None else rep["seconds"]
            writer.writerow([row["instance"], row["estimator"], row["seed"], row["budget"],
                             "" if row["tau"] is None else row["tau"],
                             "" if r is None else f"{r:.6f}", "" if bias is None else f"{bias:.6f}",
                             "" if secs is None else f"{secs:.4f}", row.get("error", "")])
            msg = row.get("error") or (f"r={r:.3f}" if r is not None else "r=degenerate")
            print(f"{row['instance']} {row['estimator']} budget={row['budget']} tau={row['tau']} {msg}")
    return EXIT_OK


# -- train -----------------------------------------------------------------------


_TRAIN_ONLY = {"K", "V", "T", "n", "n_valid", "n_test", "embed_dim", "hidden_dim", "init_scale", "data_seed"}


def train_config(cfg) -> vae.TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k not in _TRAIN_ONLY}
    return vae.TrainConfig(seed=cfg["seed"], snapshot_dir=str(Path(cfg["out"]) / "snapshots"), **t)


def run_training(cfg, log=None):
    """Generate the dataset, train, and evaluate on the test split."""
    t = cfg["train"]
    ds = generate_hmm_dataset(t["K"], t["V"], t["T"], t["n"] + t["n_valid"] + t["n_test"], t["data_seed"])
    train_x, valid_x, test_x = ds.split(t["n_valid"], t["n_test"])
    tc = train_config(cfg)
    theta = vae.GenerativeParams.init(t["K"], t["V"], t["embed_dim"], t["hidden_dim"], seed=cfg["seed"],
                                      scale=t["init_scale"])
    phi = vae.InferenceParams.init(t["K"], t["V"], t["embed_dim"], t["hidden_dim"], seed=cfg["seed"] + 1,
                                   scale=t["init_scale"])
    res = vae.train(theta, phi, train_x, tc, valid_x, log=log)
    noise = checks.cell_stream(cfg["seed"], "test-nll")
    test_nll = float(np.mean(vae.importance_nll(res.theta, res.phi, test_x, tc.nll_samples, noise)))
    oracle = ds.generator.nll(test_x)
    summary = {
        "best_epoch": res.best_epoch,
        "best_valid_nll": res.best_valid_nll,
        "test_nll_is": test_nll,
        "test_nll_oracle": oracle,
        "relative_gap": test_nll / oracle - 1.0,
    }
    return res, summary, tc


def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    write(cfg, out / "config.toml")
    with open(out / "trace.jsonl", "w") as fh:
        def log(rec):
            _emit(fh, rec)
            r = rec["variance_ratio"]
            print(f"epoch {rec['epoch']}: elbo={rec['elbo']:.3f} nll_is={rec['nll_is']:.3f} "
                  f"H={rec['entropy']:.3f} r={'nan' if r is None else f'{r:.2f}'} tau={rec['tau']:.3f}")

        try:
            res, summary, tc = run_training(cfg, log)
        except vae.TrainingAborted as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            return EXIT_FAIL
    vae.save_checkpoint(out / "checkpoint.json", res.theta, res.phi, tc, res.rng_state, extra=summary)
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"test IS-NLL {summary['test_nll_is']:.4f} vs oracle {summary['test_nll_oracle']:.4f} "
          f"({100 * summary['relative_gap']:+.2f}%)")
    return EXIT_OK


# -- sample ----------------------------------------------------------------------


def sample_lines(pot: PotentialTable, n: int, tau: float, samplers, seed: int) -> list[str]:
    trellis = forward(pot)
    lines = []
    fmt = lambda row: "[" + " ".join(f"{v:.6f}" for v in row) + "]"  # noqa: E731
    for name in samplers:
        noise = GumbelNoiseStream(seed)
        for i in range(n):
            if name == "ffbs":
                lines.append(f"ffbs {i}: {' '.join(map(str, ffbs(pot, trellis, noise)))}")
                continue
            if name == "gumbelized_ffbs":
                rp = gumbelized_ffbs(pot, trellis, noise, tau)
            else:
                rp = relaxed_viterbi(perturbed_table(pot, noise), tau)
            lines.append(f"{name} {i}: {' '.join(map(str, rp.hard))}")
            lines.extend(f"  {fmt(row)}" for row in rp.soft)
    return lines


def cmd_sample(cfg) -> int:
    s = cfg["sample"]
    if s["table"] is None:
        raise ConfigError("sample needs a potential table: set sample.table or pass --table")
    try:
        pot = PotentialTable.from_json(Path(s["table"]))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read potential table {s['table']}: {exc}") from None
    for line in sample_lines(pot, s["n"], s["tau"], s["samplers"], cfg["seed"]):
        print(line)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


COMMANDS = {"check": cmd_check, "estimate": cmd_estimate, "train": cmd_train, "sample": cmd_sample}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gumbel-crf", description="Structured sampling and gradient estimation for linear-chain CRFs")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--estimator", help=f"one of {', '.join(est.ESTIMATORS)}")
    p.add_argument("--tau", type=float, help="relaxation temperature")
    p.add_argument("--budget", type=int, help="samples per estimate (estimate) or draws (sample)")
    p.add_argument("--table", help="potential table JSON for the sample command")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve(args.config, args.seed, args.out, args.estimator, args.tau, args.budget)
        if args.table is not None:
            cfg["sample"]["table"] = args.table
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

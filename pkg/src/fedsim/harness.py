"""Configuration, CSV output, desk-scale experiment presets, and the CLI.

Subcommands:

  fedsim run --config cfg.json            one run per configured seed -> CSV
  fedsim experiment --preset NAME --out D --seeds K
  fedsim diagnose-weights --config cfg.json
  fedsim check-lemmas --n N --trials T
  fedsim compare FILES... [--assert-preset NAME]

Exit codes: 0 success, 2 configuration error, 3 divergence abort.
CSV columns: round,f_gap,dist_sq,grad_norm_sq,n_sampled,steps_total with
floats rendered at 17 significant digits so files round-trip exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .aggregation import (
    AggregationRule,
    consistency_restoring_weights,
    effective_weights,
)
from .algorithms import (
    DivergenceError,
    GenConfig,
    MomentumConfig,
    RunLog,
    StepSchedule,
    run,
)
from .problems import (
    DuplicatedQuadratic,
    Problem,
    QuadraticProblem,
    duplicated_quadratic,
    estimate_constants,
    importance_quadratic,
    make_logistic,
    quad_obj,
)
from .sampling import (
    SamplingScheme,
    SumOneNormalizer,
    UnbiasedNormalizer,
    general_variance_check,
    importance_scheme,
    m_constant,
    swr_variance_check,
    variance_bound_check,
)

__all__ = [
    "ConfigError",
    "load_config",
    "build_problem",
    "build_scheme",
    "build_run",
    "emit_csv",
    "read_csv",
    "compare_runs",
    "expand_preset",
    "check_lemmas",
    "main",
    "PRESET_NAMES",
    "CSV_HEADER",
]

CSV_HEADER = ["round", "f_gap", "dist_sq", "grad_norm_sq", "n_sampled", "steps_total"]
PRESET_NAMES = ("fig1_left", "fig1_momentum", "fig1_sum_one", "fig1_importance", "appF_hybrid")
SEED_ENV_VAR = "FEDSIM_SEED"


class ConfigError(Exception):
    """Unreadable, schema-violating, or semantically invalid configuration."""


_STEP_SCHEMA = {
    "oneOf": [
        {"type": "number", "exclusiveMinimum": 0},
        {
            "type": "object",
            "properties": {
                "eta0": {"type": "number", "exclusiveMinimum": 0},
                "decay_tau": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["eta0"],
            "additionalProperties": False,
        },
    ]
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "problem": {
            "type": "object",
            "properties": {
                "kind": {
                    "enum": [
                        "quad_obj",
                        "importance_quad",
                        "duplicated_quadratic",
                        "quadratic",
                        "logistic",
                    ]
                },
                "sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "anchors": {"type": "array"},
                "dim": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "algorithm": {
            "type": "object",
            "properties": {
                "preset": {
                    "enum": [
                        "fedshuffle",
                        "fedshuffle_so",
                        "fedavg_rr",
                        "fedavg_min",
                        "fedavg_mean",
                        "fednova_rr",
                        "fedshuffle_mvr",
                        "gen",
                    ]
                },
                "epochs": {
                    "oneOf": [
                        {"type": "integer", "minimum": 1},
                        {"type": "array", "items": {"type": "integer", "minimum": 1}},
                    ]
                },
                "c": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "w_tilde": {"type": "array", "items": {"type": "number"}},
                "q_rule": {"enum": ["unbiased", "sum_one"]},
                "restore_consistency": {"type": "boolean"},
                "a": {"type": "number", "minimum": 0, "maximum": 1},
                "init_rounds": {"type": "integer", "minimum": 0},
            },
            "required": ["preset"],
            "additionalProperties": False,
        },
        "sampling": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["full", "uniform_b", "independent", "one_client", "explicit"]},
                "b": {"type": "integer", "minimum": 1},
                "p": {"type": "array", "items": {"type": "number"}},
                "cohort": {"type": "number", "exclusiveMinimum": 0},
                "pi": {
                    "oneOf": [
                        {"type": "array", "items": {"type": "number"}},
                        {"enum": ["uniform", "weights"]},
                    ]
                },
                "subsets": {"type": "array"},
                "probs": {"type": "array", "items": {"type": "number"}},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "rounds": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "eta_l": _STEP_SCHEMA,
        "eta_g": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["none", "global", "mvr"]},
                "coeff": {"type": "number", "minimum": 0, "maximum": 1},
                "a": {"type": "number", "minimum": 0, "maximum": 1},
                "practical": {"type": "boolean"},
                "init_rounds": {"type": "integer", "minimum": 0},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "truncation": {
            "oneOf": [
                {"type": "integer", "minimum": 0},
                {"type": "array", "items": {"type": "integer", "minimum": 0}},
            ]
        },
        "output_path": {"type": "string"},
    },
    "required": ["problem", "algorithm", "sampling", "rounds", "eta_l", "output_path"],
    "additionalProperties": False,
}


def load_config(path) -> dict:
    """Parse and schema-validate a run configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config {path} violates the schema: {exc.message}") from exc
    return cfg


def build_problem(spec: dict) -> Problem:
    kind = spec["kind"]
    if kind == "quad_obj":
        return quad_obj()
    if kind == "importance_quad":
        return importance_quadratic()
    if kind == "duplicated_quadratic":
        if "sizes" not in spec:
            raise ConfigError("duplicated_quadratic needs sizes")
        if "anchors" in spec:
            return DuplicatedQuadratic(np.asarray(spec["anchors"], dtype=float), spec["sizes"])
        return duplicated_quadratic(spec["sizes"], dim=spec.get("dim"))
    if kind == "quadratic":
        if "anchors" in spec:
            return QuadraticProblem([np.asarray(a, dtype=float) for a in spec["anchors"]])
        if "sizes" not in spec or "dim" not in spec:
            raise ConfigError("random quadratic needs sizes and dim (or explicit anchors)")
        rng = np.random.default_rng(spec.get("seed", 0))
        anchors = [rng.standard_normal((m, spec["dim"])) for m in spec["sizes"]]
        return QuadraticProblem(anchors)
    if kind == "logistic":
        return make_logistic(
            seed=spec.get("seed", 0),
            samples_per_client=tuple(spec.get("sizes", (5, 7))),
            dim=spec.get("dim", 4),
        )
    raise ConfigError(f"unknown problem kind {kind!r}")


def build_scheme(spec: dict, problem: Problem) -> SamplingScheme:
    kind = spec["kind"]
    n = problem.n_clients
    try:
        if kind == "full":
            return SamplingScheme.full(n)
        if kind == "uniform_b":
            if "b" not in spec:
                raise ConfigError("uniform_b sampling needs b")
            return SamplingScheme.uniform(n, spec["b"])
        if kind == "independent":
            if "p" in spec:
                return SamplingScheme.independent(spec["p"])
            if "cohort" in spec:
                return importance_scheme(problem.weights, spec["cohort"])
            raise ConfigError("independent sampling needs p or cohort")
        if kind == "one_client":
            pi = spec.get("pi", "uniform")
            if pi == "uniform":
                pi = np.full(n, 1.0 / n)
            elif pi == "weights":
                pi = problem.weights
            return SamplingScheme.one_client(pi)
        if kind == "explicit":
            if "subsets" not in spec or "probs" not in spec:
                raise ConfigError("explicit sampling needs subsets and probs")
            return SamplingScheme.explicit(n, spec["subsets"], spec["probs"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown sampling kind {kind!r}")


def _step_schedule(spec) -> StepSchedule:
    if isinstance(spec, dict):
        return StepSchedule(spec["eta0"], spec.get("decay_tau"))
    return StepSchedule(float(spec))


def build_run(cfg: dict, seed: int) -> tuple[Problem, GenConfig]:
    """Assemble (problem, run configuration) for one master seed."""
    problem = build_problem(cfg["problem"])
    scheme = build_scheme(cfg["sampling"], problem)
    alg = cfg["algorithm"]
    preset = alg["preset"]
    eta_l = _step_schedule(cfg["eta_l"])
    eta_g = float(cfg.get("eta_g", 1.0))
    rounds = cfg["rounds"]
    epochs = alg.get("epochs", 1)
    truncation = cfg.get("truncation", 0)
    mom_spec = cfg.get("momentum", {"kind": "none"})
    momentum = MomentumConfig(
        kind=mom_spec["kind"],
        coeff=mom_spec.get("coeff", 0.9),
        a=mom_spec.get("a", 0.1),
        practical=mom_spec.get("practical", False),
        init_rounds=mom_spec.get("init_rounds", 0),
    )

    common = dict(rounds=rounds, eta_l=eta_l, eta_g=eta_g, epochs=epochs,
                  seed=seed, momentum=momentum)
    try:
        if preset == "fedshuffle":
            return problem, GenConfig.fedshuffle(problem, scheme, truncation=truncation, **common)
        if preset == "fedshuffle_so":
            return problem, GenConfig.fedshuffle(problem, scheme, truncation=truncation,
                                                 sum_one=True, **common)
        if preset == "fedavg_rr":
            return problem, GenConfig.fedavg_rr(problem, scheme, truncation=truncation, **common)
        if preset in ("fedavg_min", "fedavg_mean"):
            common.pop("momentum")
            return problem, GenConfig.fedavg_fixed(problem, scheme, preset.split("_")[1],
                                                   momentum=momentum, **common)
        if preset == "fednova_rr":
            return problem, GenConfig.fednova_rr(problem, scheme, truncation=truncation, **common)
        if preset == "fedshuffle_mvr":
            return problem, GenConfig.fedshuffle_mvr(
                problem, scheme, rounds=rounds, eta_l=eta_l, epochs=epochs, seed=seed,
                a=alg.get("a", 0.1), init_rounds=alg.get("init_rounds", 0),
            )
        if preset == "gen":
            return problem, _build_gen(alg, problem, scheme, rounds, eta_l, eta_g,
                                       epochs, truncation, momentum, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown algorithm preset {preset!r}")


def _build_gen(alg, problem, scheme, rounds, eta_l, eta_g, epochs, truncation,
               momentum, seed) -> GenConfig:
    n = problem.n_clients
    epochs_arr = np.broadcast_to(np.asarray(epochs, dtype=np.int64), (n,)).copy()
    c = np.asarray(alg.get("c", epochs_arr * problem.sizes), dtype=float)
    trunc_arr = np.broadcast_to(np.asarray(truncation, dtype=np.int64), (n,)).copy()
    if alg.get("restore_consistency", False):
        steps = epochs_arr * problem.sizes - trunc_arr
        w_tilde = consistency_restoring_weights(problem.weights, c, steps)
    else:
        w_tilde = np.asarray(alg.get("w_tilde", problem.weights), dtype=float)
    if alg.get("q_rule", "unbiased") == "sum_one":
        rule = AggregationRule.gen(w_tilde, SumOneNormalizer(problem.weights,
                                                             scale=scheme.expected_cohort / n))
    else:
        rule = AggregationRule.unbiased(w_tilde)
    return GenConfig(name="fedshufflegen", rounds=rounds, scheme=scheme, rule=rule,
                     c=c, epochs=epochs_arr, eta_l=eta_l, eta_g=eta_g,
                     momentum=momentum, truncation=trunc_arr, master_seed=seed)


# -- CSV --


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def emit_csv(run_log: RunLog, path) -> None:
    """Write one row per round; deterministic byte-for-byte for identical runs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(CSV_HEADER)]
    for rec in run_log.records:
        lines.append(
            ",".join(
                [
                    str(rec.round_index),
                    _fmt(rec.f_gap),
                    _fmt(rec.dist_sq),
                    _fmt(rec.grad_norm_sq),
                    str(len(rec.sampled)),
                    str(rec.steps_total),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV schema {reader.fieldnames}")
        return [
            {
                "round": int(row["round"]),
                "f_gap": float(row["f_gap"]),
                "dist_sq": float(row["dist_sq"]),
                "grad_norm_sq": float(row["grad_norm_sq"]),
                "n_sampled": int(row["n_sampled"]),
                "steps_total": int(row["steps_total"]),
            }
            for row in reader
        ]


def compare_runs(paths) -> list[dict]:
    """Final and best f_gap (and final dist_sq) per method, sorted by final f_gap.

    Files named `<method>_seed<k>.csv` are grouped by method and their metrics
    averaged, so the summary reflects seed-averaged behavior.
    """
    if len(paths) < 2:
        raise ValueError("compare needs at least two CSV files")
    by_method: dict[str, list[dict]] = {}
    lengths = set()
    for path in paths:
        data = read_csv(path)
        if not data:
            raise ValueError(f"{path}: no rounds recorded")
        lengths.add(len(data))
        by_method.setdefault(_method_of(path), []).append(
            {
                "final_f_gap": data[-1]["f_gap"],
                "best_f_gap": min(d["f_gap"] for d in data),
                "final_dist_sq": data[-1]["dist_sq"],
            }
        )
    if len(lengths) != 1:
        raise ValueError(f"round counts differ across files: {sorted(lengths)}")
    rows = [
        {
            "method": method,
            "runs": len(group),
            "final_f_gap": float(np.mean([g["final_f_gap"] for g in group])),
            "best_f_gap": float(np.mean([g["best_f_gap"] for g in group])),
            "final_dist_sq": float(np.mean([g["final_dist_sq"] for g in group])),
        }
        for method, group in by_method.items()
    ]
    return sorted(rows, key=lambda r: r["final_f_gap"])


def _method_of(path) -> str:
    stem = Path(path).stem
    return stem.split("_seed")[0] if "_seed" in stem else stem


# -- experiment presets --


def _quad_constants(problem: Problem):
    probes = [np.zeros(problem.dim), np.ones(problem.dim),
              problem.weights @ problem.client_means]
    return estimate_constants(problem, probes)


def _theorem_steps(problem, scheme, eta_g: float, epochs: int):
    """Per-method admissible local steps for the c-normalized parametrizations.

    Returns (eta_fedshuffle, eta_unscaled): the former is the bound on the
    nominal step under c_i = E_i |D_i| scaling, the latter the per-step bound
    for the unscaled (c_i = 1) methods, which must survive the client with the
    most local work.
    """
    consts = _quad_constants(problem)
    M = m_constant(scheme, problem.weights)
    bound = 1.0 / (4.0 * consts.beta(M) * consts.L * eta_g)
    c_max = float(np.max(epochs * problem.sizes))
    return bound, bound / c_max


def expand_preset(name: str, seeds, rounds: int | None = None):
    """Expand a named experiment to (method, seed, problem, config) runs."""
    if name == "fig1_left" or name == "fig1_momentum":
        momentum = (
            MomentumConfig(kind="global", coeff=0.9)
            if name == "fig1_momentum"
            else MomentumConfig()
        )
        problem = quad_obj()
        scheme = SamplingScheme.full(problem.n_clients)
        R = rounds or 2000
        eta_fs, eta_avg = _theorem_steps(problem, scheme, 1.0, 1)
        sched_fs = StepSchedule(eta_fs, decay_tau=R / 10)
        sched_avg = StepSchedule(eta_avg, decay_tau=R / 10)
        for seed in seeds:
            yield "fedavg_rr", seed, problem, GenConfig.fedavg_rr(
                problem, scheme, rounds=R, eta_l=sched_avg, seed=seed, momentum=momentum)
            yield "fedavg_min", seed, problem, GenConfig.fedavg_fixed(
                problem, scheme, "min", rounds=R, eta_l=sched_avg, seed=seed, momentum=momentum)
            yield "fedavg_mean", seed, problem, GenConfig.fedavg_fixed(
                problem, scheme, "mean", rounds=R, eta_l=sched_avg, seed=seed, momentum=momentum)
            yield "fednova_rr", seed, problem, GenConfig.fednova_rr(
                problem, scheme, rounds=R, eta_l=sched_avg, seed=seed, momentum=momentum)
            yield "fedshuffle", seed, problem, GenConfig.fedshuffle(
                problem, scheme, rounds=R, eta_l=sched_fs, seed=seed, momentum=momentum)
    elif name == "fig1_sum_one":
        problem = quad_obj()
        scheme = SamplingScheme.uniform(problem.n_clients, 2)
        R = rounds or 5000
        eta_fs, _ = _theorem_steps(problem, scheme, 1.0, 1)
        sched = StepSchedule(eta_fs, decay_tau=250)
        for seed in seeds:
            yield "fedshuffle", seed, problem, GenConfig.fedshuffle(
                problem, scheme, rounds=R, eta_l=sched, seed=seed)
            yield "fedshuffle_so", seed, problem, GenConfig.fedshuffle(
                problem, scheme, rounds=R, eta_l=sched, seed=seed, sum_one=True)
    elif name == "fig1_importance":
        problem = importance_quadratic()
        uniform = SamplingScheme.uniform(problem.n_clients, 1)
        importance = importance_scheme(problem.weights, 1.0)
        R = rounds or 2000
        eta_uni, _ = _theorem_steps(problem, uniform, 1.0, 1)
        eta_imp, _ = _theorem_steps(problem, importance, 1.0, 1)
        for seed in seeds:
            yield "fedshuffle_uniform", seed, problem, GenConfig.fedshuffle(
                problem, uniform, rounds=R, eta_l=StepSchedule(eta_uni, decay_tau=R / 4),
                seed=seed, name="fedshuffle_uniform")
            yield "fedshuffle_importance", seed, problem, GenConfig.fedshuffle(
                problem, importance, rounds=R, eta_l=StepSchedule(eta_imp, decay_tau=R / 4),
                seed=seed, name="fedshuffle_importance")
    elif name == "appF_hybrid":
        problem = quad_obj()
        scheme = SamplingScheme.full(problem.n_clients)
        R = rounds or 3000
        epochs = 2  # one spare step so a truncation of 1 leaves every client work
        eta_fs, eta_avg = _theorem_steps(problem, scheme, 1.0, epochs)
        sched_fs = StepSchedule(eta_fs, decay_tau=250)
        sched_avg = StepSchedule(eta_avg, decay_tau=250)
        c = epochs * problem.sizes
        steps = epochs * problem.sizes - 1
        w_restored = consistency_restoring_weights(problem.weights, c, steps)
        for seed in seeds:
            yield "fednova_rr", seed, problem, GenConfig.fednova_rr(
                problem, scheme, rounds=R, eta_l=sched_avg, epochs=epochs,
                truncation=1, seed=seed)
            yield "fedshuffle", seed, problem, GenConfig.fedshuffle(
                problem, scheme, rounds=R, eta_l=sched_fs, epochs=epochs,
                truncation=1, seed=seed)
            yield "fedshufflegen", seed, problem, GenConfig(
                name="fedshufflegen", rounds=R, scheme=scheme,
                rule=AggregationRule.unbiased(w_restored), c=c, epochs=epochs,
                eta_l=sched_fs, truncation=1, master_seed=seed)
    else:
        raise ConfigError(f"unknown experiment preset {name!r}")


PRESET_EXPECTED_ORDER = {
    # Asserted partial order on mean final f_gap (earlier <= later).
    "fig1_left": ("fedshuffle", "fednova_rr", "fedavg_rr"),
    "fig1_momentum": (),
    "fig1_importance": ("fedshuffle_importance", "fedshuffle_uniform"),
    "fig1_sum_one": (),
    "appF_hybrid": (),
}


def assert_preset_order(name: str, summaries: list[dict]) -> None:
    """Check a preset's expected method ordering on the compare summary."""
    if name == "fig1_sum_one":
        by_method = {s["method"]: s for s in summaries}
        if not by_method["fedshuffle"]["final_dist_sq"] < by_method["fedshuffle_so"]["final_dist_sq"]:
            raise AssertionError("unbiased aggregation did not beat sum-one on final dist_sq")
        return
    order = PRESET_EXPECTED_ORDER.get(name, ())
    by_method = {s["method"]: s for s in summaries}
    for earlier, later in zip(order, order[1:]):
        if earlier in by_method and later in by_method:
            if not by_method[earlier]["final_f_gap"] <= by_method[later]["final_f_gap"]:
                raise AssertionError(
                    f"{earlier} final f_gap {by_method[earlier]['final_f_gap']:.3e} exceeds "
                    f"{later} {by_method[later]['final_f_gap']:.3e}"
                )


# -- lemma checks --


def check_lemmas(n: int = 5, trials: int = 100, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Exact-enumeration verification of the variance bounds at desk scale."""
    rng = np.random.default_rng(seed)
    n = int(n)
    if not 2 <= n <= 10:
        raise ValueError("check-lemmas supports 2 <= n <= 10")
    schemes = [
        SamplingScheme.full(n),
        SamplingScheme.uniform(n, max(1, n // 2)),
        SamplingScheme.independent(rng.uniform(0.2, 0.9, size=n)),
        SamplingScheme.one_client(np.full(n, 1.0 / n)),
    ]
    results = []

    worst = 0.0
    ok = True
    for _ in range(trials):
        zetas = rng.standard_normal((n, 3))
        w = rng.uniform(0.1, 1.0, size=n)
        w /= w.sum()
        for scheme in schemes:
            lhs, rhs = variance_bound_check(zetas, w, scheme)
            worst = max(worst, lhs - rhs)
            ok = ok and lhs <= rhs + 1e-10
    results.append(("variance_arbitrary_sampling", ok, f"max lhs-rhs = {worst:.3e}"))

    worst = 0.0
    ok = True
    for _ in range(trials):
        zetas = rng.standard_normal((n, 3))
        for k in range(1, n + 1):
            emp, formula = swr_variance_check(zetas, k)
            worst = max(worst, abs(emp - formula))
            ok = ok and abs(emp - formula) <= 1e-10
    results.append(("sampling_without_replacement", ok, f"max |emp-formula| = {worst:.3e}"))

    worst = 0.0
    ok = True
    for t in range(trials):
        zetas = rng.standard_normal((n, 3))
        w = rng.uniform(0.1, 1.0, size=n)
        w /= w.sum()
        for scheme in schemes:
            for normalizer in (UnbiasedNormalizer(), SumOneNormalizer(w)):
                lhs, rhs = general_variance_check(zetas, w, scheme, normalizer)
                worst = max(worst, lhs - rhs)
                ok = ok and lhs <= rhs + 1e-10
    results.append(("variance_general_normalizer", ok, f"max lhs-rhs = {worst:.3e}"))
    return results


# -- CLI --


def _default_seeds(cfg: dict, override: int | None) -> list[int]:
    if override is not None:
        return [override]
    if "seeds" in cfg:
        return list(cfg["seeds"])
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return [int(env)]
    return [0]


def _seeded_path(path: str, seed: int, multiple: bool) -> Path:
    p = Path(path)
    if not multiple:
        return p
    return p.with_name(f"{p.stem}_seed{seed}{p.suffix}")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    seeds = _default_seeds(cfg, args.seed)
    for seed in seeds:
        problem, config = build_run(cfg, seed)
        log = run(config, problem, parallel=args.parallel)
        out = _seeded_path(cfg["output_path"], seed, len(seeds) > 1)
        emit_csv(log, out)
        print(f"wrote {out} ({len(log.records)} rounds, final f_gap {log.final_f_gap:.6g})")
    return 0


def _cmd_experiment(args) -> int:
    seeds = list(range(args.seeds)) if args.seed is None else [args.seed + k for k in range(args.seeds)]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for method, seed, problem, config in expand_preset(args.preset, seeds, args.rounds):
        log = run(config, problem, parallel=args.parallel)
        out = outdir / f"{method}_seed{seed}.csv"
        emit_csv(log, out)
        print(f"wrote {out}")
    return 0


def _cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    seeds = _default_seeds(cfg, args.seed)
    problem, config = build_run(cfg, seeds[0])
    normalizer = config.rule.normalizer
    eff = effective_weights(config.w_tilde, config.c, problem.sizes, config.epochs,
                            config.scheme, normalizer,
                            steps=config.epochs * problem.sizes - config.truncation)
    lines = ["client_id,w,w_hat"]
    for i in range(problem.n_clients):
        lines.append(f"{i},{_fmt(problem.weights[i])},{_fmt(eff.w_hat[i])}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_check_lemmas(args) -> int:
    failures = 0
    for name, ok, detail in check_lemmas(args.n, args.trials, args.seed or 0):
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name} ({detail})")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 1


def _cmd_compare(args) -> int:
    summaries = compare_runs(args.files)
    print(f"{'method':<26}{'runs':>6}{'final f_gap':>16}{'best f_gap':>16}{'final dist_sq':>16}")
    for s in summaries:
        print(
            f"{s['method']:<26}{s['runs']:>6}{s['final_f_gap']:>16.6e}"
            f"{s['best_f_gap']:>16.6e}{s['final_dist_sq']:>16.6e}"
        )
    if args.assert_preset:
        try:
            assert_preset_order(args.assert_preset, summaries)
        except AssertionError as exc:
            print(f"ordering for {args.assert_preset}: FAIL ({exc})", file=sys.stderr)
            return 1
        print(f"ordering for {args.assert_preset}: OK")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim",
                                     description="Deterministic federated-optimization simulator")
    parser.add_argument("--seed", type=int, default=None,
                        help=f"master seed override (also {SEED_ENV_VAR} env var)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a JSON-configured run")
    p.add_argument("--config", required=True)
    p.add_argument("--parallel", action="store_true", help="run clients in threads")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("experiment", help="run a named experiment preset")
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(fn=_cmd_experiment)

    p = sub.add_parser("diagnose-weights", help="emit effective weights as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_diagnose)

    p = sub.add_parser("check-lemmas", help="verify the variance bounds by enumeration")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(fn=_cmd_check_lemmas)

    p = sub.add_parser("compare", help="summarize and order finished run CSVs")
    p.add_argument("files", nargs="+")
    p.add_argument("--assert-preset", default=None, choices=PRESET_NAMES,
                   help="assert the preset's expected method ordering")
    p.set_defaults(fn=_cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

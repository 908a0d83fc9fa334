"""Config-driven experiment runner.

Configs are JSON. Field names follow the usual symbols of the model:
``a``, ``Q``, ``p`` (drop table), ``lambda`` (transmission costs), ``beta``,
``k_max``, ``N``, ``c``, ``iterations``. See ``configs/`` for examples.

Every run writes CSV results plus ``summary.json``, which embeds the full
resolved config so that ``remest <workflow> --config summary.json`` repeats
the run exactly.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dp, pomdp
from .model import (
    ArSourceSpec,
    ChannelSpec,
    CostSpec,
    ModelSpec,
    NoiseSpec,
    ThresholdPolicy,
    validate_model,
)
from .rmc import AdamParams, RmcConfig, optimize
from .sim import SimConfig, run_cycles

log = logging.getLogger("remest")

WORKFLOWS = ("evaluate", "optimize", "dp", "pomdp", "table1")
DISTORTION_NOTE = "distortion d(e) = |e|^p with p = {p} (the Gilbert-Elliott example does not state d; e^2 assumed)"


class ConfigError(ValueError):
    pass


@dataclass
class MultiChannelConfig:
    channels: list  # [(lambda_i, p_i)] for i = 1..m

    def violations(self) -> list[str]:
        out = []
        lam = [0.0] + [c[0] for c in self.channels]
        p = [1.0] + [c[1] for c in self.channels]
        for i in range(1, len(lam)):
            if lam[i] < lam[i - 1]:
                out.append(f"multichannel list not ordered: lambda({i})={lam[i]} < lambda({i - 1})={lam[i - 1]}")
            if p[i] > p[i - 1]:
                out.append(f"multichannel list not ordered: p({i})={p[i]} > p({i - 1})={p[i - 1]}")
        return out


def expand_multichannel(mc: MultiChannelConfig) -> ChannelSpec:
    """Single-state channel whose power level ``i`` means "use channel ``i``"."""
    m = len(mc.channels)
    return ChannelSpec(
        Q=[[1.0]],
        power_levels=np.arange(m + 1, dtype=float),
        drop=[[1.0] + [float(c[1]) for c in mc.channels]],
        tx_cost=[0.0] + [float(c[0]) for c in mc.channels],
    )


@dataclass
class ExperimentConfig:
    workflow: str
    raw: dict
    seed: int = 0
    replications: int = 1
    output_dir: str = "out"
    model: ModelSpec | None = None
    channel: ChannelSpec | None = None
    policy: ThresholdPolicy | None = None
    sim: SimConfig | None = None
    rmc: RmcConfig | None = None
    rmc_k0: ThresholdPolicy | None = None
    eval_cycles: int = 100_000
    grid: dp.GridSpec | None = None
    dp_tol: float = 1e-8
    dp_max_iters: int = 10_000
    dp_horizon: int | None = None
    pomdp_source: pomdp.FiniteSourceSpec | None = None
    pomdp_T: int = 2
    pomdp_prior: np.ndarray | None = None
    pomdp_state: int = 0
    table1_lambdas: list = field(default_factory=list)


# -- parsing -----------------------------------------------------------------


def _get(d: dict, key: str, path: str, default=...):
    if key in d:
        return d[key]
    if default is ...:
        raise ConfigError(f"missing field '{path}{key}'")
    return default


def _matrix(value, path: str, rows: int | None = None) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{path}' is not a numeric matrix: {exc}") from None
    if arr.ndim != 2:
        raise ConfigError(f"field '{path}' must be a 2-D list, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ConfigError(f"field '{path}' must have {rows} rows, got {arr.shape[0]}")
    return arr


def _parse_channel(m: dict) -> ChannelSpec:
    if "multichannel" in m:
        entries = m["multichannel"]
        try:
            mc = MultiChannelConfig([(float(e["lambda"]), float(e["p"])) for e in entries])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"field 'model.multichannel' entries need 'lambda' and 'p': {exc}") from None
        problems = mc.violations()
        if problems:
            raise ConfigError("; ".join(problems))
        return expand_multichannel(mc)
    Q = _matrix(_get(m, "Q", "model."), "model.Q")
    if Q.shape[0] != Q.shape[1]:
        raise ConfigError(f"field 'model.Q' must be square, got shape {Q.shape}")
    p = _matrix(_get(m, "p", "model."), "model.p", rows=Q.shape[0])
    lam = np.array(_get(m, "lambda", "model."), dtype=float)
    levels = np.array(m.get("power_levels", np.arange(p.shape[1])), dtype=float)
    if lam.shape != (p.shape[1],):
        raise ConfigError(f"field 'model.lambda' must have {p.shape[1]} entries (one per power level)")
    if levels.shape != (p.shape[1],):
        raise ConfigError(f"field 'model.power_levels' must have {p.shape[1]} entries")
    return ChannelSpec(Q=Q, power_levels=levels, drop=p, tx_cost=lam)


def _parse_noise(n: dict) -> NoiseSpec:
    kind = _get(n, "kind", "model.noise.")
    if kind == "gaussian":
        return NoiseSpec.gaussian(float(n.get("sigma", 1.0)))
    if kind == "discrete":
        return NoiseSpec.discrete(_get(n, "support", "model.noise."), _get(n, "pmf", "model.noise."))
    raise ConfigError(f"field 'model.noise.kind' must be 'gaussian' or 'discrete', got {kind!r}")


def _parse_cost(m: dict) -> CostSpec:
    beta = float(_get(m, "beta", "model."))
    dist = m.get("distortion", {"kind": "power", "p": 2.0})
    kind = dist.get("kind", "power")
    if kind == "power":
        return CostSpec(beta=beta, distortion="power", power=float(dist.get("p", 2.0)))
    if kind == "table":
        return CostSpec(
            beta=beta,
            distortion="table",
            table_x=_get(dist, "x", "model.distortion."),
            table_y=_get(dist, "y", "model.distortion."),
        )
    raise ConfigError(f"field 'model.distortion.kind' must be 'power' or 'table', got {kind!r}")


def _parse_model(m: dict) -> ModelSpec:
    channel = _parse_channel(m)
    noise = _parse_noise(m.get("noise", {"kind": "gaussian", "sigma": 1.0}))
    return ModelSpec(
        source=ArSourceSpec(a=float(_get(m, "a", "model.")), noise=noise),
        channel=channel,
        cost=_parse_cost(m),
        reference_state=int(m.get("reference_state", 0)),
    )


def _parse_policy(k, path, model: ModelSpec) -> ThresholdPolicy:
    try:
        pol = ThresholdPolicy(np.array(k, dtype=float).reshape(model.channel.num_states, -1))
    except ValueError as exc:
        raise ConfigError(f"field '{path}': {exc}") from None
    problems = validate_model(model, pol)
    if problems:
        raise ConfigError(f"field '{path}': " + "; ".join(problems))
    return pol


def config_from_dict(data: dict, workflow: str | None = None) -> ExperimentConfig:
    if "config" in data and "results" in data:
        data = data["config"]
    data = json.loads(json.dumps(data))  # private deep copy
    wf = workflow or data.get("workflow")
    if wf is None:
        raise ConfigError("missing field 'workflow'")
    if wf not in WORKFLOWS:
        raise ConfigError(f"field 'workflow' must be one of {WORKFLOWS}, got {wf!r}")
    data["workflow"] = wf
    cfg = ExperimentConfig(
        workflow=wf,
        raw=data,
        seed=int(data.get("seed", 0)),
        replications=int(data.get("replications", 1)),
        output_dir=str(data.get("output_dir", "out")),
    )
    if cfg.replications < 1:
        raise ConfigError("field 'replications' must be >= 1")
    mdict = _get(data, "model", "")
    if wf == "pomdp":
        cfg.channel = _parse_channel(mdict)
        problems = cfg.channel.violations()
    else:
        cfg.model = _parse_model(mdict)
        cfg.channel = cfg.model.channel
        problems = validate_model(cfg.model)
    if problems:
        raise ConfigError("model validation failed: " + "; ".join(problems))

    if wf == "evaluate":
        pdict = _get(data, "policy", "")
        cfg.policy = _parse_policy(_get(pdict, "k", "policy."), "policy.k", cfg.model)
        s = data.get("sim", {})
        cfg.sim = SimConfig(
            n_cycles=int(s.get("N", 100_000)),
            max_cycle_len=int(s.get("max_cycle_len", 1_000_000)),
            seed=cfg.seed,
            discount_cutoff=float(s.get("discount_cutoff", 1e-12)),
        )
    if wf in ("optimize", "table1"):
        r = data.get("rmc", {})
        a = r.get("adam", {})
        cfg.rmc = RmcConfig(
            n_cycles_per_estimate=int(r.get("N", 1000)),
            perturb_scale=float(r.get("c", 0.1)),
            perturb_dist=str(r.get("perturb_dist", "normal")),
            iterations=int(r.get("iterations", 30_000)),
            adam=AdamParams(
                alpha=float(a.get("alpha", 0.1)),
                beta1=float(a.get("beta1", 0.9)),
                beta2=float(a.get("beta2", 0.999)),
                epsilon=float(a.get("epsilon", 1e-8)),
            ),
            k_max=float(r.get("k_max", 50.0)),
            seed=cfg.seed,
            max_cycle_len=int(r.get("max_cycle_len", 1_000_000)),
            discount_cutoff=float(r.get("discount_cutoff", 1e-12)),
            trace_every=int(r.get("trace_every", 1)),
        )
        cfg.eval_cycles = int(r.get("eval_N", 100_000))
        if "k0" in r:
            cfg.rmc_k0 = _parse_policy(r["k0"], "rmc.k0", cfg.model)
    if wf == "dp":
        g = data.get("grid", {})
        cfg.grid = dp.GridSpec(
            e_max=float(g.get("e_max", 30.0)),
            n_points=int(g.get("n_points", 601)),
            noise_truncation=float(g.get("noise_truncation", 1e-3)),
        )
        cfg.dp_tol = float(g.get("tol", 1e-8))
        cfg.dp_max_iters = int(g.get("max_iters", 10_000))
        cfg.dp_horizon = g.get("horizon")
    if wf == "pomdp":
        pd = _get(data, "pomdp", "")
        P = _matrix(_get(pd, "P", "pomdp."), "pomdp.P")
        d = _matrix(_get(pd, "d", "pomdp."), "pomdp.d")
        try:
            cfg.pomdp_source = pomdp.FiniteSourceSpec(P, d)
        except ValueError as exc:
            raise ConfigError(f"field 'pomdp': {exc}") from None
        cfg.pomdp_T = int(pd.get("T", 2))
        prior = pd.get("prior")
        n = cfg.pomdp_source.n_symbols
        cfg.pomdp_prior = np.full(n, 1.0 / n) if prior is None else np.array(prior, dtype=float)
        cfg.pomdp_state = int(pd.get("initial_state", 0))
    if wf == "table1":
        t = data.get("table1", {})
        cfg.table1_lambdas = [float(x) for x in t.get("lambda1", [50.0, 100.0, 200.0])]
    return cfg


def load_config(path, workflow: str | None = None) -> ExperimentConfig:
    """Parse and validate a JSON experiment config (or a previous run's ``summary.json``)."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(data, workflow)


# -- output helpers ------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.chmod(tmp, 0o644)
    os.replace(tmp, path)


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _write_atomic(path, buf.getvalue())


def replication_seeds(seed: int, n: int, *key) -> list[int]:
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return [int(c.generate_state(1, np.uint64)[0]) for c in ss.spawn(n)]


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _two_sigma(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(2 * v.std(ddof=1)) if len(v) > 1 else 0.0


# -- workflows -------------------------------------------------------------------


def _evaluate(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    seeds = replication_seeds(cfg.seed, cfg.replications)

    def one(sd):
        est = run_cycles(cfg.model, cfg.policy, SimConfig(**{**asdict(cfg.sim), "seed": sd}), workers=1)
        return sd, est

    results = _map(one, seeds, workers)
    header = ["replication", "seed", *results[0][1].as_row().keys()]
    rows = [[i, sd, *est.as_row().values()] for i, (sd, est) in enumerate(results)]
    write_csv(out / "evaluate.csv", header, rows)
    c = [est.c_hat for _, est in results]
    return {"C_mean": float(np.mean(c)), "C_2sigma": _two_sigma(c), "estimates": [est.as_row() for _, est in results]}


def _optimize_one(model, k0, rmc_cfg: RmcConfig, eval_cycles: int, seed: int):
    run_cfg = RmcConfig(**{**asdict(rmc_cfg), "adam": rmc_cfg.adam, "seed": seed})
    k_final, trace = optimize(model, k0, run_cfg)
    eval_seed = replication_seeds(seed, 1, 1)[0]
    est = run_cycles(model, k_final, SimConfig(n_cycles=eval_cycles, seed=eval_seed, max_cycle_len=rmc_cfg.max_cycle_len, discount_cutoff=rmc_cfg.discount_cutoff))
    return k_final, trace, est


def _optimize(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    seeds = replication_seeds(cfg.seed, cfg.replications)
    S = cfg.model.channel.num_states
    results = _map(lambda sd: _optimize_one(cfg.model, cfg.rmc_k0, cfg.rmc, cfg.eval_cycles, sd), seeds, workers)
    rows = []
    for i, (sd, (k, trace, est)) in enumerate(zip(seeds, results)):
        write_csv(out / f"trace_r{i}.csv", trace.header(S), trace.rows())
        rows.append([i, sd, *k.as_vector().tolist(), est.l_hat, est.m_hat, est.c_hat, est.se_c])
    knames = results[0][1].header(S)[1 : 1 + S * cfg.model.channel.m]
    write_csv(out / "optimize.csv", ["replication", "seed", *knames, "L_hat", "M_hat", "C_hat", "se_C"], rows)
    return {
        "final_thresholds": [k.k.tolist() for k, _, _ in results],
        "C": [est.c_hat for _, _, est in results],
        "C_mean": float(np.mean([est.c_hat for _, _, est in results])),
        "C_2sigma": _two_sigma([est.c_hat for _, _, est in results]),
        "distortion": DISTORTION_NOTE.format(p=cfg.model.cost.power) if cfg.model.cost.distortion == "power" else "tabulated",
    }


def _dp(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    if cfg.dp_horizon is not None:
        stages = dp.solve_finite_horizon(cfg.model, cfg.grid, int(cfg.dp_horizon))
        J, pol = stages[0]
        dp.write_table_csv(out / "value_table.csv", J, pol, cfg.grid)
        report = dp.check_structure(J, pol, cfg.model, tol=10 * cfg.dp_tol, grid=cfg.grid)
        return {"horizon": int(cfg.dp_horizon), "structure": asdict(report)}
    J, pol, iters = dp.value_iteration(cfg.model, cfg.grid, cfg.dp_tol, cfg.dp_max_iters)
    dp.write_table_csv(out / "value_table.csv", J, pol, cfg.grid)
    report = dp.check_structure(J, pol, cfg.model, tol=10 * cfg.dp_tol, grid=cfg.grid)
    k = dp.extract_thresholds(pol, cfg.grid, m=cfg.model.channel.m)
    cost = dp.regeneration_cost(J, cfg.model, cfg.grid)
    write_csv(out / "thresholds.csv", ["s", *[f"k{i + 1}" for i in range(k.m)]], [[s, *k.k[s]] for s in range(k.num_states)])
    return {"iterations": iters, "thresholds": k.k.tolist(), "C_at_reference": cost, "structure": asdict(report)}


def _pomdp(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    value, tree = pomdp.solve_common_info_dp(cfg.pomdp_source, cfg.channel, cfg.pomdp_T, cfg.pomdp_prior, cfg.pomdp_state)
    tree.write_csv(out / "strategy_tree.csv")
    _write_atomic(out / "strategy_tree.txt", tree.to_text() + "\n")
    return {"value": value, "nodes": len(tree.nodes)}


def _table1(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    jobs = []
    for li, lam in enumerate(cfg.table1_lambdas):
        for r, sd in enumerate(replication_seeds(cfg.seed, cfg.replications, li)):
            jobs.append((li, lam, r, sd))

    S = cfg.model.channel.num_states
    run_dir = out / "runs"

    def one(job):
        li, lam, r, sd = job
        # finished replications are kept on disk, so an interrupted run resumes
        path = run_dir / f"lambda{li}_r{r}.json"
        if path.exists():
            rec = json.loads(path.read_text())
            if rec["seed"] == sd and rec["rmc"] == cfg.raw.get("rmc", {}) and rec["model"] == cfg.raw["model"]:
                return job, ThresholdPolicy(rec["k"]), _Evaluated(rec["C_hat"], rec["se_C"])
        model = _with_lambda1(cfg.model, lam)
        k, trace, est = _optimize_one(model, cfg.rmc_k0, cfg.rmc, cfg.eval_cycles, sd)
        rec = {"lambda1": lam, "seed": sd, "k": k.k.tolist(), "C_hat": est.c_hat, "se_C": est.se_c, "rmc": cfg.raw.get("rmc", {}), "model": cfg.raw["model"]}
        _write_atomic(path, json.dumps(rec) + "\n")
        write_csv(run_dir / f"lambda{li}_r{r}_trace.csv", trace.header(S), trace.rows())
        return job, k, est

    results = _map(one, jobs, workers)
    runs = [[lam, r, sd, *k.as_vector().tolist(), est.c_hat, est.se_c] for (li, lam, r, sd), k, est in results]
    write_csv(out / "table1_runs.csv", ["lambda1", "replication", "seed", *[f"k{s}" for s in range(S)], "C_hat", "se_C"], runs)
    rows = []
    for lam in cfg.table1_lambdas:
        sel = [(k, est) for (li, l1, r, sd), k, est in results if l1 == lam]
        k0 = [k.k[0, 0] for k, _ in sel]
        k1 = [k.k[1, 0] for k, _ in sel] if S > 1 else k0
        c = [est.c_hat for _, est in sel]
        rows.append([lam, np.mean(k0), _two_sigma(k0), np.mean(k1), _two_sigma(k1), np.mean(c), _two_sigma(c)])
    write_csv(out / "table1.csv", ["lambda1", "k0_mean", "k0_2sigma", "k1_mean", "k1_2sigma", "C_mean", "C_2sigma"], rows)
    return {
        "rows": [dict(zip(["lambda1", "k0_mean", "k0_2sigma", "k1_mean", "k1_2sigma", "C_mean", "C_2sigma"], map(float, r))) for r in rows],
        "distortion": DISTORTION_NOTE.format(p=cfg.model.cost.power),
    }


@dataclass
class _Evaluated:
    c_hat: float
    se_c: float


def _with_lambda1(model: ModelSpec, lam: float) -> ModelSpec:
    ch = model.channel
    cost = np.array(ch.tx_cost)
    cost[1:] = cost[1:] / cost[1] * lam if cost[1] else lam
    return ModelSpec(model.source, ChannelSpec(ch.Q, ch.power_levels, ch.drop, cost), model.cost, model.reference_state)


_RUNNERS = {"evaluate": _evaluate, "optimize": _optimize, "dp": _dp, "pomdp": _pomdp, "table1": _table1}


def run_workflow(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> int:
    """Run ``cfg`` and write its artifacts; returns a process exit status."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        results = _RUNNERS[cfg.workflow](cfg, out, workers)
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable JSON
        err = {"error": type(exc).__name__, "message": str(exc), "workflow": cfg.workflow}
        _write_atomic(out / "error.json", json.dumps(err, indent=2) + "\n")
        print(json.dumps(err), file=sys.stderr)
        return 1
    summary = {
        "workflow": cfg.workflow,
        "seed": cfg.seed,
        "runtime_s": time.perf_counter() - start,
        "config": cfg.raw,
        "results": results,
    }
    _write_atomic(out / "summary.json", json.dumps(summary, indent=2, default=_json_default) + "\n")
    return 0


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, float) and math.isnan(o):
        return None
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


COMMAND_HELP = {
    "evaluate": "estimate the cost of a fixed threshold policy",
    "optimize": "search thresholds with renewal Monte Carlo",
    "dp": "solve the grid dynamic program and check its structure",
    "pomdp": "solve a small finite-source problem exactly",
    "table1": "optimize over several lambda1 values with replications",
    "validate": "check a config and exit",
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="remest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*WORKFLOWS, "validate"):
        p = sub.add_parser(name, help=COMMAND_HELP[name])
        p.add_argument("--config", required=True, type=Path, help="JSON config or a previous summary.json")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--replications", type=int, default=None, help="override the config replication count")
        p.add_argument("--workers", type=int, default=1, help="parallel replications (results do not depend on it)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    try:
        raw = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError):
        raw = None
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(json.dumps({"valid": True, "workflow": cfg.workflow}))
            return 0
        if raw is not None and "config" in raw and "results" in raw:
            raw = raw["config"]
        if raw is not None:
            if args.seed is not None:
                raw["seed"] = args.seed
            if args.replications is not None:
                raw["replications"] = args.replications
            cfg = config_from_dict(raw, args.command)
        else:
            cfg = load_config(args.config, args.command)
    except (ConfigError, ValueError, OSError) as exc:
        print(json.dumps({"valid": False, "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    return run_workflow(cfg, args.out, args.workers)


if __name__ == "__main__":
    sys.exit(main())

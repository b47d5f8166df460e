"""Command line entry point and pipeline orchestration.

``interhom <verb> --config run.yaml`` runs the pipeline
``cell -> strip -> params -> simulate -> verify -> compare`` up to the verb
(``all`` runs the stages listed in the config) and writes into ``--out``:

* ``report.json``   machine-readable report (sorted keys, no timestamps)
* ``summary.txt``   human-readable digest generated from the report
* ``estimates.tsv`` Monte Carlo estimates, one row per estimator
* ``params.json``   interface parameters, once the params stage ran
* ``paths/``        path exports when ``export.n_paths > 0``

Exit status is 0 when every enabled check passes, 1 when some check fails
and 2 on configuration or stage errors.
"""

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from .cell import solve_cell
from .config import PIPELINE, load_config
from .errors import ConfigError, InterhomError, StageError
from .fields import GridSpec
from .limit import (GluingTestFunction, compare_laws, make_gluing_test_function,
                    simulate_limit, simulate_limit_path, verify_martingale_problem)
from .rng import stream_key
from .sde import (estimate_exit_probs, estimate_tangential_drift, simulate_path,
                  simulate_terminal)
from .strip import assemble_interface_params, compute_alpha, compute_p, solve_strip_measure

log = logging.getLogger("interhom")

NEGATIVE_CONTROL_RESIDUAL = 0.5


def stage_seed(seed, stage):
    """Per-stage seed derived from the global one, so stages can be rerun alone."""
    return stream_key(seed, stage)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.field = cfg.drift()
        self.report = {
            "config_hash": cfg.hash(),
            "field_hash": cfg.field_hash(),
            "seed": cfg.seed,
            "stages": list(cfg.stages),
            "results": {},
            "checks": [],
        }
        self.estimates = []
        self.cells = self.strip = self.params = None

    def check(self, name, passed, **detail):
        self.report["checks"].append({"name": name, "passed": bool(passed), **detail})

    def estimate(self, est):
        self.estimates.append(est)
        return est.to_dict()

    # -- stages --------------------------------------------------------------

    def cell(self):
        cfg = self.cfg
        grid = GridSpec(cfg.grid["n"], cfg.dim, cfg.k_trunc)
        order = cfg.grid["order"]
        self.cells = (solve_cell("+", self.field.plus, grid, order, strict=cfg.strict),
                      solve_cell("-", self.field.minus, grid, order, strict=cfg.strict))
        out = {}
        for c in self.cells:
            key = "plus" if c.side == "+" else "minus"
            out[key] = {"D": c.D, "residuals": c.residuals}
            worst = max([c.residuals["density"]] + list(c.residuals["corrector"]))
            self.check(f"cell.{key}.residual", worst < 1e-8, value=worst, tolerance=1e-8)
        self.report["results"]["cell"] = out

    def strip_stage(self):
        grid = GridSpec(self.cfg.grid["n"], self.cfg.dim, self.cfg.k_trunc)
        self.strip = solve_strip_measure(self.field, self.cells, grid, self.cfg.grid["order"])
        summ = self.strip.summary()
        self.report["results"]["strip"] = summ
        q = self.strip.q
        for side, rate, r2 in (("plus", q.rate_plus, q.r2_plus), ("minus", q.rate_minus, q.r2_minus)):
            ok = rate is None or (rate > 0 and r2 >= 0.95)
            self.check(f"strip.{side}.exponential_decay", ok, rate=rate, r2=r2,
                       below_floor=rate is None)

    def params_stage(self):
        D = (self.cells[0].D, self.cells[1].D)
        q = (self.strip.q_plus, self.strip.q_minus)
        p = compute_p(q, D)
        alpha = compute_alpha(self.strip, self.field, p, D, self.cells)
        self.params = assemble_interface_params(self.cells, q, alpha.alpha)
        out = self.params.to_dict()
        out["alpha_tail_residual"] = alpha.tail_residual
        self.report["results"]["params"] = out
        self.check("params.p_sum", self.params.p_plus + self.params.p_minus == 1.0,
                   value=self.params.p_plus + self.params.p_minus)
        err = max(float(np.max(np.abs(M @ M.T - Dm))) for M, Dm in
                  ((self.params.M_plus, self.params.D_plus), (self.params.M_minus, self.params.D_minus)))
        self.check("params.factorization", err < 1e-12, value=err, tolerance=1e-12)
        if self.cfg.out:
            os.makedirs(self.cfg.out, exist_ok=True)
            self.params.save(os.path.join(self.cfg.out, "params.json"))

    def simulate(self):
        cfg, s = self.cfg, self.cfg.sim
        seed = stage_seed(cfg.seed, "simulate")
        exits = estimate_exit_probs(self.field, s["epsilon"], None, s["starts"], s["n_paths"],
                                    seed, s["dt"], s["bridge"], s["a"])
        res = {"exit": exits.to_dict(), "epsilon": s["epsilon"], "delta": s["epsilon"] ** s["a"]}
        self.estimates.append(exits.p_plus)
        self.estimates.extend(exits.per_start)
        z = exits.p_plus.zscore(self.params.p_plus)
        self.check("simulate.exit_probability", abs(z) <= 3.0, estimate=exits.p_plus.value,
                   stderr=exits.p_plus.stderr, target=self.params.p_plus, z=z)
        if cfg.dim > 1:
            x0 = s["tangential_x0"]
            tang = estimate_tangential_drift(self.field, s["epsilon"], None, x0, s["n_paths"],
                                             seed, s["dt"], s["bridge"], s["a"])
            res["tangential"] = [self.estimate(e) for e in tang]
            for j, e in enumerate(tang):
                target = float(self.params.alpha[j])
                z = e.zscore(target)
                self.check(f"simulate.tangential_drift[{j + 2}]", abs(z) <= 3.0,
                           estimate=e.value, stderr=e.stderr, target=target, z=z)
        self.report["results"]["simulate"] = res
        if cfg.export["n_paths"] > 0:
            res["exported"] = export_paths(cfg, self.params, self.field)

    def verify(self):
        cfg, lim = self.cfg, self.cfg.limit
        P = self.params
        d = P.dim
        seed = stage_seed(cfg.seed, "verify")
        sample = simulate_limit(P, lim["h"], lim["T"], lim["n_paths"], seed)
        res = {"local_time_mean": float(sample.local_time.mean())}
        g = np.zeros(d)
        g[0] = 1.0
        g[1:] = 0.5
        H = np.eye(d)
        if d > 1:
            H[0, 1:] = H[1:, 0] = 0.25
        family = {
            "linear": make_gluing_test_function(P, 0.0, g),
            "quadratic_normal": make_gluing_test_function(P, 0.0, None, np.diag([1.0] + [0.0] * (d - 1)),
                                                          h_plus_11=2.0),
            "quadratic_mixed": make_gluing_test_function(P, 0.0, -0.5 * g, H, h_plus_11=-1.0),
        }
        res["defects"] = {}
        for name, f in family.items():
            e = verify_martingale_problem(sample, f, P)
            self.estimates.append(e.__class__(e.value, e.stderr, e.n, e.seed,
                                              f"martingale_defect[{name}]", e.extra))
            res["defects"][name] = e.to_dict()
            self.check(f"verify.martingale[{name}]", e.within(0.0), value=e.value,
                       stderr=e.stderr)
        base = family["linear"]
        bad = GluingTestFunction(0.0, base.g_plus + np.eye(d)[0] * NEGATIVE_CONTROL_RESIDUAL / P.p_plus,
                                 base.g_minus, base.H_plus, base.H_minus)
        e = verify_martingale_problem(sample, bad, P, allow_violation=True)
        expected = NEGATIVE_CONTROL_RESIDUAL * res["local_time_mean"]
        res["negative_control"] = dict(e.to_dict(), expected=expected)
        self.check("verify.negative_control", abs(e.value) > 3 * e.stderr, value=e.value,
                   stderr=e.stderr, expected=expected)
        drift = sample.x_T[:, 0] - sample.x0[:, 0] - P.K[0] * sample.local_time
        mean = float(drift.mean())
        se = float(drift.std(ddof=1) / math.sqrt(drift.size))
        res["k1_consistency"] = {"value": mean, "stderr": se}
        self.check("verify.k1_consistency", abs(mean) <= 3 * se, value=mean, stderr=se)
        self.report["results"]["verify"] = res

    def compare(self):
        cfg, c = self.cfg, self.cfg.compare
        seed = stage_seed(cfg.seed, "compare")
        eps, t = c["epsilon"], c["t"]
        T_micro = t / eps ** 2
        dt = c["dt"]
        nsteps = max(1, int(round(T_micro / dt)))
        micro = eps * simulate_terminal(self.field, np.zeros(cfg.dim), T_micro / nsteps,
                                        T_micro, c["n_paths"], seed)
        limit = simulate_limit(self.params, cfg.limit["h"], t, c["n_paths"], seed,
                               min_steps=1).x_T
        cmp_ = compare_laws(micro, limit)
        self.report["results"]["compare"] = dict(cmp_.to_dict(), epsilon=eps, t=t)
        self.check("compare.ks", cmp_.passed, max_ks=cmp_.max_statistic, threshold=cmp_.threshold)


_STAGES = {
    "cell": Run.cell,
    "strip": Run.strip_stage,
    "params": Run.params_stage,
    "simulate": Run.simulate,
    "verify": Run.verify,
    "compare": Run.compare,
}


def run_pipeline(cfg):
    """Run the configured stages and return ``(report, estimates)``.

    Failures inside a stage are re-raised as :class:`StageError` carrying
    the stage name.
    """
    run = Run(cfg)
    for stage in cfg.stages:
        log.info("stage %s", stage)
        try:
            _STAGES[stage](run)
        except InterhomError as exc:
            raise StageError(stage, exc) from exc
    run.report["passed"] = all(c["passed"] for c in run.report["checks"])
    return _jsonable(run.report), run.estimates


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def summary_text(report):
    """Human-readable digest; every number is printed exactly as in the JSON report."""
    lines = [f"config {report['config_hash']}  field {report['field_hash']}  seed {report['seed']}",
             f"stages: {', '.join(report['stages'])}"]
    res = report["results"]
    if "params" in res:
        p = res["params"]
        lines.append(f"p_plus {p['p_plus']!r}  p_minus {p['p_minus']!r}")
        lines.append(f"alpha {p['alpha']!r}")
        lines.append(f"K {p['K']!r}")
    lines.append("checks:")
    for c in report["checks"]:
        extra = "  ".join(f"{k}={c[k]!r}" for k in sorted(c) if k not in ("name", "passed"))
        lines.append(f"  [{'PASS' if c['passed'] else 'FAIL'}] {c['name']}  {extra}".rstrip())
    lines.append("overall: " + ("PASS" if report.get("passed") else "FAIL"))
    return "\n".join(lines) + "\n"


def estimates_table(estimates, seed_note, config_hash):
    rows = ["estimator\tvalue\tstderr\tN\tseed\tconfig_hash"]
    for e in estimates:
        rows.append(f"{e.name}\t{e.value!r}\t{e.stderr!r}\t{e.n}\t{e.seed}\t{config_hash}")
    return "\n".join(rows) + "\n"


def _write_table(path, header, data):
    np.savetxt(path, data, fmt="%.17g", delimiter="\t", header="\t".join(header), comments="")


def export_paths(cfg, params, field_=None):
    """Write microscopic, rescaled and limit-scale sample paths for plotting.

    Returns the list of written file names (relative to ``out/paths``).
    """
    ex = cfg.export
    if "simulate" not in cfg.stages:
        raise ConfigError("path export needs the simulate stage", field="export")
    field_ = cfg.drift() if field_ is None else field_
    d = cfg.dim
    eps = cfg.sim["epsilon"]
    folder = os.path.join(cfg.out, "paths")
    os.makedirs(folder, exist_ok=True)
    seed = stage_seed(cfg.seed, "export")
    coords = [f"x{i + 1}" for i in range(d)]
    written = []
    for i in range(ex["n_paths"]):
        path = simulate_path(field_, np.zeros(d), ex["dt"], ex["T_micro"], seed, i)
        sl = slice(None, None, ex["stride"])
        t, x = path.t[sl], path.x[sl]
        name = f"micro_{i:03d}.tsv"
        _write_table(os.path.join(folder, name), ["t"] + coords, np.column_stack([t, x]))
        written.append(name)
        name = f"rescaled_{i:03d}.tsv"
        _write_table(os.path.join(folder, name), ["t"] + coords,
                     np.column_stack([eps ** 2 * t, eps * x]))
        written.append(name)
        lp = simulate_limit_path(params, cfg.limit["h"], cfg.limit["T"], seed,
                                 stride=ex["limit_stride"], index=i, min_steps=1)
        name = f"limit_{i:03d}.tsv"
        _write_table(os.path.join(folder, name), ["t"] + coords + ["L"],
                     np.column_stack([lp.t, lp.x, lp.local_time]))
        written.append(name)
    return written


def write_outputs(cfg, report, estimates):
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "report.json"), "w") as fh:
        fh.write(report_json(report))
    with open(os.path.join(cfg.out, "summary.txt"), "w") as fh:
        fh.write(summary_text(report))
    with open(os.path.join(cfg.out, "estimates.tsv"), "w") as fh:
        fh.write(estimates_table(estimates, cfg.seed, report["config_hash"]))


def build_parser():
    ap = argparse.ArgumentParser(prog="interhom",
                                 description="Homogenization across an interface: "
                                             "solvers, simulators and checks.")
    ap.add_argument("verb", choices=PIPELINE + ("all",),
                    help="run the pipeline up to this stage ('all': stages from the config)")
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--seed", type=int, help="global seed (overrides the config)")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--stage", choices=PIPELINE, help="last stage to run (with verb 'all')")
    ap.add_argument("--strict", action="store_true", help="treat solver warnings as errors")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("seed must be an unsigned 64-bit integer", field="seed")
            cfg.seed = args.seed
        if args.out:
            cfg.out = args.out
        if args.strict:
            cfg.strict = True
        if args.stage and args.verb != "all" and args.stage != args.verb:
            raise ConfigError(f"--stage {args.stage} conflicts with verb {args.verb}", field="stage")
        last = args.stage or (args.verb if args.verb != "all" else None)
        if last:
            cfg = cfg.with_stages(last)
        report, estimates = run_pipeline(cfg)
    except (ConfigError, StageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_outputs(cfg, report, estimates)
    sys.stdout.write(summary_text(report))
    return 0 if report["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())

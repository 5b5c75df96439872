"""Command line entry point: ``memheat <subcommand> [config.ini] [options]``.

Exit status: 0 success, 2 invalid configuration or failed coefficient probe,
3 numerical blow-up (or a failed internal consistency check), 4 optimizer or
Picard non-convergence. Artifacts are written before a non-zero exit where
possible. Outputs go under ``$MEMHEAT_OUTPUT`` (default ``./memheat-output``)
unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, coefficients, config, io, ldp, solver
from .exceptions import (BlowUpError, ConfigurationError, ConsistencyError, ControlClassError,
                         CoverageError, DomainError, IllPosedError)

log = logging.getLogger("memheat")

OUTPUT_ENV = "MEMHEAT_OUTPUT"
EXIT_OK, EXIT_INVALID, EXIT_BLOWUP, EXIT_NONCONVERGED = 0, 2, 3, 4
SUBCOMMANDS = ("simulate", "picard", "decompose", "skeleton", "rate", "c1check", "c2check",
               "rareevent", "probe", "report")


def output_root(arg=None):
    return Path(arg or os.environ.get(OUTPUT_ENV) or "memheat-output")


def run_directory(root, sub, rc):
    d = root / f"{sub}-{rc.sim.config_hash()[:12]}-s{rc.seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def controls_from_config(rc):
    r = rc.reader()
    sim = rc.sim
    csv_prefix = r.raw("controls", "csv")
    budget = r.raw("controls", "m_budget")
    budget = r.float("controls", "m_budget", nonneg=True) if budget else None
    if csv_prefix:
        c = io.read_controls(csv_prefix, sim)
        return ldp.ControlPair(c.dt, c.f, c.g, c.mark_grid, budget)
    f_vals = r.floats("controls", "f")
    g_raw = r.raw("controls", "g")
    f = None
    if f_vals:
        f = np.zeros(sim.noise.k_noise)
        f[: min(len(f_vals), f.size)] = f_vals[: f.size]
    g = r.float("controls", "g", nonneg=True) if g_raw else None
    return ldp.ControlPair.for_config(sim, f=f, g=g, m_budget=budget)


def precheck(rc):
    n = rc.reader().int("coefficients", "probe_samples", minimum=0)
    if n == 0:
        return
    for rep in coefficients.probe_all(rc.sim.coeffs, n_samples=n, radii=(1.0, 10.0), n_modes=min(rc.sim.n_modes, 16)):
        if not rep.passed:
            raise ConfigurationError(f"coefficient probe failed: {rep}", field="coefficients")


def _save_traj(m, d, traj, stem="trajectory"):
    m.add_output(io.write_trajectory(d / f"{stem}.bin", traj), "trajectory")
    m.add_output(io.write_diagnostics(d / f"{stem}_diagnostics.csv", traj), "diagnostics")


def _traj_summary(traj):
    return dict(sup_l2sq=traj.sup_l2sq, int_h1sq=traj.int_h1sq, int_lqq=traj.int_lqq,
                terminal_l2=float(np.sqrt(traj.diagnostics["l2sq"][-1])))


def cmd_simulate(rc, d, m):
    precheck(rc)
    controls = controls_from_config(rc)
    traj = solver.solve(rc.sim, rc.eps, controls, path=0)
    _save_traj(m, d, traj)
    summary = _traj_summary(traj)
    if rc.ensemble > 1:
        t0 = time.perf_counter()
        ens = solver.solve_ensemble(rc.sim, rc.eps, rc.ensemble, controls)
        m.timing("ensemble", time.perf_counter() - t0)
        jumps = ens.extras.get("jump_counts", np.zeros(ens.n_paths, dtype=int))
        rows = zip(range(ens.n_paths), ens.sup_l2sq, ens.int_h1sq, ens.int_lqq, jumps)
        m.add_output(io.write_csv(d / "ensemble.csv", ["path", "sup_l2sq", "int_h1sq", "int_lqq", "jumps"],
                                  rows, io.provenance(ens.metadata)), "ensemble")
        summary.update({f"mean_{k}": v for k, v in ens.means().items()})
    return EXIT_OK, summary


def cmd_picard(rc, d, m):
    precheck(rc)
    traj, rep = solver.solve_picard(rc.sim, rc.eps, controls_from_config(rc))
    _save_traj(m, d, traj)
    rows = [(w, i + 1, dist) for w, seq in enumerate(rep.distances) for i, dist in enumerate(seq)]
    m.add_output(io.write_csv(d / "picard.csv", ["window", "iteration", "distance"], rows,
                              io.provenance(traj.metadata)), "picard")
    if rep.m_sweep:
        m.add_output(io.write_csv(d / "msweep.csv", ["m", "sup_distance", "h6_tail"], rep.m_sweep,
                                  io.provenance(traj.metadata)), "msweep")
    summary = dict(window_steps=rep.window_steps, horizon=rep.horizon, converged=rep.all_converged,
                   iterations=[len(s) for s in rep.distances], **_traj_summary(traj))
    return (EXIT_OK if rep.all_converged else EXIT_NONCONVERGED), summary


def cmd_decompose(rc, d, m):
    precheck(rc)
    dec = solver.decompose_yzj(rc.sim, rc.eps, controls_from_config(rc))
    for name, tr in (("Y", dec.Y), ("Z", dec.Z), ("J", dec.J)):
        m.add_output(io.write_trajectory(d / f"{name}.bin", tr), "trajectory")
    rows = zip(dec.Y.times, dec.Y.diagnostics["l2sq"], dec.Z.diagnostics["l2sq"], dec.J.diagnostics["l2sq"])
    m.add_output(io.write_csv(d / "yzj.csv", ["t", "Y_l2sq", "Z_l2sq", "J_l2sq"], rows,
                              io.provenance(dec.Y.metadata)), "yzj")
    return EXIT_OK, dict(sup_Y_l2sq=dec.Y.sup_l2sq, sup_Z_l2sq=dec.Z.sup_l2sq, j_mismatch=dec.mismatch)


def cmd_skeleton(rc, d, m):
    precheck(rc)
    controls = controls_from_config(rc)
    traj = ldp.skeleton_solve(controls, rc.sim)
    _save_traj(m, d, traj)
    for p in io.write_controls(d / "controls", controls):
        m.add_output(p, "controls")
    return EXIT_OK, dict(q1=controls.q1, q2=controls.q2, **_traj_summary(traj))


def _terminal_target(rc, section):
    r = rc.reader()
    center = r.raw(section, "center")
    radius = r.float(section, "radius", nonneg=True)
    if section == "rate" and r.raw("rate", "target") == "skeleton" and not center:
        center_vec = ldp.skeleton_solve(ldp.ControlPair.zero(rc.sim), rc.sim).states[-1]
    elif not center:
        raise ConfigurationError("a target center is required", field=f"{section}.center")
    else:
        center_vec = config.parse_field(center, rc.sim.n_modes, f"{section}.center")
    return ldp.TerminalTarget(center_vec, radius)


def _rate(rc, target):
    r = rc.reader()
    return ldp.rate_function(
        target, rc.sim,
        n_time_blocks=r.int("rate", "n_time_blocks", minimum=1), n_starts=r.int("rate", "n_starts", minimum=1),
        penalty0=r.float("rate", "penalty0", positive=True), n_penalty_loops=r.int("rate", "penalty_loops", minimum=1),
        max_iter=r.int("rate", "max_iter", minimum=1), optimize_g=r.bool("rate", "optimize_g"), seed=rc.seed)


def cmd_rate(rc, d, m):
    precheck(rc)
    est = _rate(rc, _terminal_target(rc, "rate"))
    (d / "rate.txt").write_text(est.as_text())
    m.add_output(d / "rate.txt", "rate")
    for p in io.write_controls(d / "minimizer", est.controls):
        m.add_output(p, "controls")
    summary = dict(value=est.value, gap=est.gap, residual=est.residual, converged=est.converged)
    return (EXIT_OK if est.converged else EXIT_NONCONVERGED), summary


def cmd_c1check(rc, d, m):
    precheck(rc)
    r = rc.reader()
    limit = controls_from_config(rc)
    steps = [int(x) for x in r.floats("experiments", "c1_steps")]
    if not steps or min(steps) < 1:
        raise ConfigurationError("needs positive integers", field="experiments.c1_steps")
    seq = [ldp.ControlPair(limit.dt, f, limit.g, limit.mark_grid)
           for f in ldp.oscillating_sequence(limit.f, steps, rc.sim)]
    rep = ldp.c1_continuity_check(seq, limit, rc.sim, r.int("experiments", "dictionary_size", minimum=1),
                                  r.float("experiments", "tol", positive=True))
    rows = zip(steps, rep.control_distances, rep.output_distances)
    m.add_output(io.write_csv(d / "c1.csv", ["n", "control_distance", "output_distance"], rows,
                              f"seed={rc.seed} config={rc.sim.config_hash()}"), "c1")
    return EXIT_OK, dict(passed=rep.passed, monotone=rep.monotone, final_distance=rep.output_distances[-1])


def cmd_c2check(rc, d, m):
    precheck(rc)
    r = rc.reader()
    sched = r.floats("experiments", "eps_schedule")
    if not sched or min(sched) < 0:
        raise ConfigurationError("needs nonnegative values", field="experiments.eps_schedule")
    n = rc.ensemble if rc.ensemble > 1 else r.int("experiments", "n_samples", minimum=1)
    rep = ldp.c2_convergence_experiment(controls_from_config(rc), sched, n, rc.sim,
                                        r.float("experiments", "tol", positive=True))
    rows = [(e, i, s, h) for e, ss, hh in zip(rep.eps, rep.sup_l2sq, rep.int_h1sq)
            for i, (s, h) in enumerate(zip(ss, hh))]
    m.add_output(io.write_csv(d / "c2.csv", ["eps", "sample", "sup_l2sq", "int_h1sq"], rows,
                              f"seed={rc.seed} config={rc.sim.config_hash()}"), "c2")
    return EXIT_OK, dict(medians=rep.medians, slope=rep.slope, passed=rep.passed, tol=rep.tol)


def cmd_rareevent(rc, d, m):
    precheck(rc)
    r = rc.reader()
    target = _terminal_target(rc, "rareevent")
    sched = r.floats("rareevent", "eps_schedule")
    if not sched or min(sched) <= 0:
        raise ConfigurationError("needs positive values", field="rareevent.eps_schedule")
    n = rc.ensemble if rc.ensemble > 1 else r.int("rareevent", "n_samples", minimum=1)
    est = None if math.isinf(target.radius) else _rate(rc, target)
    rep = ldp.rare_event_mc(target, sched, n, rc.sim, None if est is None else est.value)
    rows = zip(rep.eps, rep.hits, [n] * len(rep.eps))
    m.add_output(io.write_csv(d / "rareevent.csv", ["eps", "hits", "n_samples"], rows,
                              f"seed={rc.seed} config={rc.sim.config_hash()}"), "rareevent")
    summary = dict(log_rates=rep.log_rates, one_sided=rep.one_sided)
    if est is not None:
        (d / "rate.txt").write_text(est.as_text())
        m.add_output(d / "rate.txt", "rate")
        summary.update(rate=est.value, rate_gap=est.gap, rate_converged=est.converged)
    return EXIT_OK, summary


def cmd_probe(rc, d, m):
    r = rc.reader()
    n = max(r.int("coefficients", "probe_samples", minimum=1), 1000)
    radii = (1.0, 10.0, 100.0)
    reps = coefficients.probe_all(rc.sim.coeffs, n_samples=n, radii=radii,
                                  n_modes=min(rc.sim.n_modes, 16), seed=rc.seed)
    per = len(coefficients.HYPOTHESES)
    rows = [(p.hypothesis, radii[i // per], p.n_samples, p.worst_ratio, p.worst_inequality, p.passed)
            for i, p in enumerate(reps)]
    m.add_output(io.write_csv(d / "probe.csv", ["hypothesis", "radius", "n_samples", "worst_ratio",
                                                "worst_inequality", "passed"], rows,
                              f"seed={rc.seed} config={rc.sim.config_hash()}"), "probe")
    for p in reps:
        print(p)
    ok = all(p.passed for p in reps)
    return (EXIT_OK if ok else EXIT_INVALID), dict(passed=ok)


COMMANDS = dict(simulate=cmd_simulate, picard=cmd_picard, decompose=cmd_decompose, skeleton=cmd_skeleton,
                rate=cmd_rate, c1check=cmd_c1check, c2check=cmd_c2check, rareevent=cmd_rareevent,
                probe=cmd_probe)


# report


def report(target):
    """Text summary of every manifest under ``target``; recomputed from stored raw outputs."""
    target = Path(target)
    lines, warnings = [], []
    if target.is_file():
        manifests = [target]
    elif target.is_dir():
        manifests = sorted(target.rglob("manifest.json"))
    else:
        return f"WARNING: {target} does not exist\n"
    if not manifests:
        warnings.append(f"no manifests found under {target}")
    for mp in manifests:
        try:
            man = io.load_manifest(mp)
        except (OSError, ValueError) as exc:
            warnings.append(f"{mp}: unreadable manifest ({exc})")
            continue
        d = mp.parent
        sub = man.get("subcommand", "?")
        lines.append(f"== {sub}  [{d.name}]  status={man.get('status')}  seed={man.get('seed')} eps={man.get('eps')}")
        for out in man.get("outputs", []):
            p = d / out["path"]
            if not p.exists():
                warnings.append(f"{p}: missing")
            elif io.sha256_file(p) != out["sha256"]:
                warnings.append(f"{p}: hash mismatch")
        try:
            lines += _report_body(sub, d, man)
        except (OSError, ValueError, KeyError, IndexError) as exc:
            warnings.append(f"{d}: could not recompute summary ({exc})")
    return "".join(f"WARNING: {w}\n" for w in warnings) + "".join(line + "\n" for line in lines)


def _report_body(sub, d, man):
    out = []
    if sub in ("simulate", "picard", "skeleton"):
        hdr, rows = io.read_csv(d / "trajectory_diagnostics.csv")
        a = np.array([[float(x) for x in r] for r in rows])
        dt = a[1, 0] - a[0, 0]
        out.append(f"   sup|U|_2^2={a[:, 1].max():.6g}  int|U|_(2,1)^2={dt * a[1:, 2].sum():.6g}  "
                   f"int|U|_q^q={dt * a[1:, 3].sum():.6g}  jumps={int(a[:, 4].sum())}")
        if (d / "ensemble.csv").exists():
            _, rows = io.read_csv(d / "ensemble.csv")
            e = np.array([[float(x) for x in r] for r in rows])
            out.append(f"   ensemble n={len(e)}  E sup|U|^2={e[:, 1].mean():.6g}  E int|U|_(2,1)^2={e[:, 2].mean():.6g}"
                       f"  E int|U|_q^q={e[:, 3].mean():.6g}")
        if (d / "picard.csv").exists():
            _, rows = io.read_csv(d / "picard.csv")
            last = {}
            for w, i, dist in rows:
                last[int(w)] = (int(i), float(dist))
            for w, (i, dist) in sorted(last.items()):
                out.append(f"   window {w}: {i} iterations, final distance {dist:.3e}")
    elif sub == "c2check":
        _, rows = io.read_csv(d / "c2.csv")
        by = {}
        for e, _, s, _h in rows:
            by.setdefault(float(e), []).append(float(s))
        eps = sorted(by, reverse=True)
        med = [float(np.median(by[e])) for e in eps]
        out.append("   eps          median sup|V-u|^2")
        out += [f"   {e:<12.4g} {mv:.6g}" for e, mv in zip(eps, med)]
        pos = [(e, mv) for e, mv in zip(eps, med) if e > 0 and mv > 0]
        if len(pos) >= 2:
            slope = np.polyfit(np.log([p[0] for p in pos]), np.log([p[1] for p in pos]), 1)[0]
            out.append(f"   fitted log-log slope {slope:.4f}")
        dec = all(b < a for a, b in zip(med, med[1:]))
        tol = man.get("summary", {}).get("tol", 1e-3)
        if not dec or med[-1] >= tol:
            out.append("   FAILED: medians not decreasing or final median above tolerance")
    elif sub == "rareevent":
        _, rows = io.read_csv(d / "rareevent.csv")
        rate = man.get("summary", {}).get("rate")
        out.append("   eps          hits     n          -eps log p")
        for e, k, n in rows:
            e, k, n = float(e), int(k), int(n)
            rep = ldp.RareEventReport([e], [k], n)
            flag = " (upper-bound based)" if k == 0 else ""
            out.append(f"   {e:<12.4g} {k:<8d} {n:<10d} {rep.log_rates[0]:.6g}{flag}")
        if rate is not None:
            out.append(f"   rate estimate {rate:.6g}")
    elif sub == "c1check":
        _, rows = io.read_csv(d / "c1.csv")
        out += [f"   n={r[0]:<5} control={float(r[1]):.3e} output={float(r[2]):.3e}" for r in rows]
        dist = [float(r[2]) for r in rows]
        if any(b > a for a, b in zip(dist, dist[1:])):
            out.append("   FAILED: output distances not monotone")
    elif sub == "probe":
        _, rows = io.read_csv(d / "probe.csv")
        for h, rad, n, ratio, ineq, ok in rows:
            out.append(f"   {h} radius={rad} worst={float(ratio):.4g} ({ineq}) {'ok' if ok == 'true' else 'FAILED'}")
    elif sub in ("rate", "decompose"):
        txt = d / ("rate.txt" if sub == "rate" else "yzj.csv")
        if sub == "rate":
            out += ["   " + line for line in txt.read_text().splitlines()]
        else:
            _, rows = io.read_csv(txt)
            a = np.array([[float(x) for x in r] for r in rows])
            out.append(f"   sup|Y|^2={a[:, 1].max():.6g}  sup|Z|^2={a[:, 2].max():.6g}  sup|J|^2={a[:, 3].max():.6g}")
    for k, v in sorted(man.get("summary", {}).items()):
        if k in ("passed", "converged") and v is False:
            out.append(f"   FAILED: {k}=false")
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="memheat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"memheat {__version__}")
    sp = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sp.add_parser(name)
        if name == "report":
            s.add_argument("path", help="run directory, output root or manifest.json")
            continue
        s.add_argument("config", nargs="?", help="INI configuration file")
        s.add_argument("--seed", type=int)
        s.add_argument("--eps", type=float)
        s.add_argument("--ensemble", type=int)
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        s.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./memheat-output)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report":
        text = report(args.path)
        sys.stdout.write(text)
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.set)
    for key, name in (("seed", "simulation.seed"), ("eps", "simulation.eps"), ("ensemble", "simulation.ensemble")):
        v = getattr(args, key)
        if v is not None:
            overrides.append(f"{name}={v}")
    try:
        rc = config.load(args.config, overrides=overrides)
    except (ConfigurationError, DomainError, IllPosedError, ControlClassError) as exc:
        print(f"memheat: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    d = run_directory(output_root(args.out), args.command, rc)
    man = io.RunManifest(d, args.command, rc, __version__)
    t0 = time.perf_counter()
    try:
        status, summary = COMMANDS[args.command](rc, d, man)
    except (ConfigurationError, DomainError, IllPosedError, ControlClassError, CoverageError) as exc:
        man.finish("invalid", error=str(exc))
        print(f"memheat: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (BlowUpError, ConsistencyError) as exc:
        extra = getattr(exc, "last_diagnostics", {})
        man.finish("blowup", error=str(exc), last_diagnostics=extra)
        print(f"memheat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    man.timing(args.command, time.perf_counter() - t0)
    label = {EXIT_OK: "ok", EXIT_INVALID: "invalid", EXIT_NONCONVERGED: "not_converged"}[status]
    path = man.finish(label, **summary)
    print(f"{args.command}: {label}; outputs in {d}")
    log.info("manifest %s", path)
    return status


if __name__ == "__main__":
    sys.exit(main())

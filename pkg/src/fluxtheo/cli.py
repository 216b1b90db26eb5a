"""Command line: fluxtheo validate|run|fit|selftest.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import acceptance
from . import ame
from . import channels as chn
from . import experiment as ex
from . import feedback as fb
from . import fluctuation as fl
from . import measurements as ms
from .quantum_core import DomainError, ValidationError, eig_hermitian, gibbs_probs, gibbs_state

log = logging.getLogger("fluxtheo")

VERSION_TAG = "fluxtheo/1"
BLOCKS = ("protocol", "feedback", "anneal", "fit")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def fmt(x) -> str:
    """17 significant digits so that floats survive a round trip."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])
    log.info("wrote %s", path)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(acceptance._plain(obj), fh, indent=2)
        fh.write("\n")
    log.info("wrote %s", path)


# scenario parsing

def load_scenario(path) -> dict:
    if not os.path.exists(path):
        raise ValidationError(f"scenario file {path} does not exist")
    try:
        with open(path) as fh:
            sc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(sc, dict):
        raise ValidationError(f"{path}: scenario must be a JSON object")
    if sc.get("version") != VERSION_TAG:
        raise ValidationError(f"{path}: version must be {VERSION_TAG!r}, got {sc.get('version')!r}")
    present = [b for b in BLOCKS if b in sc]
    if len(present) != 1:
        raise ValidationError(f"{path}: exactly one of {BLOCKS} is required, found {present}")
    unknown = set(sc) - set(BLOCKS) - {"version", "output", "description"}
    if unknown:
        raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
    sc["_kind"] = present[0]
    sc["_dir"] = os.path.dirname(os.path.abspath(path))
    return sc


def _matrix(m, what):
    try:
        return chn.matrix_from_json(m)
    except (ValueError, TypeError) as e:
        raise ValidationError(f"{what}: {e}") from e


def _gibbs_block(g, what):
    H = _matrix(g["H"], f"{what}.H")
    return H, float(g["beta"])


def parse_state(obj, what="rho"):
    if isinstance(obj, dict) and "gibbs" in obj:
        H, beta = _gibbs_block(obj["gibbs"], what)
        return gibbs_state(H, beta)
    return _matrix(obj, what)


def parse_measurement(obj, what):
    if not isinstance(obj, dict):
        raise ValidationError(f"{what}: expected an object with 'ops', 'basis' or 'eigenbasis_of'")
    if "ops" in obj:
        return ms.measurement([_matrix(o, f"{what}.ops") for o in obj["ops"]], obj.get("labels"))
    if "basis" in obj:
        V = _matrix(obj["basis"], f"{what}.basis")
        if np.max(np.abs(V.conj().T @ V - np.eye(V.shape[0]))) > 1e-10:
            raise ValidationError(f"{what}.basis is not unitary")
        return ms.projective_from_basis(V)
    if "eigenbasis_of" in obj:
        return ms.projective_from_hamiltonian(_matrix(obj["eigenbasis_of"], f"{what}.eigenbasis_of"))
    raise ValidationError(f"{what}: expected 'ops', 'basis' or 'eigenbasis_of'")


def parse_channel(obj, what="channel"):
    if not isinstance(obj, dict):
        raise ValidationError(f"{what}: expected an object with 'kraus' or 'unitary'")
    if "unitary" in obj:
        U = _matrix(obj["unitary"], f"{what}.unitary")
        if np.max(np.abs(U.conj().T @ U - np.eye(U.shape[0]))) > 1e-10:
            raise ValidationError(f"{what}.unitary is not unitary")
        return chn.unitary_channel(U)
    if "kraus" in obj:
        try:
            return chn.from_json(obj)
        except ValidationError as e:
            raise ValidationError(f"{what}: {e}") from e
    raise ValidationError(f"{what}: expected 'kraus' or 'unitary'")


def parse_q(obj, n, what="q"):
    if isinstance(obj, dict) and "gibbs" in obj:
        H, beta = _gibbs_block(obj["gibbs"], what)
        q = gibbs_probs(eig_hermitian(H).eigenvalues, beta)
    else:
        q = np.asarray(obj, float)
    if q.shape != (n,):
        raise ValidationError(f"{what} has {q.size} entries but the measurement has {n} outcomes")
    return q


def build_protocol(b):
    rho = parse_state(b["rho"])
    P = parse_measurement(b["P"], "P")
    Q = parse_measurement(b["Q"], "Q")
    E = parse_channel(b["channel"])
    q = parse_q(b["q"], len(Q))
    return fl.protocol(rho, P, E, Q, q)


def build_feedback(b):
    rho = parse_state(b["rho"])
    P = parse_measurement(b["P"], "P")
    pre = parse_channel(b.get("pre_channel", {"unitary": np.eye(rho.shape[0]).tolist()}), "pre_channel")
    mid = parse_measurement(b["mid"], "mid")
    branches = b["branches"]
    if len(branches) != len(mid):
        raise ValidationError(f"{len(branches)} branches for a mid measurement with {len(mid)} outcomes")
    maps, finals, qs = [], [], []
    for j, br in enumerate(branches):
        maps.append(parse_channel(br, f"branches[{j}]"))
        finals.append(parse_measurement(br["Q"], f"branches[{j}].Q"))
        qs.append(parse_q(br["q"], len(finals[-1]), f"branches[{j}].q"))
    s = fb.feedback_protocol(rho, P, pre, mid, maps, finals, qs)
    em = None
    if "confusion" in b:
        em = fb.error_model(np.asarray(b["confusion"], float), p_j=fb.mid_probabilities(s))
    return s, em


def build_anneal(b, base_dir, schedule_file=None):
    sch = ame.schedule_from_csv(schedule_file) if schedule_file else None
    return ame.spec_from_json(b, base_dir, sch)


def output_dir(sc, args):
    out = args.out or sc.get("output", {}).get("dir") or "."
    if not os.path.isabs(out) and not args.out:
        out = os.path.join(sc["_dir"], out)
    os.makedirs(out, exist_ok=True)
    return out


def _prefix(sc):
    return sc.get("output", {}).get("prefix", "")


# validate

def validate_scenario(sc, args) -> dict:
    """Schema and physics checks; returns a report with a list of named violations."""
    kind = sc["_kind"]
    b = sc[kind]
    rep = {"kind": kind, "violations": [], "checks": {}}
    try:
        if kind == "protocol":
            sp = build_protocol(b)
            rep["checks"]["tp_residual"] = sp.channel.tp_residual()
            rep["checks"]["unital"] = chn.is_unital(sp.channel)
            mr = ms.check_microreversible(sp.P, sp.Q)
            rep["checks"]["microreversible"] = mr.ok
            rep["checks"]["microreversibility_messages"] = mr.messages
            if b.get("require_microreversible") and not mr.ok:
                rep["violations"].append("microreversibility: " + "; ".join(mr.messages))
        elif kind == "feedback":
            s, _ = build_feedback(b)
            rep["checks"]["n_branches"] = s.n_branches
            rep["checks"]["total_tp_residual"] = s.total_map().tp_residual()
        elif kind == "anneal":
            spec = build_anneal(b, sc["_dir"], args.schedule)
            res = max(ame.lindblad_ops_at(spec, x * spec.t_f).completeness_residual(spec)
                      for x in (0.0, 0.25, 0.5, 0.75, 1.0))
            rep["checks"]["lindblad_completeness"] = res
            if res > 1e-10:
                rep["violations"].append(f"Lindblad completeness residual {res:.3e}")
            if spec.kappa > 0 and not spec.beta > 0:
                rep["violations"].append("kappa > 0 needs beta > 0")
            sw = b.get("sweep")
            if sw is not None and sw.get("key") not in ("J", "t_f", "kappa"):
                rep["violations"].append(f"sweep key must be J, t_f or kappa, got {sw.get('key')!r}")
        elif kind == "fit":
            tmpl = build_anneal(b["spec"], sc["_dir"], args.schedule) if "spec" in b else ame.reference_spec()
            if "data" in b:
                path = os.path.join(sc["_dir"], b["data"])
                pts = ex.read_counts_csv(path, tmpl)
                rep["checks"]["n_points"] = len(pts)
            elif "synthetic" in b:
                grid = b["synthetic"].get("grid", [])
                if not grid:
                    rep["violations"].append("synthetic block needs a non-empty grid of [J, t_f_us]")
                rep["checks"]["n_points"] = len(grid)
            else:
                rep["violations"].append("fit block needs 'data' or 'synthetic'")
            kr = b.get("kappa_range", [1e-4, 1e-2])
            if not (len(kr) == 2 and 0 < kr[0] < kr[1]):
                rep["violations"].append(f"kappa_range must be [lo, hi] with 0 < lo < hi, got {kr}")
    except KeyError as e:
        rep["violations"].append(f"missing field {e.args[0]!r}")
    except ValidationError as e:
        rep["violations"].append(str(e))
    rep["ok"] = not rep["violations"]
    return rep


def cmd_validate(args) -> int:
    sc = load_scenario(args.scenario)
    rep = validate_scenario(sc, args)
    print(json.dumps(acceptance._plain(rep), indent=2))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_json(os.path.join(args.out, "validation.json"), rep)
    return EXIT_OK if rep["ok"] else EXIT_VALIDATION


# run

def run_protocol(sc, out, args):
    b = sc["protocol"]
    sp = build_protocol(b)
    pre = _prefix(sc)
    dist = fl.forward_pdf(sp)
    write_csv(os.path.join(out, pre + "protocol_pdf.csv"), ["v", "probability"], zip(dist.v, dist.prob))
    g_sum, g_closed, g_res = fl.efficacy_both(sp)
    lhs, _, jres = fl.jarzynski_check(sp)
    rows = [("gamma_sum", g_sum), ("gamma_closed", g_closed), ("gamma_residual", g_res),
            ("mean_exp_minus_v", lhs), ("jarzynski_residual", jres), ("mean_v", dist.mean())]
    _, bound, d = fl.gamma_bound(sp)
    rows += [("gamma_bound", bound), ("dimension", d)]
    th = b.get("thermal")
    Hf, beta = (_gibbs_block(th, "thermal") if th else (None, None))
    ent = fl.mean_v_entropy_identity(sp, Hf, beta)
    rows += [(f"entropy_term:{k}", v) for k, v in ent.terms.items()]
    rows += [(f"entropy_residual:{k}", v) for k, v in ent.residuals.items()]
    if chn.is_unital(sp.channel) and ms.check_microreversible(sp.P, sp.Q).ok:
        rows.append(("crooks_residual", fl.crooks_check(sp)))
    write_csv(os.path.join(out, pre + "protocol_summary.csv"), ["quantity", "value"], rows)
    lams = b.get("lambdas", [-1.0, -0.5, 0.5, 1.0])
    mrows = []
    for lam in lams:
        a, c, r = fl.mgf_identity(sp, lam)
        mrows.append((lam, a, c, r))
    write_csv(os.path.join(out, pre + "protocol_mgf.csv"),
              ["lambda", "chi_forward_lambda_minus_1", "chi_reverse_minus_lambda", "relative_residual"], mrows)
    print(f"gamma = {g_closed:.17g}  <e^-v> = {lhs:.17g}  <v> = {dist.mean():.17g}")


def run_feedback(sc, out, args):
    b = sc["feedback"]
    s, em = build_feedback(b)
    pre = _prefix(sc)
    if em is not None:
        s_used = fb.with_error_model(s, em)
    else:
        s_used = s
    dist = fb.feedback_forward_pdf(s_used)
    write_csv(os.path.join(out, pre + "feedback_pdf.csv"), ["v", "probability"], zip(dist.v, dist.prob))
    lhs, g, res = fb.feedback_jarzynski(s_used)
    rows = [("gamma_closed", g), ("gamma_sum", fb.feedback_efficacy(s_used, "sum")),
            ("mean_exp_minus_v", lhs), ("jarzynski_residual", res), ("mean_v", dist.mean())]
    if all(len(m.kraus) == 1 for m in s.branch_maps):
        Ub = [m.kraus[0] for m in s.branch_maps]
        rq = [s.rho_q(j) for j in range(s.n_branches)]
        if em is None:
            rows.append(("gamma_unitary_closed_form", fb.unitary_feedback_gamma(s.mid, Ub, rq)))
        else:
            rows.append(("gamma_classical_error_closed_form",
                         fb.classical_error_gamma(s.mid, Ub, rq, em.confusion)))
    if em is not None:
        mi = fb.mutual_info_observable_pdf(s, em)
        rows += [("information_integral", mi.integral), ("information_pseudo_total", mi.pseudo_total),
                 ("information_closed_form", mi.closed_form), ("mean_information", mi.mean_information)]
    write_csv(os.path.join(out, pre + "feedback_summary.csv"), ["quantity", "value"], rows)
    mrows = []
    for lam in b.get("lambdas", [-1.0, -0.5, 0.5, 1.0]):
        mrows.append((lam, *fb.feedback_mgf_identity(s_used, lam)))
    write_csv(os.path.join(out, pre + "feedback_mgf.csv"),
              ["lambda", "chi_forward", "closed_form", "chi_reverse", "relative_residual"], mrows)
    print(f"gamma = {g:.17g}  <e^-v> = {lhs:.17g}")


def _anneal_rows(row, keys=("J", "t_f_us", "kappa")):
    fixed = [row[k] for k in keys]
    skip = set(keys) | {"J", "t_f", "kappa"}
    return [(*fixed, k, v) for k, v in row.items() if k not in skip]


def run_anneal(sc, out, args):
    b = sc["anneal"]
    spec = build_anneal(b, sc["_dir"], args.schedule)
    opts = ame.SolverOptions(ode_tol=args.ode_tol, record=bool(b.get("time_series")))
    pre = _prefix(sc)
    sw = b.get("sweep")
    if sw:
        rows = ex.sweep(spec, sw["key"], sw["values"], opts, args.threads)
        long = [r for row in rows for r in _anneal_rows(row)]
        write_csv(os.path.join(out, pre + "anneal_sweep.csv"), ["J", "t_f_us", "kappa", "quantity", "value"], long)
        worst = max(max(r["qje_residual"], r["moment_residual"]) for r in rows)
        print(f"{len(rows)} sweep points, worst identity residual {worst:.3e}")
        return
    sim = ex.simulate(spec, opts)
    lhs, rhs, res = ex.qje_experiment_check(sim)
    _, m_rhs, m_res = ex.first_moment_check(sim)
    st = sim.stats
    write_json(os.path.join(out, pre + "transition_matrix.json"),
               {"M": st.M, "labels": st.labels, "eps0": st.eps0, "eps1": st.eps1,
                "column_sums": st.M.sum(axis=0), "spec": ame.spec_to_json(spec), "ode_tol": args.ode_tol})
    rows = [("mean_v", sim.mean_v), ("qje_lhs", lhs), ("gamma", rhs), ("qje_residual", res),
            ("moment_rhs", m_rhs), ("moment_residual", m_res), ("n_steps", st.result.n_steps),
            ("n_rejected", st.result.n_rejected), ("trace_residual", st.result.trace_residual)]
    rows += [(f"f_{lab}", x) for lab, x in zip(st.labels, sim.f)]
    write_csv(os.path.join(out, pre + "anneal_summary.csv"), ["quantity", "value"], rows)
    if b.get("time_series"):
        ts = ame.time_series(st.result, ame.gibbs_at(spec, 0.0))
        long = [(r[0], k, p, r[-1]) for r in ts for k, p in enumerate(r[1:-1])]
        write_csv(os.path.join(out, pre + "time_series.csv"), ["t_us", "level", "population", "trace_residual"],
                  long)
    print(f"<v> = {sim.mean_v:.17g}  gamma = {rhs:.17g}  QJE residual {res:.3e}  moment residual {m_res:.3e}")


def _fit_inputs(b, base_dir, args):
    tmpl = build_anneal(b["spec"], base_dir, args.schedule) if "spec" in b else ame.reference_spec()
    opts = ame.SolverOptions(ode_tol=args.ode_tol)
    if "data" in b:
        pts = ex.read_counts_csv(os.path.join(base_dir, b["data"]), tmpl)
    else:
        syn = b["synthetic"]
        shots = syn.get("shots", 10 ** 6)
        rng = np.random.default_rng(args.seed)
        pts = ex.synthetic_points(tmpl, [tuple(g) for g in syn["grid"]], float(syn["kappa"]),
                                  None if shots is None else int(shots), rng, opts, args.threads)
    return tmpl, opts, pts


def _do_fit(pts, tmpl, opts, kappa_range, per_decade, out, args, pre=""):
    res = ex.fit_kappa(pts, tmpl, kappa_range, opts, per_decade, threads=args.threads)
    res.settings.update({"seed": args.seed, "threads": args.threads})
    write_json(os.path.join(out, pre + "fit_report.json"), res.to_json())
    write_csv(os.path.join(out, pre + "msd_curve.csv"), ["kappa", "msd"], sorted(res.msd_curve))
    flags = [n for n, v in (("boundary", res.boundary), ("under-determined", res.underdetermined)) if v]
    print(f"kappa_hat = {res.kappa_hat:.17g}  msd = {res.msd_min:.3e}" + (f"  flagged: {', '.join(flags)}" if flags else ""))
    return res


def run_fit(sc, out, args):
    b = sc["fit"]
    tmpl, opts, pts = _fit_inputs(b, sc["_dir"], args)
    pre = _prefix(sc)
    if "synthetic" in b and b.get("write_counts", True) and all(p.counts is not None for p in pts):
        ex.write_counts_csv(os.path.join(out, pre + "synthetic_counts.csv"), pts)
    _do_fit(pts, tmpl, opts, tuple(b.get("kappa_range", (1e-4, 1e-2))), int(b.get("per_decade", 11)), out,
            args, pre)


RUNNERS = {"protocol": run_protocol, "feedback": run_feedback, "anneal": run_anneal, "fit": run_fit}


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    rep = validate_scenario(sc, args)
    if not rep["ok"]:
        for v in rep["violations"]:
            print(f"validation: {v}", file=sys.stderr)
        return EXIT_VALIDATION
    out = output_dir(sc, args)
    RUNNERS[sc["_kind"]](sc, out, args)
    return EXIT_OK


def cmd_fit(args) -> int:
    if not os.path.exists(args.data):
        raise ValidationError(f"data file {args.data} does not exist")
    if args.spec:
        with open(args.spec) as fh:
            obj = json.load(fh)
        obj = obj.get("anneal", obj)
        tmpl = build_anneal(obj, os.path.dirname(os.path.abspath(args.spec)), args.schedule)
    else:
        tmpl = ame.reference_spec()
        if args.schedule:
            tmpl = ame.with_params(tmpl, schedule=ame.schedule_from_csv(args.schedule))
    pts = ex.read_counts_csv(args.data, tmpl)
    lo, hi = args.kappa_range
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    _do_fit(pts, tmpl, ame.SolverOptions(ode_tol=args.ode_tol), (lo, hi), args.per_decade, out, args)
    return EXIT_OK


def cmd_selftest(args) -> int:
    numbers = None
    if args.criteria:
        numbers = [int(x) for x in args.criteria.split(",")]
        bad = [n for n in numbers if n not in acceptance.CRITERIA]
        if bad:
            raise ValidationError(f"unknown criteria {bad}")
    kw = {}
    if args.ode_tol_given:
        kw["ode_tol"] = args.ode_tol
    results = acceptance.run(numbers, quick=args.quick, seed=args.seed, tol_scale=args.tol_scale,
                             threads=args.threads, **kw)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_json(os.path.join(args.out, "selftest.json"), [r.to_json() for r in results])
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} criteria passed")
    return EXIT_OK if n_fail == 0 else EXIT_NUMERICAL


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker processes for sweeps and fits (default: logical cores)")
    common.add_argument("--ode-tol", type=float, default=None, help="master-equation step tolerance")
    common.add_argument("--schedule", help="CSV with columns s, A, B overriding the anneal schedule")
    p = argparse.ArgumentParser(prog="fluxtheo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("validate", parents=[common], help="schema and physics checks of a scenario")
    v.add_argument("scenario")
    r = sub.add_parser("run", parents=[common], help="run a scenario and write CSV/JSON results")
    r.add_argument("scenario")
    f = sub.add_parser("fit", parents=[common], help="fit kappa to measured counts")
    f.add_argument("data", help="CSV with columns J, t_f_us, state_label, count")
    f.add_argument("spec", nargs="?", help="anneal spec JSON used as the template")
    f.add_argument("--kappa-range", type=float, nargs=2, default=(1e-4, 1e-2), metavar=("LO", "HI"))
    f.add_argument("--per-decade", type=int, default=11)
    s = sub.add_parser("selftest", parents=[common], help="run the acceptance suite")
    s.add_argument("--quick", action="store_true", help="fast subset (criteria 1-6 and 10)")
    s.add_argument("--criteria", help="comma-separated criterion numbers")
    s.add_argument("--tol-scale", type=float, default=1.0, help="multiply every acceptance tolerance")
    return p


COMMANDS = {"validate": cmd_validate, "run": cmd_run, "fit": cmd_fit, "selftest": cmd_selftest}


def _setup_logging():
    level = os.environ.get("FLUXTHEO_LOG", "WARNING").upper()
    level = int(level) if level.isdigit() else logging.getLevelName(level)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    args.ode_tol_given = args.ode_tol is not None
    if args.ode_tol is None:
        args.ode_tol = ame.TOL.ode
    if not args.ode_tol > 0:
        print("error: --ode-tol must be positive", file=sys.stderr)
        return EXIT_VALIDATION
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    if args.schedule and not os.path.exists(args.schedule):
        print(f"error: schedule file {args.schedule} does not exist", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DomainError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

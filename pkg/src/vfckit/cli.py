"""Command dispatch: ``vfckit <command> <scenario|gallery:NAME> [flags]``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from fractions import Fraction
from typing import Optional

import numpy as np

from .bundle import verify_bundle_extension
from .errors import VfckitError
from .gcs import EmbeddingRecord, build_gcs, identity_map, verify_embedding_record, verify_gcs_axioms
from .integrate import (
    Correspondence,
    composition_pairing,
    correspondence_apply,
    form_on_chart,
    gcs_partition,
    integrate_on_perturbed_zero_set,
    kernel_check,
    output_degree,
    projection_formula_check,
    pushout,
    stokes_check,
)
from .kuranishi import verify_change, verify_structure_cocycle
from .perturbation import (
    MultivaluedPerturbation,
    build_cfp_system,
    build_multivalued_perturbation,
    empty_cfp,
    verify_cfp,
    verify_multisection,
    verify_mvp_compatibility,
)
from .report import FAIL, GRID, PASS, TOL, Check, Report, frac_str
from .scenario import Scenario, load_scenario
from .vfc import boundary_vanishing_check, level_sweep, virtual_chain_dim0

COMMANDS = ("verify", "build-gcs", "perturb", "count", "boundary", "sweep", "pushout", "stokes", "compose", "invariance")


def _presentations(sc: Scenario) -> dict:
    return sc.presentations or {"all": sorted(sc.charts)}


def _gcs(sc: Scenario, labels) -> tuple:
    return build_gcs(sc.structure(list(labels)))


def _mismatch(command: str, why: str):
    raise VfckitError("COMMAND_SCENARIO_MISMATCH", f"{command}: {why}")


def _eps_list(sc: Scenario, flags: dict, default=(0.1,)) -> list:
    if flags.get("epsilon") is not None:
        return [float(flags["epsilon"])]
    return [float(e) for e in sc.setting("epsilon", default)]


# -- commands ----------------------------------------------------------------------


def cmd_verify(sc: Scenario, flags: dict) -> Report:
    rep = Report("verify")
    for lab in sorted(sc.charts):
        rep.merge(sc.charts[lab].verify(), f"{lab}.")
    ks = sc.structure()
    for c in ks.changes:
        rep.merge(verify_change(c, ks.charts), f"{c.label}.")
        datum = ks.extension_data.get((c.src, c.dst))
        if datum is not None:
            rep.merge(verify_bundle_extension(datum, c.embedding(ks.charts)), f"{c.label}.extension.")
    rep.merge(verify_structure_cocycle(ks), "structure.")
    return rep


def cmd_build_gcs(sc: Scenario, flags: dict) -> Report:
    rep = Report("build-gcs")
    for name, labels in _presentations(sc).items():
        gcs, rec, last = _gcs(sc, labels)
        rep.merge(verify_gcs_axioms(gcs), f"{name}.axioms.")
        rep.merge(verify_embedding_record(rec), f"{name}.KG.")
        rep.results[f"{name}.pieces"] = gcs.pieces()
        rep.results[f"{name}.vdim"] = gcs.vdim
        rep.results[f"{name}.domains"] = {p: gcs.charts[p].domain.to_dict() for p in gcs.pieces()}
    return rep


def cmd_perturb(sc: Scenario, flags: dict) -> Report:
    rep = Report("perturb")
    seed = int(flags.get("seed") or 0)
    n = int(flags.get("n") or 100)
    for name, labels in _presentations(sc).items():
        gcs, _, _ = _gcs(sc, labels)
        if any(gcs.charts[p].rank for p in gcs.pieces()):
            mvp = build_multivalued_perturbation(gcs, seed=seed)
            for p in gcs.pieces():
                rep.merge(verify_multisection(mvp.sections[p], gcs.charts[p]), f"{name}.{p}.multisection.")
            rep.merge(verify_mvp_compatibility(gcs, mvp, n=n), f"{name}.compatibility.")
            text = mvp.serialize()
            rep.results[f"{name}.multisection_blocks"] = text
            rep.results[f"{name}.multisection_sha256"] = hashlib.sha256(text.encode()).hexdigest()
            rep.results[f"{name}.xi"] = {p: [float(v) for v in x] for p, x in sorted(mvp.xi.items())}
        cfps, crep = build_cfp_system(gcs, eps=_eps_list(sc, flags))
        rep.merge(crep, f"{name}.cf.")
        for p in gcs.pieces():
            rep.merge(verify_cfp(cfps[p], gcs.charts[p]), f"{name}.{p}.cfp.")
        text = "".join(cfps[p].serialize() for p in gcs.pieces())
        rep.results[f"{name}.cfp_text"] = text
        rep.results[f"{name}.cfp_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    return rep


def cmd_count(sc: Scenario, flags: dict) -> Report:
    if sc.vdim != 0:
        _mismatch("count", f"needs virtual dimension 0, scenario has {sc.vdim}")
    rep = Report("count")
    n = int(flags.get("n") or 100)
    seed = int(flags.get("seed") or 0)
    grid = int(flags.get("grid") or GRID)
    totals = {}
    for name, labels in _presentations(sc).items():
        gcs, _, _ = _gcs(sc, labels)
        mvp = _declared_or_built(sc, gcs, seed)
        rep.results[f"{name}.perturbation"] = "declared" if mvp.seed is None else "built"
        chain, r = virtual_chain_dim0(gcs, mvp, n, grid=grid, scenario=sc.name)
        rep.merge(r, f"{name}.")
        half, _ = virtual_chain_dim0(gcs, mvp, n, supports=("Kprime",), delta_U=TOL["delta_U"] / 2, grid=grid)
        same = half.total == chain.total
        rep.add(Check(f"{name}.neighbourhood_halving", PASS if same else FAIL, witness=None if same else [frac_str(chain.total), frac_str(half.total)]))
        totals[name] = chain.total
    if len(totals) > 1:
        same = len(set(totals.values())) == 1
        rep.add(Check("presentations_agree", PASS if same else FAIL, witness=None if same else {k: frac_str(v) for k, v in totals.items()}))
    rep.results["total"] = next(iter(totals.values()))
    rep.results["totals"] = totals
    return rep


def _declared_or_built(sc: Scenario, gcs, seed: int) -> MultivaluedPerturbation:
    """Multisection blocks of the scenario when they cover every piece, else a seeded build."""
    declared = {chart: ms for chart, ms in sc.multisections.values()}
    if declared and all(p in declared for p in gcs.pieces()):
        for p in gcs.pieces():
            r = verify_multisection(declared[p], gcs.charts[p])
            if not r.passed:
                raise VfckitError("TYPE_ERROR", f"declared multisection on {p} is not equivariant", witness=r.failures()[0].witness)
        return MultivaluedPerturbation({p: declared[p] for p in gcs.pieces()}, seed=None)
    return build_multivalued_perturbation(gcs, seed=seed)


def _one_gcs(sc: Scenario, command: str):
    pres = _presentations(sc)
    if len(pres) != 1:
        _mismatch(command, "scenario has several presentations")
    return _gcs(sc, next(iter(pres.values())))[0]


def cmd_boundary(sc: Scenario, flags: dict) -> Report:
    if sc.vdim != 1 or not sc.has_boundary:
        _mismatch("boundary", "needs virtual dimension 1 with boundary")
    gcs = _one_gcs(sc, "boundary")
    n = int(flags.get("n") or 100)
    mvp = build_multivalued_perturbation(gcs, seed=int(flags.get("seed") or 0))
    return boundary_vanishing_check(gcs, mvp, n, grid=int(flags.get("grid") or GRID))


def cmd_sweep(sc: Scenario, flags: dict) -> Report:
    if sc.vdim != 1 or sc.setting("sweep") is None:
        _mismatch("sweep", "needs virtual dimension 1 and a sweep function")
    gcs = _one_gcs(sc, "sweep")
    n = int(flags.get("n") or 100)
    seed = int(flags.get("seed") or 0)
    mvp = build_multivalued_perturbation(gcs, seed=seed)
    return level_sweep(gcs, mvp, n, sc.setting("sweep"), sc.setting("levels", []), seed=seed, above=sc.setting("above"))


def _correspondence(sc: Scenario, label: str) -> Correspondence:
    spec = sc.correspondences[label]
    chart = sc.charts[spec.chart]
    return Correspondence(label, chart, sc.maps[spec.source].expr, sc.maps[spec.target].expr, empty_cfp(chart))


def cmd_pushout(sc: Scenario, flags: dict) -> Report:
    hname = sc.setting("pushout_form")
    if hname is None:
        _mismatch("pushout", "scenario declares no pushout_form")
    rep = Report("pushout")
    spec = sc.forms[hname]
    mode = flags.get("mode")
    eps_list = _eps_list(sc, flags)
    samples = list(sc.setting("grid", []))
    if sc.correspondences:
        corr = _correspondence(sc, sorted(sc.correspondences)[0])
        mode = mode or "grid"
        deg = output_degree(spec.form.degree, corr.target.dim, corr.chart.vdim)
        rep.add(Check("degree_bookkeeping", PASS if deg >= 0 else FAIL, float(deg)))
        for e in eps_list:
            out = correspondence_apply(corr, spec.form, e, mode, samples, rho=_unit_form(corr.target.dim))
            rep.results[f"eps={e:g}"] = out
        return rep
    pres = _presentations(sc)
    name = sorted(pres)[-1]
    gcs, _, _ = _gcs(sc, pres[name])
    mname = sc.setting("pushout_map")
    fmap = {p: sc.maps[mname].expr for p in gcs.pieces()} if mname else None
    mode = mode or ("grid" if fmap and samples else "point")
    dimM = next(iter(fmap.values())).dim if fmap else 0
    deg = output_degree(spec.form.degree, dimM, gcs.vdim)
    rep.add(Check("degree_bookkeeping", PASS if deg >= 0 else FAIL, float(deg), None if deg >= 0 else {"deg_h": spec.form.degree, "dim_M": dimM, "vdim": gcs.vdim}))
    forms = {p: form_on_chart(spec.form, gcs.charts[p], spec.chart) for p in gcs.pieces()}
    cfps, crep = build_cfp_system(gcs, eps=eps_list, f=fmap)
    rep.merge(crep, "cf.")
    for e in eps_list:
        val = pushout(gcs, cfps, forms, e, mode, fmap, rho=_unit_form(dimM), samples=samples)
        rep.results[f"eps={e:g}"] = val
        if mode == "point":
            twice = pushout(gcs, cfps, {p: f.scale(2) for p, f in forms.items()}, e, mode)
            rep.add(Check.from_residual(f"linearity[eps={e:g}]", abs(twice - 2 * val), 1e-10))
            if len(gcs.pieces()) > 1:
                alt = pushout(gcs, cfps, forms, e, mode, pou=gcs_partition(gcs, margin=0.05))
                rep.add(Check.from_residual(f"partition_independence[eps={e:g}]", abs(alt - val), _tol(flags, 1e-6)))
    rep.results["mode"] = mode
    return rep


def _unit_form(dim: int):
    from .orbifold import DifferentialForm

    return DifferentialForm.volume(dim) if dim else DifferentialForm.function(0, 1)


def _tol(flags: dict, default: float) -> float:
    return float(flags["tol"]) if flags.get("tol") is not None else default


def cmd_stokes(sc: Scenario, flags: dict) -> Report:
    if sc.vdim != 1 or sc.setting("stokes_form") is None:
        _mismatch("stokes", "needs virtual dimension 1 and a stokes_form")
    gcs = _one_gcs(sc, "stokes")
    spec = sc.forms[sc.setting("stokes_form")]
    eps_list = _eps_list(sc, flags)
    cfps, crep = build_cfp_system(gcs, eps=eps_list)
    rep = stokes_check(gcs, cfps, form_on_chart(spec.form, gcs.charts[gcs.pieces()[0]], spec.chart), eps_list, q=16, q_low=8, tol=_tol(flags, 1e-6))
    rep.merge(crep, "cf.")
    return rep


def cmd_compose(sc: Scenario, flags: dict) -> Report:
    if len(sc.correspondences) < 2:
        _mismatch("compose", "needs two correspondences")
    rep = Report("compose")
    tol = _tol(flags, 1e-8)
    labels = sorted(sc.correspondences)
    c21, c32 = _correspondence(sc, labels[0]), _correspondence(sc, labels[1])
    rep.add(c21.check_submersive())
    M = c32.chart
    e = float(flags.get("epsilon") or 0.0)
    rows = []
    for k, h2, expected in sc.setting("kernel", []):
        direct, iterated = kernel_check(c21, sc.forms[k].form, sc.forms[h2].form, e, M)
        rep.add(Check.from_residual(f"kernel[{k},{h2}].gap", abs(direct - iterated), tol))
        rep.add(Check.from_residual(f"kernel[{k},{h2}].oracle", abs(direct - expected), tol))
        rows.append({"layer": "kernel", "h": k, "rho": h2, "direct": direct, "iterated": iterated, "expected": expected})
    for h, rho, expected in sc.setting("compose", []):
        direct, iterated = composition_pairing(c21, c32, sc.forms[h].form, sc.forms[rho].form, e, M)
        rep.add(Check.from_residual(f"compose[{h},{rho}].gap", abs(direct - iterated), tol))
        rep.add(Check.from_residual(f"compose[{h},{rho}].oracle", abs(direct - expected), tol))
        rows.append({"layer": "correspondence", "h": h, "rho": rho, "direct": direct, "iterated": iterated, "expected": expected})
    samples = list(sc.setting("grid", [0.25, 0.5, 0.75]))
    for k, g in zip([r[0] for r in sc.setting("kernel", [])], ["y1", "exp(y1)", "y1^2"]):
        res = projection_formula_check(c21, sc.forms[k].form, g, e, samples)
        rep.add(Check.from_residual(f"projection_formula[{k},{g}]", res, tol))
    if sc.setting("compose"):
        # the identity correspondence must reproduce the plain integral
        h = sc.forms[sc.setting("compose")[0][0]].form
        paired = correspondence_apply(c32, h, e, "pair", rho=_one_form(c32.target.dim))
        pts, wts = M.domain.quadrature(16)
        plain = float(np.dot(h.dense(pts)[:, 0], wts))
        rep.add(Check.from_residual("identity_chain", abs(paired - plain), tol))
    rep.results["rows"] = rows
    return rep


def _one_form(dim: int):
    from .orbifold import DifferentialForm

    return DifferentialForm.function(dim, 1)


def cmd_invariance(sc: Scenario, flags: dict) -> Report:
    rep = Report("invariance")
    pres = _presentations(sc)
    if sc.vdim == 0 and len(pres) >= 2:
        return _invariance_presentations(sc, flags, rep)
    if sc.vdim == 1 and sc.has_boundary:
        return _invariance_cobordism(sc, flags, rep)
    _mismatch("invariance", "needs two presentations of a virtual dimension 0 space, or a cobordism")


def _invariance_presentations(sc: Scenario, flags: dict, rep: Report) -> Report:
    pres = _presentations(sc)
    names = sorted(pres, key=lambda k: len(pres[k]))
    small, big = names[0], names[-1]
    gs, rec_s, _ = _gcs(sc, pres[small])
    gb, rec_b, _ = _gcs(sc, pres[big])
    n = int(flags.get("n") or 100)
    seeds = [int(flags["seed"])] if flags.get("seed") is not None else [int(s) for s in sc.setting("seeds", [0])]
    counts = {}
    for seed in seeds:
        a, _ = virtual_chain_dim0(gs, build_multivalued_perturbation(gs, seed=seed), n)
        b, _ = virtual_chain_dim0(gb, build_multivalued_perturbation(gb, seed=seed), n)
        same = a.total == b.total
        rep.add(Check(f"count_equal[seed={seed}]", PASS if same else FAIL, witness=None if same else [frac_str(a.total), frac_str(b.total)]))
        counts[seed] = {small: a.total, big: b.total}
    rep.results["counts"] = counts
    hname = sc.setting("pushout_form")
    if hname:
        spec = sc.forms[hname]
        cfps, crep = build_cfp_system(gb)
        rep.merge(crep, "cf.")
        forms = {p: form_on_chart(spec.form, gb.charts[p], spec.chart) for p in gb.pieces()}
        gaps = {}
        for e in _eps_list(sc, flags, (0.1,))[:1] if flags.get("epsilon") is None else _eps_list(sc, flags):
            two = pushout(gb, cfps, forms, e)
            one = 0.0
            for p in gs.pieces():
                one += integrate_on_perturbed_zero_set(gs.charts[p], cfps[p], e, form_on_chart(spec.form, gs.charts[p], spec.chart))
            gaps[f"{e:g}"] = {small: one, big: two}
            rep.add(Check.from_residual(f"pushout_gap[eps={e:g}]", abs(one - two), _tol(flags, 1e-6)))
        rep.results["pushout"] = gaps
    rep.merge(verify_embedding_record(rec_s), f"KG[{small}].")
    rep.merge(verify_embedding_record(rec_b), f"KG[{big}].")
    gg = EmbeddingRecord(
        "GG",
        gs.charts,
        gb.charts,
        {p: identity_map(gs.charts[p], p, gs.charts[p].domain) for p in gs.pieces() if p in gb.charts},
        gs.changes,
        gb.changes,
        {gs.node_of(p): gb.node_of(p) for p in gs.pieces() if p in gb.charts},
        set(gs.order),
        set(gb.order),
    )
    rep.merge(verify_embedding_record(gg), "GG.")
    return rep


def _invariance_cobordism(sc: Scenario, flags: dict, rep: Report) -> Report:
    """The two ends of a vdim-1 cobordism carry counts of opposite sign."""
    gcs = _one_gcs(sc, "invariance")
    n = int(flags.get("n") or 100)
    mvp = build_multivalued_perturbation(gcs, seed=int(flags.get("seed") or 0))
    b = boundary_vanishing_check(gcs, mvp, n)
    pts = b.results["zeros"]["points"]
    mults = sorted(Fraction(p["multiplicity"]) for p in pts)
    ok = len(mults) == 2 and mults[0] == -mults[1] and mults[1] != 0
    rep.add(Check("cobordism_ends_opposite", PASS if ok else FAIL, witness=None if ok else [frac_str(m) for m in mults]))
    rep.results["ends"] = [frac_str(m) for m in mults]
    if sc.setting("stokes_form"):
        spec = sc.forms[sc.setting("stokes_form")]
        cfps, _ = build_cfp_system(gcs)
        eps = _eps_list(sc, flags)[:1]
        st = stokes_check(gcs, cfps, form_on_chart(spec.form, gcs.charts[gcs.pieces()[0]], spec.chart), eps, tol=_tol(flags, 1e-6))
        rep.merge(st, "chain_map.")
    return rep


DISPATCH = {
    "verify": cmd_verify,
    "build-gcs": cmd_build_gcs,
    "perturb": cmd_perturb,
    "count": cmd_count,
    "boundary": cmd_boundary,
    "sweep": cmd_sweep,
    "pushout": cmd_pushout,
    "stokes": cmd_stokes,
    "compose": cmd_compose,
    "invariance": cmd_invariance,
}


def run(command: str, scenario, flags: Optional[dict] = None) -> Report:
    """Run one command on a scenario (object or reference) and return its report."""
    flags = dict(flags or {})
    if command not in DISPATCH:
        raise VfckitError("TYPE_ERROR", f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    start = time.perf_counter()
    rep = DISPATCH[command](sc, flags)
    rep.command = command
    rep.meta = {
        "scenario": sc.name,
        "scenario_hash": sc.digest(),
        "seed": int(flags.get("seed") or 0),
        "flags": {k: v for k, v in sorted(flags.items()) if k not in ("json", "csv") and v is not None},
        "wall_time": round(time.perf_counter() - start, 6),
    }
    return rep


def report_json(rep: Report, with_time: bool = True) -> str:
    d = rep.to_dict()
    if not with_time:
        d.pop("wall_time", None)
    return json.dumps(d, indent=2, sort_keys=True)


def report_csv(rep: Report) -> str:
    """(epsilon, residual) ladder for Stokes; otherwise one row per check."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    ladder = rep.results.get("ladder")
    if ladder:
        w.writerow(["epsilon", "residual", "residual_low_order"])
        for row in ladder:
            low = row.get("residual_low_order")
            w.writerow([float(row["epsilon"]), repr(float(row["residual"])), "" if low is None else repr(float(low))])
    else:
        w.writerow(["check", "status", "residual"])
        for c in rep.checks:
            w.writerow([c.name, c.status, "" if c.residual is None else repr(float(c.residual))])
    return buf.getvalue()


def _summary(rep: Report) -> str:
    lines = [f"{rep.command} {rep.meta.get('scenario', '')}: {'PASS' if rep.passed else 'FAIL'}"]
    if "total" in rep.results:
        lines.append(f"total = {frac_str(rep.results['total'])}")
    for k, v in rep.results.items():
        if k.startswith("eps="):
            lines.append(f"{k}: {json.dumps(_plainish(v))}")
    for c in rep.checks:
        res = "" if c.residual is None else f" {float(c.residual):.3e}"
        lines.append(f"  {c.status} {c.name}{res}")
    return "\n".join(lines)


def _plainish(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return float(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vfckit", description="Virtual fundamental chains on finite-dimensional Kuranishi models.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("scenario", help="scenario file or gallery:NAME")
    p.add_argument("--n", type=int, default=None, help="multisection parameter n (t = 1/n)")
    p.add_argument("--epsilon", type=float, default=None, help="CF-perturbation parameter")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grid", type=int, default=None, help="Newton seed grid per dimension")
    p.add_argument("--tol", type=float, default=None, help="tolerance of the command's main assertion")
    p.add_argument("--mode", choices=("point", "pair", "grid"), default=None, help="pushout mode")
    p.add_argument("--json", default=None, help="write the report as JSON")
    p.add_argument("--csv", default=None, help="write a CSV table")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "scenario")}
    try:
        rep = run(args.command, args.scenario, flags)
    except VfckitError as exc:
        print(json.dumps({"error": exc.to_dict()}, indent=2, sort_keys=True), file=sys.stderr)
        return 2
    print(_summary(rep))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(report_json(rep) + "\n")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report_csv(rep))
    return 0 if rep.passed else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

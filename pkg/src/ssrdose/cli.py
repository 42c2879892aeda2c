"""Command line driver: ``ssrdose {contrast,power,samplesize,ssr,simulate} SPEC``.

SPEC is a JSON design file or the name of a bundled one (``table1`` ...
``table4``).  Machine output is JSON for one-shot calculations and CSV for
contrast matrices and simulation tables.  Exit status 0 on success, 2 for
invalid input and 3 for numerical failures.
"""

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from . import bayespower, design, freqpower, simengine
from .errors import SsrError, ValidationError
from .gaussian import DEFAULT_QMC

SIMULATION_COLUMNS = (
    "scenario", "timing", "method", "pct_unfavorable", "pct_favorable", "pct_promising",
    "metric_mean", "metric_sd", "power", "mean_ss", "mean_incr", "replicates", "mc_se_power",
)


# --------------------------------------------------------------------------
# spec file reading
# --------------------------------------------------------------------------

class _Field:
    """Path-tracking accessor so errors point at the offending field."""

    def __init__(self, value, path="$"):
        self.value, self.path = value, path

    def has(self, key):
        return isinstance(self.value, dict) and key in self.value

    def get(self, key, default=...):
        if not isinstance(self.value, dict):
            raise ValidationError(f"{self.path}: expected an object", code="E_SPEC_TYPE")
        if key not in self.value:
            if default is ...:
                raise ValidationError(f"{self.path}.{key}: required field missing", code="E_SPEC_FIELD")
            return _Field(default, f"{self.path}.{key}")
        return _Field(self.value[key], f"{self.path}.{key}")

    def items(self):
        if not isinstance(self.value, list):
            raise ValidationError(f"{self.path}: expected a list", code="E_SPEC_TYPE")
        return [_Field(v, f"{self.path}[{i}]") for i, v in enumerate(self.value)]

    def number(self):
        if isinstance(self.value, bool) or not isinstance(self.value, (int, float)):
            raise ValidationError(f"{self.path}: expected a number", code="E_SPEC_TYPE")
        return float(self.value)

    def vector(self):
        try:
            arr = np.asarray(self.value, dtype=float)
        except (TypeError, ValueError):
            arr = None
        if arr is None or arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ValidationError(f"{self.path}: expected a list of numbers", code="E_SPEC_TYPE")
        return arr

    def matrix(self):
        try:
            arr = np.asarray(self.value, dtype=float)
        except (TypeError, ValueError):
            arr = None
        if arr is None or arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ValidationError(f"{self.path}: expected a matrix of numbers", code="E_SPEC_TYPE")
        return arr

    def text(self):
        if not isinstance(self.value, str):
            raise ValidationError(f"{self.path}: expected a string", code="E_SPEC_TYPE")
        return self.value


def _anchored(f, build):
    """Run ``build`` and prefix any validation message with the field path."""
    try:
        return build()
    except SsrError as exc:
        raise type(exc)(f"{f.path}: {exc}", code=exc.code) from None


@dataclass
class Timing:
    label: str
    design: design.TwoStageDesign


@dataclass
class Study:
    doses: np.ndarray
    contrast_labels: list
    timings: list
    methods: list
    scenarios: list
    anticipated_mu: np.ndarray
    rounding: str
    reference: str
    replicates: int
    seed: int
    pp_scan_step: int


def _contrasts(test, doses, phi):
    if test.has("contrasts"):
        C = test.get("contrasts").matrix()
        return C, [f"contrast_{i + 1}" for i in range(C.shape[0])]
    shapes = test.get("shapes")
    rows, labels = [], []
    for s in shapes.items():
        model = s.get("model").text()
        params = {key: s.get(key).number() for key in ("ed50", "delta", "h") if s.has(key)}
        if s.has("values"):
            params["values"] = s.get("values").vector()
        prof = _anchored(s, lambda: design.shape_profile(model, doses, **params))
        rows.append(_anchored(s, lambda: design.optimal_contrast(prof, phi)))
        labels.append(s.get("label", model).text())
    return np.array(rows), labels


def _method(f):
    name = f.get("name").text()
    assumed = f.get("assumed_mu").vector() if f.has("assumed_mu") else None
    mu0 = tau0 = None
    if f.has("prior"):
        prior = f.get("prior")
        mu0 = prior.get("mu0").vector()
        tau0 = prior.get("tau0").value
        tau0 = np.asarray(tau0, dtype=float) if isinstance(tau0, list) else prior.get("tau0").number()
    return _anchored(f, lambda: simengine.make_method(name, assumed, mu0, tau0))


def load_study(source):
    """Parse and validate a design spec (path or bundled name)."""
    text = _read_spec_text(source)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"spec is not valid JSON (line {exc.lineno}): {exc.msg}", code="E_SPEC_PARSE") from None
    root = _Field(raw)
    arms = root.get("arms")
    doses = arms.get("doses").vector()
    sigma = arms.get("sigma").number()
    anticipated = arms.get("anticipated_mu").vector() if arms.has("anticipated_mu") else None

    stages = root.get("stages")
    k = doses.size
    equal = np.full(k, 1.0 / k)
    phi1 = stages.get("phi1").vector() if stages.has("phi1") else equal
    phi2 = stages.get("phi2").vector() if stages.has("phi2") else phi1
    _anchored(stages.get("phi1", None), lambda: design.as_allocation(phi1, k))
    _anchored(stages.get("phi2", None), lambda: design.as_allocation(phi2, k))

    test = root.get("test")
    alpha = test.get("alpha").number()
    C, labels = _contrasts(test, doses, phi1)
    rounding = test.get("rounding", "per_arm_equal").text()
    reference = test.get("reference", "normal").text()
    if rounding not in design.ROUNDING_POLICIES:
        raise ValidationError(f"{test.path}.rounding: must be one of {design.ROUNDING_POLICIES}", code="E_ROUNDING")
    if reference not in design.REFERENCES:
        raise ValidationError(f"{test.path}.reference: must be one of {design.REFERENCES}", code="E_REFERENCE")

    ssr = root.get("ssr", {})
    target = ssr.get("target_power", 0.8).number()
    cp_min = ssr.get("cp_min", ssr.get("pp_min", 0.3).value).number()
    scan_step = int(ssr.get("pp_scan_step", 1).number())
    if scan_step < 1:
        raise ValidationError(f"{ssr.path}.pp_scan_step: must be a positive integer", code="E_SCAN_STEP")
    methods = [_method(m) for m in ssr.get("methods", [{"name": "FQ1"}]).items()]

    timing_fields = stages.get("timings").items() if stages.has("timings") else [stages]
    timings = []
    for t in timing_fields:
        n2 = t.get("n2").number()
        if t.has("n_max"):
            n_max = t.get("n_max").number()
        else:
            n_max = n2 + stages.get("n_max_extra", 0.0).number()
        build = lambda: design.TwoStageDesign(
            doses, sigma, phi1, phi2, t.get("n1").number(), n2, C,
            alpha=alpha, beta=1.0 - target, n_max=n_max, cp_min=cp_min,
        )
        timings.append(Timing(t.get("label", "main").text(), _anchored(t, build)))

    sim = root.get("simulate", {})
    scenarios = []
    if sim.has("scenarios"):
        for s in sim.get("scenarios").items():
            scenarios.append((s.get("label").text(), s.get("true_mu").vector()))
    elif sim.has("true_mu"):
        scenarios.append(("main", sim.get("true_mu").vector()))
    for label, mu in scenarios:
        if mu.size != k:
            raise ValidationError(f"{sim.path}: true_mu of scenario {label!r} needs {k} entries", code="E_TRUE_MU")
    for m in methods:
        if m.assumed_mu is not None and m.assumed_mu.size != k:
            raise ValidationError(f"{ssr.path}: assumed_mu of {m.name} needs {k} entries", code="E_METHOD_PARAM")
        if m.rule == "pp" and m.prior.kind == "conjugate" and m.prior.mu0.size != k:
            raise ValidationError(f"{ssr.path}: prior mu0 of {m.name} needs {k} entries", code="E_METHOD_PARAM")
    replicates = int(sim.get("replicates", 1000).number())
    seed = sim.get("seed", 20190521)
    if isinstance(seed.value, bool) or not isinstance(seed.value, int) or not 0 <= seed.value < 2**64:
        raise ValidationError(f"{seed.path}: expected a 64-bit unsigned integer", code="E_SEED")
    seed = seed.value
    return Study(doses, labels, timings, methods, scenarios, anticipated, rounding, reference,
                 replicates, seed, scan_step)


def _read_spec_text(source):
    if os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            return fh.read()
    name = source if source.endswith(".json") else f"{source}.json"
    bundled = resources.files("ssrdose").joinpath("specs", name)
    if bundled.is_file():
        return bundled.read_text(encoding="utf-8")
    raise ValidationError(f"spec file {source!r} not found", code="E_SPEC_MISSING")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _fmt(x):
    return f"{x:.6f}"


def _vector_arg(text, k, name):
    try:
        values = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ValidationError(f"{name}: expected comma-separated numbers", code="E_ARG") from None
    if values.size != k:
        raise ValidationError(f"{name}: expected {k} values, got {values.size}", code="E_DIMENSION_MISMATCH")
    return values


def _pick_timing(study, label):
    if label is None:
        return study.timings[0]
    for t in study.timings:
        if t.label == label:
            return t
    raise ValidationError(f"no timing labelled {label!r}", code="E_TIMING")


def _planning_mu(study, args):
    if args.mu is not None:
        return _vector_arg(args.mu, study.doses.size, "--mu")
    if study.anticipated_mu is not None:
        return study.anticipated_mu
    raise ValidationError("no mean profile: pass --mu or set arms.anticipated_mu", code="E_MU")


def cmd_contrast(study, args, out):
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["contrast"] + [f"dose_{d:g}" for d in study.doses])
    C = study.timings[0].design.contrasts
    for label, row in zip(study.contrast_labels, C):
        writer.writerow([label] + [f"{v:.3f}" for v in np.round(row, 3) + 0.0])


def cmd_power(study, args, out):
    t = _pick_timing(study, args.timing)
    d = t.design
    mu = _planning_mu(study, args)
    N = args.n if args.n is not None else d.n1 + d.n2
    report = {"timing": t.label, "n": N, "mu": mu.tolist(), "alpha": d.alpha, "contrasts": d.m}
    if d.m == 1:
        c = d.contrasts[0]
        report["reference"] = study.reference
        report["power"] = design.single_power(c @ mu, c, d.phi1, d.sigma, N, d.alpha, study.reference)
    else:
        u = design.fixed_critical_value(d.contrasts, d.phi1, d.alpha, DEFAULT_QMC)
        report["critical_value"] = u
        report["power"] = design.mcp_power(mu, d.contrasts, d.phi1, d.sigma, N, u, DEFAULT_QMC)
    json.dump(report, out, indent=2)
    out.write("\n")


def cmd_samplesize(study, args, out):
    t = _pick_timing(study, args.timing)
    d = t.design
    mu = _planning_mu(study, args)
    beta = 1.0 - (args.target_power if args.target_power is not None else d.target_power)
    report = {"timing": t.label, "mu": mu.tolist(), "alpha": d.alpha, "target_power": 1.0 - beta,
              "rounding": study.rounding, "contrasts": d.m}
    if d.m == 1:
        c = d.contrasts[0]
        n = design.single_sample_size(c @ mu, c, d.phi1, d.sigma, d.alpha, beta, study.rounding, study.reference)
        report["reference"] = study.reference
        report["n_required"] = n
        report["power_at_n"] = design.single_power(c @ mu, c, d.phi1, d.sigma, n, d.alpha, study.reference)
    else:
        u = design.fixed_critical_value(d.contrasts, d.phi1, d.alpha, DEFAULT_QMC)
        n = design.mcp_sample_size(mu, d.contrasts, d.phi1, d.sigma, d.alpha, beta, study.rounding,
                                   DEFAULT_QMC, u)
        report["critical_value"] = u
        report["n_required"] = n
        report["power_at_n"] = design.mcp_power(mu, d.contrasts, d.phi1, d.sigma, n, u, DEFAULT_QMC)
    json.dump(report, out, indent=2)
    out.write("\n")


def cmd_ssr(study, args, out):
    t = _pick_timing(study, args.timing)
    d = t.design
    if args.n1 is not None:
        d = replace(d, n1=args.n1, _cache={})
    means = _vector_arg(args.means, d.k, "--means")
    method = _pick_method(study, args.method)
    interim = freqpower.InterimState.from_means(means, d)
    u = d.critical_value(DEFAULT_QMC)
    if method.rule == "cp":
        source = "observed" if method.assumed_mu is None else d.contrasts @ method.assumed_mu
        dec = freqpower.cp_ssr_decide(interim, d, source, u, DEFAULT_QMC)
    else:
        dec = bayespower.pp_ssr_decide(interim, d, method.prior, u, DEFAULT_QMC, study.pp_scan_step)
    report = {
        "timing": t.label,
        "method": method.name,
        "zone": dec.zone,
        "metric_at_n2": dec.metric_at_n2,
        "n2_planned": d.n2,
        "n2_new": dec.n2_new,
        "n_max": d.n_max,
        "t1": interim.t1.tolist(),
        "critical_value": u,
    }
    if method.rule == "pp":
        report["pp_at_zero"] = dec.metric_at_zero
    json.dump(report, out, indent=2)
    out.write("\n")


def _pick_method(study, name):
    if name is None:
        return study.methods[0]
    for m in study.methods:
        if m.name == name:
            return m
    raise ValidationError(f"method {name!r} is not declared in the spec", code="E_METHOD")


def cmd_simulate(study, args, out):
    if not study.scenarios:
        raise ValidationError("spec has no simulate.true_mu or simulate.scenarios", code="E_SIMULATE")
    seed = study.seed if args.seed is None else args.seed
    replicates = study.replicates if args.replicates is None else args.replicates
    rows, dumps = [], []
    for scen_label, mu in study.scenarios:
        if args.scenario and scen_label not in args.scenario:
            continue
        for t in study.timings:
            if args.timing and t.label not in args.timing:
                continue
            for m in study.methods:
                if args.method and m.name not in args.method:
                    continue
                scenario = simengine.Scenario(t.design, mu, m, replicates, seed,
                                              pp_scan_step=study.pp_scan_step,
                                              label=f"{scen_label}/{t.label}/{m.name}")
                rep, metric = simengine.run_study(scenario, workers=args.threads, return_metrics=True)
                rows.append([scen_label, t.label, m.name] + [
                    _fmt(v) if isinstance(v, float) else str(v)
                    for v in (rep.pct_unfavorable, rep.pct_favorable, rep.pct_promising,
                              rep.metric_mean, rep.metric_sd, rep.power, rep.mean_ss,
                              rep.mean_incr, rep.replicates, rep.mc_se_power)
                ])
                if args.dump_metrics:
                    dumps.append((scen_label, t.label, m.name, metric))
    if not rows:
        raise ValidationError("the filters selected no simulation cells", code="E_FILTER")
    if args.dump_metrics:
        _write_metrics(args.dump_metrics, dumps)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SIMULATION_COLUMNS)
    writer.writerows(rows)


def _write_metrics(path, dumps):
    """Write per-replicate metrics and quartiles atomically."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "timing", "method", "replicate", "metric"])
    for scen, timing, method, values in dumps:
        for i, v in enumerate(values):
            writer.writerow([scen, timing, method, i, f"{v:.6f}"])
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)
    quart = path + ".quartiles.csv"
    with open(quart, "w", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "timing", "method", "q25", "q50", "q75"])
        for scen, timing, method, values in dumps:
            w.writerow([scen, timing, method] + [f"{q:.6f}" for q in np.quantile(values, [0.25, 0.5, 0.75])])


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ssrdose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("spec", help="JSON design file or bundled name (table1..table4)")
        return sp

    add("contrast", "print the contrast matrix as CSV")
    for name, text in (("power", "fixed-design power (JSON)"), ("samplesize", "required total size (JSON)")):
        sp = add(name, text)
        sp.add_argument("--mu", help="comma-separated arm means (default arms.anticipated_mu)")
        sp.add_argument("--timing", help="timing label whose design is used")
        if name == "power":
            sp.add_argument("--n", type=float, help="total size (default n1 + n2)")
        else:
            sp.add_argument("--target-power", type=float)
    sp = add("ssr", "interim decision from stage-1 means (JSON)")
    sp.add_argument("--means", required=True, help="comma-separated stage-1 arm means")
    sp.add_argument("--n1", type=float, help="realized stage-1 size (default from the design)")
    sp.add_argument("--method", help="method name declared in the spec (default first)")
    sp.add_argument("--timing")
    sp = add("simulate", "operating characteristics as CSV")
    sp.add_argument("--seed", type=int, help="override simulate.seed")
    sp.add_argument("--replicates", type=int, help="override simulate.replicates")
    sp.add_argument("--threads", type=int, help="worker processes (default $SSRDOSE_THREADS or 1)")
    sp.add_argument("--dump-metrics", metavar="PATH", help="write per-replicate CP/PP(N2) values")
    sp.add_argument("--scenario", action="append", help="restrict to a scenario label (repeatable)")
    sp.add_argument("--timing", action="append", help="restrict to a timing label (repeatable)")
    sp.add_argument("--method", action="append", help="restrict to a method (repeatable)")
    return p


COMMANDS = {
    "contrast": cmd_contrast,
    "power": cmd_power,
    "samplesize": cmd_samplesize,
    "ssr": cmd_ssr,
    "simulate": cmd_simulate,
}


def main(argv=None, out=None):
    args = build_parser().parse_args(argv)
    out = out or sys.stdout
    buf = io.StringIO()
    try:
        study = load_study(args.spec)
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise ValidationError("--threads must be positive", code="E_THREADS")
        COMMANDS[args.command](study, args, buf)
    except SsrError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_status
    out.write(buf.getvalue())
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

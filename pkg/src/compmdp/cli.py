"""Command-line pipeline: abstract, certify, compose, bound, synth, simulate.

Exit codes
----------
0 success, 1 unexpected error, 2 configuration error, 3 abstraction,
4 certificate, 5 composition, 6 bound, 7 synthesis, 8 simulation,
9 missing or stale upstream artifact.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .bounds import InfeasibleTarget, closeness_bound, epsilon_for_confidence
from .certificate import (StorageCertificate, check_certificate, room_certificate, storage_certificate,
                          storage_value)
from .composition import SimulationFunctionParams, compose
from .config import ConfigError, PipelineConfig, load_config
from .mdp import AbstractionTooLarge, dump_mdp, load_mdp, validate_stochastic
from .sim import simulate_closed_loop, summary, write_trajectories_csv
from .synthesis import Policy, nominal_index, policy_rows, refine_policy, safety_value_iteration

STAGES = ("abstract", "certify", "compose", "bound", "synth", "simulate")
EXIT = {"ok": 0, "unexpected": 1, "config": 2, "abstract": 3, "certify": 4, "compose": 5, "bound": 6,
        "synth": 7, "simulate": 8, "artifact": 9}
THREADS_ENV = "COMPMDP_THREADS"

STAGE_SECTIONS = {
    "abstract": ("network", "grid"),
    "certify": ("network", "grid", "certificate"),
    "compose": ("network", "grid", "certificate"),
    "bound": ("network", "grid", "certificate", "bound"),
    "synth": ("network", "grid", "synthesis", "bound"),
    "simulate": ("network", "grid", "certificate", "bound", "synthesis", "simulation"),
}


class StageFailure(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class ArtifactError(Exception):
    pass


def fmt(v) -> str:
    return "%.12g" % v


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


class Workspace:
    """Output directory plus the manifest that tracks artifact freshness."""

    def __init__(self, cfg: PipelineConfig, out: Path, threads: int, log=print):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.log = log
        out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = out / "manifest.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}
        self.spec = cfg.build_network()
        self.classes = {}
        self.assignment = []
        for sub in self.spec.subsystems:
            key = sub.fingerprint()[:12]
            self.classes.setdefault(key, sub)
            self.assignment.append(key)

    # manifest

    def record(self, name: str, stage: str, depends=()):
        entry = {"stage": stage, "config_hash": self.cfg.section_hash(*STAGE_SECTIONS[stage]),
                 "sha256": _sha(self.out / name),
                 "depends": {d: self.manifest[d]["sha256"] for d in depends}}
        self.manifest[name] = entry
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def fresh(self, name: str) -> bool:
        entry = self.manifest.get(name)
        path = self.out / name
        if entry is None or not path.exists():
            return False
        return (entry["config_hash"] == self.cfg.section_hash(*STAGE_SECTIONS[entry["stage"]])
                and entry["sha256"] == _sha(path))

    def require(self, name: str, producer: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise ArtifactError(f"missing upstream artifact {path} (run the '{producer}' stage first)")
        if not self.fresh(name):
            raise ArtifactError(f"stale upstream artifact {path}: config or file changed since "
                                f"'{producer}' produced it; rerun '{producer}'")
        return path

    def write_json(self, name: str, data, stage: str, depends=()):
        (self.out / name).write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
        self.record(name, stage, depends)

    # helpers

    def grids(self, key):
        return self.cfg.grids_for(self.classes[key])

    def certificate_for(self, sub, delta) -> StorageCertificate:
        c = self.cfg.certificate
        if c["template"] == "room":
            meta = self.spec.meta
            return room_certificate(sub, meta["eta"], meta["gamma"], c["kappa_hat"], c["pi"], delta)
        return storage_certificate(sub, c["Mtilde"], c["K"], c["kappa_hat"], c["pi"], c["Xbar"], delta,
                                   c.get("xbar_slope"))

    def load_certificates(self):
        path = self.require("certificates.json", "certify")
        data = json.loads(path.read_text())
        certs = {k: StorageCertificate.from_dict(v["certificate"]) for k, v in data["classes"].items()}
        return [certs[k] for k in self.assignment]


# stages


def stage_abstract(ws: Workspace):
    report = {"classes": {}, "assignment": ws.assignment}
    deps = []
    for key, sub in ws.classes.items():
        name = f"mdp_{key}.bin"
        sg, ug, wg = ws.grids(key)
        if ws.fresh(name):
            mdp = load_mdp(ws.out / name)
            ws.log(f"abstract: {name} up to date")
        else:
            t0 = time.perf_counter()
            try:
                mdp = _build_mdp(sub, sg, ug, wg, ws.threads)
            except AbstractionTooLarge as exc:
                raise StageFailure("abstract", str(exc)) from exc
            dump_mdp(mdp, ws.out / name)
            ws.record(name, "abstract")
            ws.log(f"abstract: built {name} in {fmt(time.perf_counter() - t0)} s")
        audit = validate_stochastic(mdp)
        if not audit.ok:
            raise StageFailure("abstract", f"{name} is not stochastic: max row deviation "
                                           f"{fmt(audit.max_row_deviation)}")
        report["classes"][key] = {"file": name, "states": mdp.n_states, "inputs": mdp.n_inputs,
                                  "internal_inputs": mdp.n_internal, "nonzeros": int(mdp.transitions.nnz),
                                  "delta": sg.delta, "max_row_deviation": audit.max_row_deviation}
        deps.append(name)
        ws.log(f"abstract: {name} states {mdp.n_states} inputs {mdp.n_inputs} internal {mdp.n_internal} "
               f"nnz {mdp.transitions.nnz} delta {fmt(sg.delta)}")
    ws.write_json("abstraction.json", report, "abstract", deps)


def _build_mdp(sub, sg, ug, wg, threads):
    from .mdp import abstract_subsystem

    return abstract_subsystem(sub, sg, ug, wg, threads=threads)


def stage_certify(ws: Workspace):
    out = {"classes": {}, "assignment": ws.assignment}
    failed = []
    for key, sub in ws.classes.items():
        sg, _, _ = ws.grids(key)
        cert = ws.certificate_for(sub, sg.delta)
        rep = check_certificate(sub, cert)
        out["classes"][key] = {
            "certificate": cert.to_dict(),
            "passed": rep.passed,
            "max_eigenvalue": rep.margin,
            "state_margin": rep.state_margin,
            "worst_nu": np.asarray(rep.worst_nu).tolist(),
            "vertices": [{"nu": np.asarray(v.nu).tolist(), "max_eigenvalue": v.max_eigenvalue,
                          "state_margin": v.state_margin} for v in rep.vertices],
        }
        ws.log(f"certify: {key} {'pass' if rep.passed else 'FAIL'} max eigenvalue {fmt(rep.margin)} "
               f"state-block margin {fmt(rep.state_margin)} worst nu {np.asarray(rep.worst_nu).tolist()} "
               f"psi {fmt(cert.psi)}")
        if not rep.passed:
            failed.append(key)
    ws.write_json("certificates.json", out, "certify")
    if failed:
        raise StageFailure("certify", f"matrix inequality fails for {', '.join(failed)}")


def stage_compose(ws: Workspace):
    certs = ws.load_certificates()
    rep = compose(ws.spec, certs, construction=True)
    ws.write_json("composition_report.json", rep.to_dict(), "compose", ["certificates.json"])
    for label, r in rep.lmi.items():
        ws.log(f"compose: LMI at {label} {r}")
    for label, g in rep.gershgorin.items():
        ws.log(f"compose: Gershgorin margin at {label} (lambda {fmt(g['lambda'])}) {fmt(g['margin'])}")
    ws.log(f"compose: matching {'pass' if rep.matching.passed else 'FAIL'}, inclusion "
           f"{'pass' if rep.inclusion.passed else 'FAIL'} ({rep.inclusion.mode}), "
           f"kappa_hat {fmt(rep.params.kappa_hat)} psi_hat {fmt(rep.params.psi_hat)} "
           f"alpha {fmt(rep.params.alpha_coeff)}")
    if not rep.passed:
        raise StageFailure("compose", f"compositional conditions fail (worst LMI eigenvalue "
                                      f"{fmt(rep.worst_lmi_margin)})")


def initial_value(ws: Workspace, certs) -> float:
    x0 = ws.cfg.bound["x0"]
    total = 0.0
    for sub, key, cert, m in zip(ws.spec.subsystems, ws.assignment, certs, ws.spec.mu):
        sg, _, _ = ws.grids(key)
        x = np.broadcast_to(np.asarray(x0, dtype=float), (sub.n,))
        _, xh = sg.quantize(x)
        total += m * float(storage_value(cert.Mtilde, x, xh))
    return total


def stage_bound(ws: Workspace):
    ws.require("certificates.json", "certify")
    comp = json.loads(ws.require("composition_report.json", "compose").read_text())
    sf = comp["simulation_function"]
    params = SimulationFunctionParams(sf["kappa_hat"], sf["psi_hat"], sf["alpha_coeff"], np.asarray(sf["mu"]))
    V0 = initial_value(ws, ws.load_certificates())
    Td = ws.cfg.bound["Td"]
    rows = []
    for eps in ws.cfg.bound["epsilon"]:
        r = closeness_bound(params, V0, eps, Td)
        rows.append(dict(epsilon=eps, alpha=float(params.alpha(eps)), **r.to_dict()))
        ws.log(f"bound: epsilon {fmt(eps)} Td {Td} bound {fmt(r.probability)} (branch {r.branch}"
               f"{', clamped' if r.clamped else ''})")
    report = {"V0": V0, "Td": Td, "simulation_function": params.to_dict(), "bounds": rows,
              "composition_passed": comp["passed"]}
    failure = None
    if "target_confidence" in ws.cfg.bound:
        target = ws.cfg.bound["target_confidence"]
        try:
            eps = epsilon_for_confidence(params, V0, Td, target)
            report["epsilon_for_confidence"] = {"target": target, "epsilon": eps}
            ws.log(f"bound: confidence {fmt(target)} reached for epsilon {fmt(eps)}")
        except InfeasibleTarget as exc:
            report["epsilon_for_confidence"] = {"target": target, "infeasible": str(exc)}
            failure = str(exc)
    ws.write_json("bound_report.json", report, "bound", ["certificates.json", "composition_report.json"])
    if failure:
        raise StageFailure("bound", failure)


def stage_synth(ws: Workspace):
    syn = ws.cfg.synthesis
    Td = ws.cfg.bound["Td"]
    headers = None
    rows = []
    deps = []
    for c, key in enumerate(ws.classes):
        name = f"mdp_{key}.bin"
        mdp = load_mdp(ws.require(name, "abstract"))
        deps.append(name)
        sg, ug, wg = ws.grids(key)
        mdp = dataclasses.replace(mdp, state_grid=sg, input_grid=ug, internal_grid=wg)
        mode = syn["mode"]
        w0 = None
        if mode == "nominal":
            point = syn.get("nominal_internal", ws.cfg.grid.get("nominal_internal"))
            if point is None:
                raise StageFailure("synth", "nominal synthesis needs synthesis.nominal_internal")
            try:
                w0 = nominal_index(wg, point)
            except ValueError as exc:
                raise StageFailure("synth", str(exc)) from exc
        policy = safety_value_iteration(mdp, Td, mode, w0)
        if syn["stationary"]:
            policy = policy.stationary()
        policy.save(ws.out / f"policy_{key}.npz")
        ws.record(f"policy_{key}.npz", "synth", [name])
        deps.append(f"policy_{key}.npz")
        h, r = policy_rows(policy)
        headers = ["class"] + h
        rows.append(np.column_stack([np.full(len(r), c), r]))
        v0 = policy.values[0, :-1]
        ws.log(f"synth: {key} mode {mode} Td {Td} max safety {fmt(v0.max())} at state "
               f"{sg.representative(int(np.argmax(v0))).tolist()} min safety {fmt(v0.min())}")
    table = np.vstack(rows)
    fmts = ["%d", "%d"] + ["%.12g"] * (table.shape[1] - 2)
    np.savetxt(ws.out / "policy.csv", table, fmt=fmts, delimiter=",", header=",".join(headers), comments="")
    ws.record("policy.csv", "synth", deps)


def stage_simulate(ws: Workspace):
    certs = ws.load_certificates()
    bound = json.loads(ws.require("bound_report.json", "bound").read_text())
    Td = ws.cfg.bound["Td"]
    controllers = {}
    deps = ["certificates.json", "bound_report.json"]
    for key, sub in ws.classes.items():
        name = f"policy_{key}.npz"
        sg, ug, wg = ws.grids(key)
        policy = Policy.load(ws.require(name, "synth"), sg, ug, wg)
        deps.append(name)
        cert = certs[ws.assignment.index(key)]
        controllers[key] = refine_policy(policy, sg, ug, cert, input_box=sub.input_box)
    sim = ws.cfg.simulation
    t0 = time.perf_counter()
    batch = simulate_closed_loop(ws.spec, [controllers[k] for k in ws.assignment], Td, sim["n_traj"],
                                 sim["seed"], ws.cfg.bound["x0"], threads=ws.threads)
    elapsed = time.perf_counter() - t0
    eps = [r["epsilon"] for r in bound["bounds"]]
    report = summary(batch, eps, [r["probability"] for r in bound["bounds"]])
    write_trajectories_csv(batch, ws.out / "trajectories.csv", sim["csv_trajectories"])
    ws.record("trajectories.csv", "simulate", deps)
    ws.write_json("summary.json", report, "simulate", deps)
    ws.log(f"simulate: {batch.n_traj} trajectories x {Td} steps in {fmt(elapsed)} s, leave events "
           f"{report['leave_events']}, state range [{fmt(report['state_min'])}, {fmt(report['state_max'])}]")
    unsound = []
    for r in report["exceedance"]:
        ws.log(f"simulate: epsilon {fmt(r['epsilon'])} frequency {fmt(r['frequency'])} "
               f"CI [{fmt(r['ci_low'])}, {fmt(r['ci_high'])}] bound {fmt(r['bound'])} "
               f"{'ok' if r['sound'] else 'EXCEEDS BOUND'}")
        if not r["sound"]:
            unsound.append(r["epsilon"])
    if unsound:
        raise StageFailure("simulate", f"empirical exceedance above the bound for epsilon {unsound}")


RUNNERS = {"abstract": stage_abstract, "certify": stage_certify, "compose": stage_compose,
           "bound": stage_bound, "synth": stage_synth, "simulate": stage_simulate}


def resolve_threads(flag, cfg_threads: int) -> int:
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}")
    return cfg_threads


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compmdp", description=__doc__.split("\n")[0],
                                epilog=f"Environment: {THREADS_ENV} overrides the configured thread count "
                                       f"(--threads wins over both).",
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", nargs="?", choices=STAGES + ("all",),
                   help="stage to run; 'all' chains every stage")
    p.add_argument("--config", required=True, help="pipeline config (TOML)")
    p.add_argument("--out", help="output directory (overrides [output].dir)")
    p.add_argument("--seed", type=int, help="simulation seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, help="worker threads for abstraction and simulation")
    p.add_argument("--stage", choices=STAGES,
                   help="single stage to run; with 'all', the last stage of the chain")
    return p


def plan(command, stage):
    if command is None and stage is None:
        raise ConfigError("give a subcommand or --stage")
    if command in (None, "all"):
        if command is None:
            return [stage]
        return list(STAGES[: STAGES.index(stage) + 1]) if stage else list(STAGES)
    if stage and stage != command:
        raise ConfigError(f"--stage {stage} conflicts with subcommand {command}")
    return [command]


def run(argv=None, log=print) -> int:
    args = build_parser().parse_args(argv)
    try:
        stages = plan(args.command, args.stage)
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.simulation["seed"] = args.seed
        threads = resolve_threads(args.threads, cfg.threads)
        out = Path(args.out or cfg.output_dir)
        ws = Workspace(cfg, out, threads, log)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT["config"]
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT["config"]

    # a failed check still writes its report, so later stages run and the
    # first failing stage decides the exit code
    status = EXIT["ok"]
    for stage in stages:
        try:
            RUNNERS[stage](ws)
        except StageFailure as exc:
            print(f"{exc.stage} failed: {exc}", file=sys.stderr)
            status = status or EXIT[exc.stage]
            if exc.stage == "abstract":
                return status
        except ArtifactError as exc:
            print(f"{stage}: {exc}", file=sys.stderr)
            return status or EXIT["artifact"]
        except Exception as exc:  # noqa: BLE001
            print(f"{stage}: unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return status or EXIT["unexpected"]
    return status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Pipeline configuration files (TOML)."""
from __future__ import annotations

import hashlib
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grid import grid_for_delta, partition_box, singleton_grid
from .model import InterconnectionSpec, LinearSubsystem, room_network

ROOM_KEYS = ("eta", "beta", "gamma", "T_h", "T_e", "sigma")


class ConfigError(ValueError):
    pass


def _line_of(text: str, key: str) -> str:
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return f" (line {i}: {line.strip()})"
    return ""


@dataclass
class PipelineConfig:
    network: dict
    grid: dict
    certificate: dict
    bound: dict
    synthesis: dict
    simulation: dict
    output_dir: str = "out"
    threads: int = 1
    source: str = ""
    raw: dict = field(default_factory=dict)

    # derived objects

    def build_network(self) -> InterconnectionSpec:
        net = self.network
        if net["kind"] == "room":
            kw = {k: net[k] for k in ROOM_KEYS if k in net}
            return room_network(net["n"], state_box=tuple(net.get("state_box", (19.0, 21.0))),
                                input_box=tuple(net.get("input_box", (0.0, 0.6))), mu=net.get("mu"), **kw)
        subs = []
        for s in net["subsystems"]:
            subs.append(LinearSubsystem(
                A=s["A"], B=s["B"], D=s["D"], N=s["N"], C1=s["C1"], C2=s["C2"],
                state_box=s["state_box"], input_box=s["input_box"], internal_box=s["internal_box"],
                drift=s.get("drift"), bilinear=s.get("bilinear"),
            ))
        return InterconnectionSpec(tuple(subs), net["M"], net.get("mu"), {"kind": "inline"})

    def grids_for(self, sys: LinearSubsystem):
        """``(state, input, internal)`` grids for one subsystem."""
        g = self.grid
        if "state_cells" in g:
            sg = partition_box(sys.state_box, g["state_cells"])
        else:
            sg = grid_for_delta(sys.state_box, g["state_delta"])
        ug = partition_box(sys.input_box, g["input_cells"])
        if g["internal"] == "nominal":
            wg = singleton_grid(g["nominal_internal"], np.full(sys.p, sg.cell_widths.min()))
        else:
            wg = partition_box(sys.internal_box, g["internal_cells"])
        return sg, ug, wg

    def section_hash(self, *names) -> str:
        blob = json.dumps({n: self.raw.get(n) for n in names}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def _require(d: dict, key: str, section: str, text: str):
    if key not in d:
        raise ConfigError(f"[{section}] is missing required key '{key}'")
    return d[key]


def _check(cond: bool, msg: str, key: str, text: str):
    if not cond:
        raise ConfigError(msg + _line_of(text, key))


def parse_config(text: str, source: str = "<string>") -> PipelineConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    net = dict(raw.get("network", {}))
    kind = net.setdefault("kind", "room")
    _check(kind in ("room", "inline"), f"network.kind must be 'room' or 'inline', got {kind!r}", "kind", text)
    if kind == "room":
        n = _require(net, "n", "network", text)
        _check(isinstance(n, int) and n >= 3, f"network.n must be an integer >= 3, got {n}", "n", text)
        for k in ("eta", "beta", "gamma"):
            if k in net:
                _check(net[k] > 0, f"network.{k} must be positive", k, text)
        if "sigma" in net:
            _check(net["sigma"] >= 0, "network.sigma must be nonnegative", "sigma", text)
    else:
        _require(net, "subsystems", "network", text)
        _require(net, "M", "network", text)
    if "mu" in net:
        _check(all(m > 0 for m in net["mu"]), "network.mu weights must be positive", "mu", text)

    grid = dict(raw.get("grid", {}))
    _check(("state_cells" in grid) != ("state_delta" in grid),
           "[grid] needs exactly one of state_cells or state_delta", "state_cells", text)
    if "state_delta" in grid:
        _check(grid["state_delta"] > 0, "grid.state_delta must be positive", "state_delta", text)
    else:
        _check(grid["state_cells"] >= 1, "grid.state_cells must be >= 1", "state_cells", text)
    grid.setdefault("input_cells", 15)
    _check(grid["input_cells"] >= 1, "grid.input_cells must be >= 1", "input_cells", text)
    grid.setdefault("internal", "nominal")
    _check(grid["internal"] in ("nominal", "full"), "grid.internal must be 'nominal' or 'full'", "internal", text)
    if grid["internal"] == "nominal":
        _require(grid, "nominal_internal", "grid", text)
        grid["nominal_internal"] = list(np.atleast_1d(grid["nominal_internal"]).astype(float))
    else:
        _require(grid, "internal_cells", "grid", text)

    cert = dict(raw.get("certificate", {}))
    template = cert.setdefault("template", "room" if kind == "room" else "explicit")
    _check(template in ("room", "explicit"), "certificate.template must be 'room' or 'explicit'", "template", text)
    kappa = _require(cert, "kappa_hat", "certificate", text)
    _check(0.0 < kappa < 1.0, f"certificate.kappa_hat must lie in (0, 1), got {kappa}", "kappa_hat", text)
    pi = _require(cert, "pi", "certificate", text)
    _check(pi > 0, f"certificate.pi must be positive, got {pi}", "pi", text)
    if template == "explicit":
        for k in ("Mtilde", "K", "Xbar"):
            _require(cert, k, "certificate", text)
    else:
        _check(kind == "room", "the room certificate template needs a room network", "template", text)

    bound = dict(raw.get("bound", {}))
    Td = bound.setdefault("Td", 10)
    _check(isinstance(Td, int) and Td >= 1, "bound.Td must be an integer >= 1", "Td", text)
    eps = bound.setdefault("epsilon", [0.63])
    bound["epsilon"] = [float(e) for e in np.atleast_1d(eps)]
    _check(all(e > 0 for e in bound["epsilon"]), "bound.epsilon values must be positive", "epsilon", text)
    if "target_confidence" in bound:
        t = bound["target_confidence"]
        _check(0 < t < 1, "bound.target_confidence must lie in (0, 1)", "target_confidence", text)
    bound.setdefault("x0", 20.0)

    syn = dict(raw.get("synthesis", {}))
    syn.setdefault("mode", "nominal")
    _check(syn["mode"] in ("robust", "nominal"), "synthesis.mode must be 'robust' or 'nominal'", "mode", text)
    syn.setdefault("stationary", False)

    sim = dict(raw.get("simulation", {}))
    sim.setdefault("n_traj", 1000)
    sim.setdefault("seed", 0)
    sim.setdefault("csv_trajectories", 20)
    _check(sim["n_traj"] >= 1, "simulation.n_traj must be >= 1", "n_traj", text)
    _check(0 <= sim["seed"] < 2 ** 64, "simulation.seed must be an unsigned 64-bit integer", "seed", text)

    out = raw.get("output", {}).get("dir", "out")
    threads = raw.get("run", {}).get("threads", 1)
    _check(isinstance(threads, int) and threads >= 1, "run.threads must be an integer >= 1", "threads", text)
    normalized = dict(network=net, grid=grid, certificate=cert, bound=bound, synthesis=syn, simulation=sim)
    return PipelineConfig(net, grid, cert, bound, syn, sim, out, threads, source, normalized)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))

"""Experiment files: YAML in, validated model and controller configs out.

Every error raised while reading a file names the offending key path and the
line it sits on. Unknown keys are rejected. :func:`dump_config` writes the
effective configuration (defaults filled in), which parses back to an equal
object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .controller import FT, HT, MODES, ControllerConfig, ConfigurationError
from .geometry import AssumptionError, GeometryError, HyperBox, Polytope, scaled_box
from .model import UncertainModel
from .sim import Setup, piecewise_reference
from .tube_ft import OfflineLPError

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Schema or value error in an experiment file (exit status 2)."""


class ConfigAssumptionError(ValueError):
    """The file parses but the model violates a standing assumption (exit status 3)."""


# ----------------------------------------------------------------------
# YAML with line numbers


def _load_with_marks(text: str, name: str):
    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
        data = loader.construct_document(node) if node is not None else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{name}: not valid YAML: {exc}") from None
    finally:
        loader.dispose()
    marks: dict = {}

    def walk(n, path):
        marks[path] = n.start_mark.line + 1
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                marks[path + (k.value,)] = k.start_mark.line + 1
                walk(v, path + (k.value,))
        elif isinstance(n, yaml.SequenceNode):
            for i, v in enumerate(n.value):
                walk(v, path + (i,))

    if node is not None:
        walk(node, ())
    return data, marks


class _Reader:
    """Typed access to the parsed document with line-anchored errors."""

    def __init__(self, name, marks):
        self.name = name
        self.marks = marks

    def where(self, path) -> str:
        p = tuple(path)
        while p and p not in self.marks:
            p = p[:-1]
        line = self.marks.get(p)
        key = ".".join(str(k) for k in path) or "<root>"
        return f"{self.name}:{line}: {key}" if line else f"{self.name}: {key}"

    def fail(self, path, msg):
        raise ConfigError(f"{self.where(path)}: {msg}")

    def mapping(self, obj, path, required=(), optional=()):
        if not isinstance(obj, dict):
            self.fail(path, f"expected a mapping, got {type(obj).__name__}")
        unknown = [k for k in obj if k not in required and k not in optional]
        if unknown:
            self.fail(tuple(path) + (unknown[0],), f"unknown key {unknown[0]!r}; allowed: {sorted(set(required) | set(optional))}")
        for k in required:
            if k not in obj:
                self.fail(path, f"missing required key {k!r}")
        return obj

    def array(self, obj, path, ndim, shape=None):
        try:
            arr = np.asarray(obj, dtype=float)
        except (TypeError, ValueError):
            self.fail(path, "expected a (nested) list of numbers")
        if arr.ndim != ndim:
            self.fail(path, f"expected a {ndim}-d array, got shape {arr.shape}")
        if shape is not None:
            for got, want in zip(arr.shape, shape):
                if want is not None and got != want:
                    self.fail(path, f"expected shape {tuple(shape)}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            self.fail(path, "entries must be finite")
        return arr

    def number(self, obj, path, kind=float, low=None, high=None, low_open=False):
        if isinstance(obj, bool) or not isinstance(obj, (int, float)):
            self.fail(path, f"expected a number, got {obj!r}")
        if kind is int and (not isinstance(obj, int)):
            self.fail(path, f"expected an integer, got {obj!r}")
        val = kind(obj)
        if low is not None and (val < low or (low_open and val == low)):
            self.fail(path, f"must be {'>' if low_open else '>='} {low}, got {val}")
        if high is not None and val > high:
            self.fail(path, f"must be <= {high}, got {val}")
        return val


# ----------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    model: UncertainModel
    X0: Polytope
    theta_bar0: np.ndarray
    tau: int
    lms_gain: float
    mu_ft: float
    Q: np.ndarray
    R: np.ndarray
    controllers: list
    n_realizations: int
    horizon: int
    base_seed: int
    x0: np.ndarray
    setpoints: list  # [(state array, duration)]
    workers: int
    output: str
    document: dict = field(repr=False)  # effective document, defaults filled in
    _setup: Setup | None = field(default=None, repr=False)

    def setup(self) -> Setup:
        if self._setup is None:
            self._setup = Setup(self.model, self.X0, self.theta_bar0, self.tau, self.lms_gain, self.mu_ft)
        return self._setup

    def reference(self) -> np.ndarray:
        N = max(c.N for c in self.controllers)
        return piecewise_reference(self.setpoints, N, self.model)

    def select(self, names) -> list:
        by_name = {c.name: c for c in self.controllers}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise ConfigError(f"unknown controller(s) {missing}; configured: {list(by_name)}")
        return [by_name[n] for n in names]


def _set(rd: _Reader, obj, path):
    """A parameter or disturbance set: ``box`` or explicit ``H``/``h`` (optionally ``vertices``)."""
    if isinstance(obj, dict) and "box" in obj:
        rd.mapping(obj, path, required=("box",))
        box = rd.mapping(obj["box"], path + ("box",), required=("lower", "upper"))
        lo = rd.array(box["lower"], path + ("box", "lower"), 1)
        hi = rd.array(box["upper"], path + ("box", "upper"), 1)
        if lo.shape != hi.shape or np.any(lo > hi):
            rd.fail(path + ("box",), "lower and upper must have equal length with lower <= upper")
        return HyperBox(lo, hi).to_polytope(), {"box": {"lower": lo.tolist(), "upper": hi.tolist()}}
    rd.mapping(obj, path, required=("H", "h"), optional=("vertices",))
    H = rd.array(obj["H"], path + ("H",), 2)
    h = rd.array(obj["h"], path + ("h",), 1, (H.shape[0],))
    V = None if obj.get("vertices") is None else rd.array(obj["vertices"], path + ("vertices",), 2, (None, H.shape[1]))
    try:
        P = Polytope(H, h, V)
    except GeometryError as exc:
        rd.fail(path, str(exc))
    doc = {"H": H.tolist(), "h": h.tolist()}
    if V is not None:
        doc["vertices"] = V.tolist()
    return P, doc


def _tube_shape(rd: _Reader, obj, path, n):
    if isinstance(obj, dict) and "box_radius" in obj:
        rd.mapping(obj, path, required=("box_radius",))
        r = obj["box_radius"]
        if isinstance(r, list):
            rad = rd.array(r, path + ("box_radius",), 1, (n,))
        else:
            rad = np.full(n, rd.number(r, path + ("box_radius",), low=0.0, low_open=True))
        if np.any(rad <= 0):
            rd.fail(path + ("box_radius",), "radii must be positive")
        return scaled_box(rad, n), {"box_radius": r if not isinstance(r, list) else rad.tolist()}
    rd.mapping(obj, path, required=("H", "vertices"))
    H = rd.array(obj["H"], path + ("H",), 2, (None, n))
    V = rd.array(obj["vertices"], path + ("vertices",), 2, (None, n))
    try:
        P = Polytope(H, np.ones(H.shape[0]), V)
    except GeometryError as exc:
        rd.fail(path, str(exc))
    return P, {"H": H.tolist(), "vertices": V.tolist()}


_CONTROLLER_KEYS = ("name", "tube", "mode", "N", "Np", "max_iter", "tol", "radius", "probe", "n_chains")


def _controller(rd: _Reader, obj, path, Q, R, tau) -> tuple:
    rd.mapping(obj, path, required=("name", "tube", "mode"), optional=_CONTROLLER_KEYS)
    name = obj["name"]
    if not isinstance(name, str) or not name or any(ch in name for ch in "/\\, "):
        rd.fail(path + ("name",), "controller names must be nonempty and free of '/', '\\', ',' and spaces")
    tube = obj["tube"]
    if tube not in (HT, FT):
        rd.fail(path + ("tube",), f"tube must be {HT} or {FT}, got {tube!r}")
    mode = obj["mode"]
    if mode not in MODES:
        rd.fail(path + ("mode",), f"mode must be one of {list(MODES)}, got {mode!r}")
    N = rd.number(obj.get("N", 8), path + ("N",), int, low=1)
    Np = rd.number(obj.get("Np", 5), path + ("Np",), int)
    if not 2 <= Np <= N:
        rd.fail(path + ("Np",), f"Np must lie in [2, N] = [2, {N}], got {Np}")
    kw = dict(
        max_iter=rd.number(obj.get("max_iter", 2), path + ("max_iter",), int, low=0),
        tol=rd.number(obj.get("tol", 1e-6), path + ("tol",), float, low=0.0),
        radius=rd.number(obj.get("radius", 0.5), path + ("radius",), float, low=0.0, low_open=True),
        probe=rd.number(obj.get("probe", 0.0), path + ("probe",), float, low=0.0),
        n_chains=rd.number(obj.get("n_chains", 1), path + ("n_chains",), int, low=1),
    )
    try:
        cfg = ControllerConfig(name, tube, mode, N=N, Np=Np, tau=tau, Q=Q, R=R, **kw)
    except ConfigurationError as exc:
        rd.fail(path, str(exc))
    doc = {"name": name, "tube": tube, "mode": mode, "N": N, "Np": Np, **kw}
    return cfg, doc


def parse_config_text(text: str, name: str = "<config>") -> ExperimentConfig:
    data, marks = _load_with_marks(text, name)
    rd = _Reader(name, marks)
    top = rd.mapping(data, (), required=("schema_version", "model", "controllers", "experiment"),
                     optional=("identification", "cost", "output"))
    ver = top["schema_version"]
    if ver != SCHEMA_VERSION:
        rd.fail(("schema_version",), f"unsupported schema version {ver!r}; this build reads version {SCHEMA_VERSION}")

    # model ------------------------------------------------------------
    mpath = ("model",)
    msec = rd.mapping(top["model"], mpath, required=("A", "B", "F", "G", "theta_set", "disturbance_set", "tube_shape"),
                      optional=("K",))
    if "K" not in msec:
        rd.fail(mpath, "missing required key 'K': the standing assumption on K (a gain stabilising A(theta) + B(theta) K "
                       "for every parameter vertex, contractive on the tube shape) needs it explicitly")
    A = rd.array(msec["A"], mpath + ("A",), 3)
    p1, n = A.shape[0], A.shape[1]
    if A.shape[2] != n:
        rd.fail(mpath + ("A",), f"each A_i must be square, got {A.shape[1:]}")
    B = rd.array(msec["B"], mpath + ("B",), 3, (p1, n, None))
    m = B.shape[2]
    K = rd.array(msec["K"], mpath + ("K",), 2, (m, n))
    F = rd.array(msec["F"], mpath + ("F",), 2, (None, n))
    G = rd.array(msec["G"], mpath + ("G",), 2, (F.shape[0], m))
    TH, th_doc = _set(rd, msec["theta_set"], mpath + ("theta_set",))
    if TH.dim != p1 - 1:
        rd.fail(mpath + ("theta_set",), f"parameter set has dimension {TH.dim}, A and B stack {p1 - 1} parameters")
    if TH.vertices is None and not HyperBox.is_box_matrix(TH.H):
        rd.fail(mpath + ("theta_set",), "a non-box parameter set needs its vertices")
    W, w_doc = _set(rd, msec["disturbance_set"], mpath + ("disturbance_set",))
    if W.dim != n:
        rd.fail(mpath + ("disturbance_set",), f"disturbance set has dimension {W.dim}, expected {n}")
    X0, x0_doc = _tube_shape(rd, msec["tube_shape"], mpath + ("tube_shape",), n)
    try:
        model = UncertainModel(A, B, K, F, G, TH, W)
    except AssumptionError as exc:
        raise ConfigAssumptionError(f"{rd.where(mpath + ('K',))}: {exc}") from None
    except (GeometryError, ValueError) as exc:
        rd.fail(mpath, str(exc))

    # identification ---------------------------------------------------
    ipath = ("identification",)
    isec = rd.mapping(top.get("identification", {}), ipath, optional=("theta_bar0", "tau", "lms_gain", "mu_ft"))
    theta_bar0 = rd.array(isec.get("theta_bar0", [0.0] * (p1 - 1)), ipath + ("theta_bar0",), 1, (p1 - 1,))
    tau = rd.number(isec.get("tau", 1), ipath + ("tau",), int, low=1)
    lms_gain = rd.number(isec.get("lms_gain", 0.1), ipath + ("lms_gain",), float, low=0.0)
    mu_ft = rd.number(isec.get("mu_ft", 1.0), ipath + ("mu_ft",), float, low=0.0)

    # cost -------------------------------------------------------------
    cpath = ("cost",)
    csec = rd.mapping(top.get("cost", {}), cpath, optional=("Q", "R"))
    Q = rd.array(csec.get("Q", np.eye(n).tolist()), cpath + ("Q",), 2, (None, n))
    R = rd.array(csec.get("R", np.eye(m).tolist()), cpath + ("R",), 2, (None, m))

    # controllers ------------------------------------------------------
    ctl = top["controllers"]
    if not isinstance(ctl, list) or not ctl:
        rd.fail(("controllers",), "expected a nonempty list of controller sections")
    configs, c_docs = [], []
    for i, entry in enumerate(ctl):
        cfg, doc = _controller(rd, entry, ("controllers", i), Q, R, tau)
        if cfg.name in [c.name for c in configs]:
            rd.fail(("controllers", i, "name"), f"duplicate controller name {cfg.name!r}")
        configs.append(cfg)
        c_docs.append(doc)

    # experiment -------------------------------------------------------
    epath = ("experiment",)
    esec = rd.mapping(top["experiment"], epath, required=("setpoints",),
                      optional=("n_realizations", "horizon", "base_seed", "x0", "workers"))
    n_real = rd.number(esec.get("n_realizations", 50), epath + ("n_realizations",), int, low=1)
    horizon = rd.number(esec.get("horizon", 50), epath + ("horizon",), int, low=1)
    seed = rd.number(esec.get("base_seed", 0), epath + ("base_seed",), int, low=0)
    workers = rd.number(esec.get("workers", 1), epath + ("workers",), int, low=1)
    x0 = rd.array(esec.get("x0", [0.0] * n), epath + ("x0",), 1, (n,))
    sps = esec["setpoints"]
    if not isinstance(sps, list) or not sps:
        rd.fail(epath + ("setpoints",), "expected a nonempty list of {state, duration} entries")
    setpoints, sp_docs = [], []
    rows = ~np.any(G != 0, axis=1)
    for i, sp in enumerate(sps):
        spath = epath + ("setpoints", i)
        rd.mapping(sp, spath, required=("state", "duration"))
        r = rd.array(sp["state"], spath + ("state",), 1, (n,))
        d = rd.number(sp["duration"], spath + ("duration",), int, low=1)
        if np.any(F[rows] @ r >= 1.0):
            rd.fail(spath + ("state",), f"setpoint {r.tolist()} is not strictly inside the state constraints")
        setpoints.append((r, d))
        sp_docs.append({"state": r.tolist(), "duration": d})
    output = top.get("output", "results")
    if not isinstance(output, str) or not output:
        rd.fail(("output",), "expected a directory name")

    document = {
        "schema_version": SCHEMA_VERSION,
        "model": {"A": A.tolist(), "B": B.tolist(), "K": K.tolist(), "F": F.tolist(), "G": G.tolist(),
                  "theta_set": th_doc, "disturbance_set": w_doc, "tube_shape": x0_doc},
        "identification": {"theta_bar0": theta_bar0.tolist(), "tau": tau, "lms_gain": lms_gain, "mu_ft": mu_ft},
        "cost": {"Q": Q.tolist(), "R": R.tolist()},
        "controllers": c_docs,
        "experiment": {"n_realizations": n_real, "horizon": horizon, "base_seed": seed, "x0": x0.tolist(),
                       "workers": workers, "setpoints": sp_docs},
        "output": output,
    }
    cfg = ExperimentConfig(model, X0, theta_bar0, tau, lms_gain, mu_ft, Q, R, configs, n_real, horizon, seed, x0,
                           setpoints, workers, output, document)
    _run_offline_checks(cfg, rd)
    return cfg


def _run_offline_checks(cfg: ExperimentConfig, rd: _Reader) -> None:
    """Contractivity and every offline LP, so that a bad model fails at load time."""
    try:
        setup = cfg.setup()
        refs = [r for r, _ in cfg.setpoints]
        for tube in sorted({c.tube for c in cfg.controllers}):
            setup.offline(tube, cfg.Q, cfg.R, refs)
    except (AssumptionError, GeometryError, OfflineLPError) as exc:
        raise ConfigAssumptionError(f"{rd.where(('model', 'tube_shape'))}: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.document, sort_keys=False, default_flow_style=None, width=120)

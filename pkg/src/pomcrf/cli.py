"""Command-line entry point.

    pomcrf scene|infer|eval|fit|sweep|em|track [--config FILE] [--output DIR]
           [--set section.key=JSON ...] [--workers N]

Every command reads the JSON run configuration (the shipped default when
``--config`` is omitted) and writes only below the configured output
directory.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import struct
import sys
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .benchmark import Benchmark, BenchmarkConfig, make_benchmark
from .discriminative import FieldFormatError, GaussianModeBank, _atomic_write, load_field, store_field
from .evaluation import aggregate, evaluate_frame, hungarian_match, metrics_csv, metrics_of, truth_points
from .inference import InferenceConfig, mean_field_infer
from .potentials import PotentialBundle, uniform_kernel
from .scene_sim import OcclusionParams
from .tracking import build_flow_graph, smooth_pom, solve_flow, trajectories_csv
from .training import (EMCollapse, EMFrame, LabeledFrame, UnaryCalibration, collect_displacement_samples,
                       fit_mode_bank, fit_unary_calibration, grid_search_scales, map_ordered, unsupervised_em)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODEL_MAGIC = b"OMDL"
MODEL_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    text = resources.files("pomcrf").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict, path=""):
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k != "scene":
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k!r} must be an object")
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v


def _set(cfg: dict, assignment: str):
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node and node is not cfg.get("scene"):
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _num(cfg, section, key, lo=None, hi=None, integer=False, allow_none=False):
    v = cfg[section][key]
    if v is None and allow_none:
        return None
    ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    if integer:
        ok = ok and float(v).is_integer()
    if not ok or (lo is not None and v < lo) or (hi is not None and v > hi):
        rng = (f" >= {lo}" if hi is None else f" in [{lo}, {hi}]") if lo is not None else ""
        raise ConfigError(f"{section}.{key}: expected {'an integer' if integer else 'a number'}{rng}, got {v!r}")
    return int(v) if integer else float(v)


@dataclass
class RunConfig:
    raw: dict
    scene: BenchmarkConfig
    output: Path
    dataset: Path
    workers: int

    def out(self, *parts) -> Path:
        return self.output.joinpath(*parts)

    def inference(self) -> InferenceConfig:
        c = self.raw["inference"]
        return InferenceConfig(iterations=c["iterations"], step=c["step"], prior=c["prior"],
                               tol=c["tol"], tau_b=c["tau_b"], tau_h=c["tau_h"])

    def bundle(self, mu_u=None, mu_h=None) -> PotentialBundle:
        p = self.raw["potentials"]
        return PotentialBundle(mu_u=p["mu_u"] if mu_u is None else mu_u,
                               mu_h=p["mu_h"] if mu_h is None else mu_h,
                               kernel=uniform_kernel(p["kernel_value"], p["kernel_radius"]),
                               o=self.scene.o, eps=p["eps"])


def load_config(path=None, output=None, sets=(), workers=None) -> RunConfig:
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        _merge(cfg, user)
    for s in sets:
        _set(cfg, s)
    if output is not None:
        cfg["output"] = output
    if workers is not None:
        cfg["workers"] = workers
    return validate_config(cfg)


def validate_config(cfg: dict) -> RunConfig:
    try:
        scene = BenchmarkConfig.from_dict(cfg["scene"])
    except (KeyError, TypeError) as e:
        raise ConfigError(f"scene: {e}") from e
    for k in ("rows", "cols", "width", "height", "modes", "people_min", "people_max", "bank_frames"):
        _num(cfg, "scene", k, lo=1, integer=True)
    _num(cfg, "scene", "min_sep", lo=0, integer=True)
    _num(cfg, "scene", "seed", lo=0, integer=True)
    for k in ("cell_size", "person_height", "person_width", "elevation"):
        if not _num(cfg, "scene", k, lo=0) > 0:
            raise ConfigError(f"scene.{k} must be positive")
    _num(cfg, "scene", "focal", lo=1e-9, allow_none=True)
    if scene.people_max < scene.people_min:
        raise ConfigError("scene.people_max must be >= scene.people_min")
    if not 0 < _num(cfg, "scene", "o") <= 1:
        raise ConfigError("scene.o must lie in (0, 1]")
    _num(cfg, "scene", "field_noise", 0, 1)
    if not _num(cfg, "scene", "unary_noise", 0, 1) < 0.5:
        raise ConfigError("scene.unary_noise must lie in [0, 0.5)")
    _num(cfg, "sequence", "frames", lo=1, integer=True)
    if cfg["sequence"]["kind"] not in ("independent", "walk"):
        raise ConfigError("sequence.kind must be 'independent' or 'walk'")
    _num(cfg, "inference", "iterations", lo=1, integer=True)
    if not _num(cfg, "inference", "step", lo=0) > 0:
        raise ConfigError("inference.step must be positive")
    if not 0 < _num(cfg, "inference", "prior", 0, 1) < 1:
        raise ConfigError("inference.prior must lie in (0, 1)")
    _num(cfg, "inference", "tol", lo=0, allow_none=True)
    for k in ("tau_b", "tau_h"):
        v = _num(cfg, "inference", k, 0, 1, allow_none=True)
        if v is not None and not 0 < v < 1:
            raise ConfigError(f"inference.{k} must lie in (0, 1)")
    if cfg["inference"]["variant"] not in ("full", "simple", "none"):
        raise ConfigError("inference.variant must be full, simple or none")
    _num(cfg, "potentials", "mu_u", lo=0)
    _num(cfg, "potentials", "mu_h", lo=0)
    _num(cfg, "potentials", "kernel_value", lo=0)
    _num(cfg, "potentials", "kernel_radius", lo=0, integer=True)
    if not 0 < _num(cfg, "potentials", "eps", 0, 1e-3):
        raise ConfigError("potentials.eps must lie in (0, 1e-3]")
    if not _num(cfg, "evaluation", "radius", lo=0) > 0:
        raise ConfigError("evaluation.radius must be positive")
    _num(cfg, "evaluation", "threshold", 0, 1)
    radii = cfg["evaluation"]["radii"]
    if not isinstance(radii, list) or not radii or not all(isinstance(r, (int, float)) and r > 0 for r in radii):
        raise ConfigError("evaluation.radii must be a nonempty list of positive numbers")
    _num(cfg, "fit", "em_iters", lo=1, integer=True)
    if cfg["fit"]["collect"] not in ("exact", "sample"):
        raise ConfigError("fit.collect must be 'exact' or 'sample'")
    for k in ("mu_u", "mu_h"):
        vals = cfg["sweep"][k]
        if not isinstance(vals, list) or not vals or not all(isinstance(v, (int, float)) and v >= 0 for v in vals):
            raise ConfigError(f"sweep.{k} must be a nonempty list of non-negative numbers")
    _num(cfg, "em", "rounds", lo=0, integer=True)
    _num(cfg, "em", "samples_per_frame", lo=1, integer=True)
    _num(cfg, "em", "jitter", lo=0)
    _num(cfg, "tracking", "radius", lo=0, integer=True)
    _num(cfg, "tracking", "entry_cost", lo=0)
    _num(cfg, "tracking", "exit_cost", lo=0)
    _num(cfg, "tracking", "max_tracks", lo=1, integer=True, allow_none=True)
    if not isinstance(cfg.get("output"), str) or not cfg["output"]:
        raise ConfigError("output must be a directory path")
    w = cfg.get("workers")
    if not isinstance(w, int) or isinstance(w, bool) or w < 1:
        raise ConfigError("workers must be a positive integer")
    out = Path(cfg["output"])
    ds = cfg.get("dataset")
    dataset = out / "dataset" if ds is None else Path(ds)
    return RunConfig(cfg, scene, out, dataset, w)


# ---------------------------------------------------------------------------
# file formats


def encode_model(bank: GaussianModeBank, calibration: UnaryCalibration, mu_u, mu_h, o, eps) -> bytes:
    head = MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, bank.M)
    ab = np.concatenate([bank.alpha, bank.sigma], axis=1).astype("<f4").tobytes()
    tail = struct.pack("<6d", calibration.a, calibration.b, mu_u, mu_h, o, eps)
    payload = head + ab + tail
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


@dataclass
class Model:
    bank: GaussianModeBank
    calibration: UnaryCalibration
    mu_u: float
    mu_h: float
    o: float
    eps: float


def decode_model(data: bytes) -> Model:
    if len(data) < 10 or data[:4] != MODEL_MAGIC:
        raise DataError("not a model file")
    version, M = struct.unpack("<HI", data[4:10])
    if version != MODEL_VERSION:
        raise DataError(f"unsupported model version {version}")
    size = 10 + M * 16 + 48 + 4
    if len(data) != size:
        raise DataError(f"model file size mismatch: expected {size}, got {len(data)}")
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != struct.unpack("<I", data[-4:])[0]:
        raise DataError("model checksum mismatch")
    ab = np.frombuffer(data, "<f4", M * 4, 10).reshape(M, 4).astype(float)
    a, b, mu_u, mu_h, o, eps = struct.unpack("<6d", data[10 + M * 16:-4])
    return Model(GaussianModeBank(ab[:, :2], ab[:, 2:]), UnaryCalibration(a, b), mu_u, mu_h, o, eps)


def read_model(path) -> Model:
    try:
        with open(path, "rb") as fh:
            return decode_model(fh.read())
    except OSError as e:
        raise DataError(f"cannot read model {path}: {e}") from e


def pgm_bytes(img) -> bytes:
    """P5 graymap of values in [0, 1]."""
    a = np.clip(np.nan_to_num(np.asarray(img, dtype=float)), 0.0, 1.0)
    H, W = a.shape
    return f"P5\n{W} {H}\n255\n".encode() + np.round(a * 255).astype(np.uint8).tobytes()


def _write_text(path, text: str):
    _atomic_write(path, text.encode())


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not rows:
        raise DataError(f"{path} is empty")
    return rows[0], rows[1:]


def _r(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    frames: int
    truth: list          # per frame, (N,) bool
    root: Path


def _bench(rc: RunConfig, bank=None) -> Benchmark:
    return make_benchmark(rc.scene, bank)


def rig_document(b: Benchmark, frames: int, kind: str) -> dict:
    cams = [{"id": c.id, "width": c.width, "height": c.height, "position": list(map(float, c.position)),
             "elevation": c.elevation, "yaw": c.yaw, "pitch": c.pitch, "focal": c.focal} for c in b.cameras]
    return {"scene": b.cfg.to_dict(), "frames": frames, "kind": kind, "cameras": cams}


def load_dataset(rc: RunConfig) -> tuple[Dataset, Benchmark]:
    root = rc.dataset
    try:
        with open(root / "rig.json") as fh:
            rig = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read {root / 'rig.json'}: {e}") from e
    if rig.get("scene") != rc.scene.to_dict():
        raise DataError("dataset rig does not match the configured scene")
    T = int(rig["frames"])
    bank_model = read_model(root / "bank.omdl")
    b = _bench(rc, bank_model.bank)
    header, rows = _read_csv(root / "truth.csv")
    if header != ["frame", "row", "col"]:
        raise DataError("truth.csv must have columns frame,row,col")
    truth = [np.zeros(b.grid.N, dtype=bool) for _ in range(T)]
    try:
        for t, r, c in rows:
            truth[int(t)][b.grid.index(int(r), int(c))] = True
    except (ValueError, IndexError) as e:
        raise DataError(f"bad truth row: {e}") from e
    return Dataset(T, truth, root), b


def load_frame_fields(ds: Dataset, b: Benchmark, t: int):
    out = []
    for c, view in enumerate(b.table.views):
        p = ds.root / "fields" / f"f{t}_c{c}.obsf"
        try:
            f = load_field(p, c)
            f.check(1e-5)
        except OSError as e:
            raise DataError(f"cannot read field {p}: {e}") from e
        except (FieldFormatError, ValueError) as e:
            raise DataError(f"bad field {p}: {e}") from e
        if f.shape != view.shape:
            raise DataError(f"field {p} has shape {f.shape}, camera expects {view.shape}")
        out.append(f)
    return out


def load_unary(ds: Dataset, b: Benchmark, t: int) -> np.ndarray:
    p = ds.root / "unaries" / f"f{t}.csv"
    header, rows = _read_csv(p)
    if header != ["row", "col", "camera", "score"]:
        raise DataError(f"{p} must have columns row,col,camera,score")
    V = max((int(r[2]) for r in rows), default=0) + 1
    s = np.full((V, b.grid.N), np.nan)
    try:
        for r, c, cam, score in rows:
            s[int(cam), b.grid.index(int(r), int(c))] = float(score)
    except (ValueError, IndexError) as e:
        raise DataError(f"bad unary row in {p}: {e}") from e
    if np.any(~np.isfinite(s)) or np.any(s <= 0) or np.any(s >= 1):
        raise DataError(f"{p}: scores missing or outside (0, 1)")
    return s


def _load_frames(rc, ds, b):
    frames = []
    for t in range(ds.frames):
        frames.append(LabeledFrame(load_frame_fields(ds, b, t), load_unary(ds, b, t), ds.truth[t]))
    return frames


def _model_for(rc: RunConfig, ds_root: Path) -> Model:
    p = rc.raw.get("model")
    return read_model(Path(p) if p else ds_root / "bank.omdl")


# ---------------------------------------------------------------------------
# commands


def cmd_scene(rc: RunConfig) -> int:
    """Synthetic sequence: truth, oracle fields and unaries, and the sensor bank."""
    p = rc.raw.get("model")
    b = _bench(rc, read_model(p).bank if p else None)
    T = int(rc.raw["sequence"]["frames"])
    kind = rc.raw["sequence"]["kind"]
    if kind == "walk":
        frames, _ = b.sequence(T)
        occ = [f.Z for f in frames]
    else:
        occ = [b.occupancy(t).Z for t in range(T)]
    root = rc.out("dataset")

    def render(t):
        return b.fields(occ[t], t), b.unary(occ[t], t)

    made = map_ordered(render, range(T), rc.workers)
    for t, (fields, un) in enumerate(made):
        for c, f in enumerate(fields):
            store_field(f, root / "fields" / f"f{t}_c{c}.obsf")
        rows = [(r, c, v, _r(un[v, b.grid.index(r, c)])) for v in range(un.shape[0])
                for r in range(b.grid.rows) for c in range(b.grid.cols)]
        _write_text(root / "unaries" / f"f{t}.csv", _csv(rows, ("row", "col", "camera", "score")))
    truth_rows = [(t, *b.grid.cell(i)) for t in range(T) for i in np.flatnonzero(occ[t])]
    _write_text(root / "truth.csv", _csv(truth_rows, ("frame", "row", "col")))
    pot = rc.raw["potentials"]
    _atomic_write(root / "bank.omdl", encode_model(b.bank, UnaryCalibration(), pot["mu_u"], pot["mu_h"],
                                                   rc.scene.o, pot["eps"]))
    _write_text(root / "rig.json", json.dumps(rig_document(b, T, kind), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _variant(rc):
    return rc.raw["inference"]["variant"]


def cmd_infer(rc: RunConfig) -> int:
    ds, b0 = load_dataset(rc)
    model = _model_for(rc, ds.root)
    b = b0 if model.bank is b0.bank else Benchmark(b0.cfg, b0.grid, b0.cameras, b0.table, model.bank)
    frames = _load_frames(rc, ds, b)          # everything is validated before anything is written
    cfg = rc.inference()
    bundle = rc.bundle(model.mu_u, model.mu_h)

    def one(fr):
        res = mean_field_infer(bundle.with_(unary=model.calibration.apply(fr.unary)), fr.fields, b.table,
                               b.grid, cfg, model.bank, _variant(rc))
        if not np.all(np.isfinite(res.q)):
            raise NumericError("non-finite occupancy probabilities")
        return res

    results = map_ordered(one, frames, rc.workers)
    out = rc.out("pom")
    for t, res in enumerate(results):
        rows = [(*b.grid.cell(i), _r(res.q[i])) for i in range(b.grid.N)]
        _write_text(out / f"f{t}.csv", _csv(rows, ("row", "col", "q")))
        _atomic_write(out / f"f{t}.pgm", pgm_bytes(res.q.reshape(b.grid.shape)))
        for c, f in enumerate(frames[t].fields):
            _atomic_write(out / "fields" / f"f{t}_c{c}.pgm", pgm_bytes(1.0 - f.f_b))
        trace = [(k, _r(v)) for k, v in enumerate(res.free_energy)]
        _write_text(out / f"f{t}_trace.csv", _csv(trace, ("iteration", "free_energy")))
    return EXIT_OK


def load_poms(rc: RunConfig, ds: Dataset, b: Benchmark) -> np.ndarray:
    poms = np.zeros((ds.frames, b.grid.N))
    for t in range(ds.frames):
        header, rows = _read_csv(rc.out("pom", f"f{t}.csv"))
        if header != ["row", "col", "q"] or len(rows) != b.grid.N:
            raise DataError(f"malformed POM for frame {t}")
        for r, c, q in rows:
            poms[t, b.grid.index(int(r), int(c))] = float(q)
    return poms


def cmd_eval(rc: RunConfig) -> int:
    ds, b = load_dataset(rc)
    poms = load_poms(rc, ds, b)
    ev = rc.raw["evaluation"]
    covered = b.table.covered()
    rows, curve = [], []
    for t in range(ds.frames):
        rows.append(evaluate_frame(poms[t], ds.truth[t], b.grid, ev["radius"], ev["threshold"], t, covered))
        for r in ev["radii"]:
            m = evaluate_frame(poms[t], ds.truth[t], b.grid, r, ev["threshold"], t, covered)
            curve.append((t, _r(r), _r(m.moda)))
    out = rc.out("metrics")
    _write_text(out / "metrics.csv", metrics_csv(rows))
    _write_text(out / "moda_curve.csv", _csv(curve, ("frame", "r", "moda")))
    summary = aggregate(rows)
    summary["curve"] = [[r, float(np.mean([float(c[2]) for c in curve if float(c[1]) == r]))] for r in ev["radii"]]
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_fit(rc: RunConfig) -> int:
    ds, b = load_dataset(rc)
    fit = rc.raw["fit"]
    rng = np.random.default_rng(np.random.SeedSequence([rc.scene.seed, 31]))
    samples = collect_displacement_samples(ds.truth, b.table, OcclusionParams(rc.scene.o), rng, fit["collect"])
    bank, report = fit_mode_bank(samples, rc.scene.modes, fit["em_iters"], rng)
    scores = np.concatenate([load_unary(ds, b, t).max(axis=0) for t in range(ds.frames)])
    labels = np.concatenate(ds.truth)
    cal = fit_unary_calibration(scores, labels) if fit["calibrate_unary"] else UnaryCalibration()
    pot = rc.raw["potentials"]
    _atomic_write(rc.out("model.omdl"), encode_model(bank, cal, pot["mu_u"], pot["mu_h"], rc.scene.o, pot["eps"]))
    ll = [(k, _r(v)) for k, v in enumerate(report.log_likelihood)]
    _write_text(rc.out("fit_loglik.csv"), _csv(ll, ("iteration", "log_likelihood")))
    return EXIT_OK


def cmd_sweep(rc: RunConfig) -> int:
    ds, b = load_dataset(rc)
    model = _model_for(rc, ds.root)
    frames = _load_frames(rc, ds, b)
    frames = [LabeledFrame(f.fields, model.calibration.apply(f.unary), f.Z) for f in frames]
    sw = rc.raw["sweep"]
    res = grid_search_scales(sw["mu_u"], sw["mu_h"], frames, b.table, b.grid, model.bank, rc.bundle(),
                             rc.inference(), _variant(rc), rc.raw["evaluation"]["radius"], rc.workers)
    rows = [(_r(u), _r(h), _r(s)) for (u, h), s in res.scores.items()]
    _write_text(rc.out("sweep", "scores.csv"), _csv(rows, ("mu_u", "mu_h", "moda")))
    _write_text(rc.out("sweep", "best.json"),
                json.dumps({"mu_u": res.best[0], "mu_h": res.best[1], "moda": res.scores[res.best]},
                           indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_em(rc: RunConfig) -> int:
    ds, b = load_dataset(rc)
    em = rc.raw["em"]
    rng = np.random.default_rng(np.random.SeedSequence([rc.scene.seed, 41]))
    jitter = rng.uniform(-em["jitter"], em["jitter"], size=b.bank.alpha.shape)
    start = GaussianModeBank(np.clip(b.bank.alpha + jitter, -0.5, 0.5), b.bank.sigma)
    unaries = [load_unary(ds, b, t) for t in range(ds.frames)]
    frames = [EMFrame((lambda bank, t=t: b.fields(ds.truth[t], t, bank)), unaries[t], ds.truth[t])
              for t in range(ds.frames)]
    try:
        rep = unsupervised_em(frames, b.table, b.grid, start, rc.bundle(), rng, em["rounds"], rc.inference(),
                              samples_per_frame=em["samples_per_frame"], collect=rc.raw["fit"]["collect"],
                              variant=_variant(rc), r=rc.raw["evaluation"]["radius"], workers=rc.workers)
    except EMCollapse as e:
        raise NumericError(str(e)) from e
    rows = [(k + 1, _r(m) if m is not None else "", _r(d)) for k, (m, d) in enumerate(zip(rep.moda, rep.alpha_change))]
    _write_text(rc.out("em", "rounds.csv"), _csv(rows, ("round", "moda", "alpha_change")))
    pot = rc.raw["potentials"]
    _atomic_write(rc.out("em", "model.omdl"),
                  encode_model(rep.bank, rep.calibration, pot["mu_u"], pot["mu_h"], rc.scene.o, pot["eps"]))
    summary = {"rounds": len(rep.moda), "moda": rep.moda, "final_moda": rep.final_moda}
    _write_text(rc.out("em", "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_track(rc: RunConfig) -> int:
    ds, b = load_dataset(rc)
    poms = load_poms(rc, ds, b)
    tr = rc.raw["tracking"]
    ev = rc.raw["evaluation"]
    g = build_flow_graph(poms, b.grid, tr["radius"], tr["entry_cost"], tr["exit_cost"])
    sol = solve_flow(g, tr["max_tracks"])
    dets = smooth_pom(poms, sol.trajectories, b.grid)
    covered = b.table.covered()
    rows = []
    for t in range(ds.frames):
        Z = ds.truth[t] & covered
        before = evaluate_frame(poms[t], ds.truth[t], b.grid, ev["radius"], ev["threshold"], t, covered)
        after = metrics_of(hungarian_match(dets[t], truth_points(Z, b.grid), ev["radius"]), t)
        rows.append((t, _r(before.moda), _r(after.moda)))
    _write_text(rc.out("tracks", "trajectories.csv"), trajectories_csv(sol.trajectories, b.grid))
    _write_text(rc.out("tracks", "metrics.csv"), _csv(rows, ("frame", "moda_before", "moda_after")))
    summary = {"tracks": len(sol.trajectories), "total_cost": sol.total_cost,
               "moda_before": float(np.mean([float(r[1]) for r in rows])),
               "moda_after": float(np.mean([float(r[2]) for r in rows]))}
    _write_text(rc.out("tracks", "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


COMMANDS = {"scene": cmd_scene, "infer": cmd_infer, "eval": cmd_eval, "fit": cmd_fit,
            "sweep": cmd_sweep, "em": cmd_em, "track": cmd_track}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pomcrf", description="Occupancy-map inference on synthetic multi-camera data.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration (default: shipped configuration)")
    p.add_argument("--output", help="output directory, overrides the configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override one configuration value, e.g. --set inference.iterations=10")
    p.add_argument("--workers", type=int, help="parallel frames; results do not depend on it")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = load_config(args.config, args.output, args.set, args.workers)
        return COMMANDS[args.command](rc)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end orchestration: simulate, calibrate, train, infer, evaluate.

Run directory layout (all paths in the manifest are relative to ``data_dir``)::

    <data_dir>/manifest.json
    <data_dir>/scenes/<id>.json
    <data_dir>/images/<id>_{distorted,amplitude,reference}.tfd
    <data_dir>/calib/frame_<k>_{distorted,amplitude,reference}.tfd
    <model_dir>/calib.tfc, range.tfr, boundary_g{0..3}.tfr, *_loss.csv
    <output_dir>/<id>_{calibrated,rf,edges,orient,rhat}.tfd
    <output_dir>/report.json, accuracy.csv, edge_pr.csv
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boundary, calib, encode, evalmetrics, geodesic, rangenet, simulate
from .imagecore import AmplitudeImage, ImageFormatError, RangeImage, read_image, write_image
from .mlp import NumericError, TrainConfig

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
ROLES = ("distorted_range", "amplitude", "reference_range")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class SimulationConfig:
    width: int = 64
    height: int = 64
    n_train: int = 20
    n_test: int = 8
    max_objects: int = 5
    n_scans: int = 30
    jitter_sigma: float = 0.5
    outlier_rate: float = 0.05
    cluster_radius: float = 10.0
    min_points: int = 3
    calib_frames: int = 40
    calib_noise: float = 1.0
    distortion: simulate.DistortionParams = field(default_factory=simulate.DistortionParams)


@dataclass
class GeodesicConfig:
    k: int = 81
    sigma: float = 2.0
    step_cost: float = 1.0


@dataclass
class DetectorConfig:
    # tuned on held-out synthetic scenes; the library defaults stay (0.3, 0.6) and 3
    low: float = 0.05
    high: float = 0.2
    neg_ratio: float = 6.0


@dataclass
class EvalConfig:
    thresholds: list = field(default_factory=lambda: [float(t) for t in range(1, 16)])
    boundary_margin: int = 5
    edge_tolerance: float = 2.0
    report_tau: float = 5.0


@dataclass
class PipelineConfig:
    run_dir: str = "run"
    data_dir: str | None = None
    model_dir: str | None = None
    output_dir: str | None = None
    seed: int = 0
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    encoder: encode.EncoderParams = field(default_factory=encode.EncoderParams)
    range_train: TrainConfig = field(default_factory=TrainConfig)
    boundary_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.05))
    canny: boundary.CannyParams = field(default_factory=boundary.CannyParams)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    geodesic: GeodesicConfig = field(default_factory=GeodesicConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.run_dir) / "data"

    @property
    def model_path(self) -> Path:
        return Path(self.model_dir) if self.model_dir else Path(self.run_dir) / "models"

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir) if self.output_dir else Path(self.run_dir) / "outputs"

    def validate(self):
        if self.geodesic.k < 1:
            raise ConfigError("geodesic.k must be >= 1")
        if self.geodesic.sigma <= 0:
            raise ConfigError("geodesic.sigma must be > 0")
        if self.simulation.n_train < 0 or self.simulation.n_test < 0:
            raise ConfigError("scene counts must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data):
    """Instantiate a (possibly nested) dataclass from a plain dict."""
    if not dataclasses.is_dataclass(cls) or not isinstance(data, dict):
        return data
    hints = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        f = hints[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        sub = type(default) if dataclasses.is_dataclass(default) else None
        kwargs[key] = _build(sub, value) if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data).validate()


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values parse as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=()) -> PipelineConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(apply_overrides(data, overrides))


# -- simulate ---------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def simulate_dataset(cfg: PipelineConfig) -> dict:
    sim = cfg.simulation
    root = cfg.data_path
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "calib").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed)
    s_err, s_calib, s_scenes = seeds.spawn(3)
    shape = (sim.height, sim.width)
    err = simulate.random_systematic_error(shape, np.random.default_rng(s_err))

    entries = []
    scene_seeds = s_scenes.spawn(sim.n_train + sim.n_test)
    for i in range(sim.n_train + sim.n_test):
        split = "train" if i < sim.n_train else "test"
        sid = f"{split}_{i if split == 'train' else i - sim.n_train:03d}"
        s_layout, s_capture = scene_seeds[i].spawn(2)
        scene = simulate.random_scene(np.random.default_rng(s_layout), sim.width, sim.height, sim.max_objects)
        cap_seed = int(s_capture.generate_state(1)[0])
        cap = simulate.capture(scene, sim.distortion, err, cap_seed, sim.n_scans, sim.jitter_sigma,
                               sim.outlier_rate, sim.cluster_radius, sim.min_points)
        scene_rel = f"scenes/{sid}.json"
        (root / scene_rel).write_text(simulate.scene_to_json(scene, sim.distortion, cap_seed) + "\n")
        images = {
            "distorted_range": f"images/{sid}_distorted.tfd",
            "amplitude": f"images/{sid}_amplitude.tfd",
            "reference_range": f"images/{sid}_reference.tfd",
        }
        write_image(cap.raw, root / images["distorted_range"])
        write_image(cap.amplitude, root / images["amplitude"])
        write_image(cap.reference, root / images["reference_range"])
        entries.append({"id": sid, "split": split, "scene": scene_rel, "images": images})

    raw, amp, true = simulate.calibration_frames(shape, err, sim.calib_frames,
                                                 np.random.default_rng(s_calib), sim.calib_noise)
    frames = []
    for k in range(len(raw)):
        f = {
            "distorted_range": f"calib/frame_{k:03d}_distorted.tfd",
            "amplitude": f"calib/frame_{k:03d}_amplitude.tfd",
            "reference_range": f"calib/frame_{k:03d}_reference.tfd",
        }
        write_image(RangeImage(raw[k]), root / f["distorted_range"])
        write_image(AmplitudeImage(amp[k]), root / f["amplitude"])
        write_image(RangeImage(true[k]), root / f["reference_range"])
        frames.append(f)
    calib.save_calib(calib.CalibModel(err.a, err.b, err.c), root / "calib" / "truth.tfc")

    manifest = {
        "version": MANIFEST_VERSION,
        "width": sim.width,
        "height": sim.height,
        "seed": cfg.seed,
        "scenes": entries,
        "calibration": {"frames": frames, "truth": "calib/truth.tfc"},
    }
    _write_json(root / "manifest.json", manifest)
    return manifest


def load_manifest(cfg: PipelineConfig) -> dict:
    path = cfg.data_path / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


def _read(root: Path, rel: str):
    path = root / rel
    try:
        return read_image(path)
    except FileNotFoundError as exc:
        raise DataError(f"missing image file {path}") from exc
    except ImageFormatError as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc


# -- calibration ------------------------------------------------------------

def fit_calibration_stage(cfg: PipelineConfig) -> calib.CalibModel:
    manifest = load_manifest(cfg)
    frames = manifest.get("calibration", {}).get("frames", [])
    if len(frames) < 3:
        raise DataError("need at least 3 calibration frames")
    root = cfg.data_path
    imgs = [[_read(root, f[role]) for role in ROLES] for f in frames]
    raw = np.stack([i[0].data for i in imgs])
    amp = np.stack([i[1].data for i in imgs])
    true = np.stack([i[2].data for i in imgs])
    valid = np.stack([i[0].valid_mask & i[2].valid_mask for i in imgs])
    model = calib.fit_calibration(raw, amp, true, valid)
    cfg.model_path.mkdir(parents=True, exist_ok=True)
    calib.save_calib(model, cfg.model_path / "calib.tfc")
    return model


def load_calibration(cfg: PipelineConfig) -> calib.CalibModel:
    path = cfg.model_path / "calib.tfc"
    if not path.exists():
        raise DataError(f"calibration model not found: {path} (run fit-calib)")
    return calib.load_calib(path)


@dataclass
class Frame:
    id: str
    raw: RangeImage
    amplitude: AmplitudeImage
    reference: RangeImage | None
    calibrated: RangeImage


def load_frames(cfg: PipelineConfig, split: str, model: calib.CalibModel | None = None) -> list[Frame]:
    manifest = load_manifest(cfg)
    model = model or load_calibration(cfg)
    root = cfg.data_path
    out = []
    for e in manifest["scenes"]:
        if e["split"] != split:
            continue
        raw, amp, ref = (_read(root, e["images"][role]) for role in ROLES)
        if raw.shape != model.shape:
            raise DataError(f"{e['id']}: image {raw.shape} does not match calibration {model.shape}")
        out.append(Frame(e["id"], raw, amp, ref, calib.apply_calibration(model, raw, amp)))
    return out


# -- training ---------------------------------------------------------------

def _encoder_for(cfg: PipelineConfig, frames: list[Frame]) -> encode.EncoderParams:
    if cfg.encoder.ready:
        return cfg.encoder
    amps = np.concatenate([f.amplitude.data[f.amplitude.valid_mask] for f in frames])
    return cfg.encoder.with_amplitude_span(amps)


def _write_loss_csv(path: Path, columns: dict) -> None:
    names = list(columns)
    n = max((len(v) for v in columns.values()), default=0)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch"] + names)
        for i in range(n):
            wr.writerow([i + 1] + [f"{columns[k][i]:.9g}" if i < len(columns[k]) else "" for k in names])


def train_range_stage(cfg: PipelineConfig) -> rangenet.RangeRecoveryModel:
    frames = load_frames(cfg, "train")
    if not frames:
        raise DataError("no training scenes in the manifest")
    encoder = _encoder_for(cfg, frames)
    samples = encode.build_dataset([(f.calibrated, f.amplitude, f.reference) for f in frames],
                                   encoder, cfg.range_train.seed)
    if len(samples) == 0:
        raise DataError("training set has no eligible pixels")
    model = rangenet.train_range_on_samples(samples, encoder, cfg.range_train)
    cfg.model_path.mkdir(parents=True, exist_ok=True)
    rangenet.save_range_model(model, cfg.model_path / "range.tfr")
    _write_loss_csv(cfg.model_path / "range_loss.csv", {"loss": model.epoch_losses})
    return model


def train_boundary_stage(cfg: PipelineConfig) -> boundary.BoundaryModelSet:
    frames = load_frames(cfg, "train")
    if not frames:
        raise DataError("no training scenes in the manifest")
    encoder = _encoder_for(cfg, frames)
    sets = boundary.build_boundary_dataset([(f.calibrated, f.amplitude, f.reference) for f in frames],
                                           encoder, cfg.canny, cfg.boundary_train.seed, cfg.detector.neg_ratio)
    if sum(len(s) for s in sets) == 0:
        raise DataError("boundary training set is empty")
    models = boundary.train_boundary_nns(sets, encoder, cfg.boundary_train)
    cfg.model_path.mkdir(parents=True, exist_ok=True)
    boundary.save_boundary_models(models, cfg.model_path)
    _write_loss_csv(cfg.model_path / "boundary_loss.csv",
                    {f"group{g}": losses for g, losses in enumerate(models.epoch_losses)})
    return models


def load_models(cfg: PipelineConfig):
    try:
        rmodel = rangenet.load_range_model(cfg.model_path / "range.tfr")
        bmodels = boundary.load_boundary_models(cfg.model_path)
    except FileNotFoundError as exc:
        raise DataError(f"missing model file: {exc.filename}") from exc
    return rmodel, bmodels


# -- inference --------------------------------------------------------------

@dataclass
class InferResult:
    calibrated: RangeImage
    recovered: RangeImage
    edges: boundary.EdgeMap
    filtered: RangeImage
    timings_ms: dict


def infer_frame(cfg: PipelineConfig, raw: RangeImage, amp: AmplitudeImage, cmodel, rmodel, bmodels) -> InferResult:
    """calibrate -> F -> G -> geodesic filter, timing each stage."""
    if raw.shape != amp.shape or raw.shape != cmodel.shape:
        raise DataError(f"input {raw.shape}/{amp.shape} does not match calibration {cmodel.shape}")
    t = {}
    t0 = time.perf_counter()
    cal = calib.apply_calibration(cmodel, raw, amp)
    t1 = time.perf_counter()
    rf = rangenet.recover_range(rmodel, cal, amp)
    t2 = time.perf_counter()
    edges = boundary.detect_boundaries(bmodels, cal, amp, cfg.detector.low, cfg.detector.high)
    t3 = time.perf_counter()
    g = cfg.geodesic
    rhat = geodesic.geodesic_filter(rf, edges, g.k, g.sigma, g.step_cost)
    t4 = time.perf_counter()
    t["calibrate"] = 1e3 * (t1 - t0)
    t["range_nn"] = 1e3 * (t2 - t1)
    t["boundary_nn"] = 1e3 * (t3 - t2)
    t["geodesic_filter"] = 1e3 * (t4 - t3)
    t["total"] = 1e3 * (t4 - t0)
    return InferResult(cal, rf, edges, rhat, t)


def write_infer_outputs(res: InferResult, prefix: Path) -> dict:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "calibrated": f"{prefix}_calibrated.tfd",
        "rf": f"{prefix}_rf.tfd",
        "edges": f"{prefix}_edges.tfd",
        "orientation": f"{prefix}_orient.tfd",
        "rhat": f"{prefix}_rhat.tfd",
    }
    write_image(res.calibrated, paths["calibrated"])
    write_image(res.recovered, paths["rf"])
    boundary.write_edge_map(res.edges, paths["edges"], paths["orientation"])
    write_image(res.filtered, paths["rhat"])
    return paths


def infer_stage(cfg: PipelineConfig, split: str = "test") -> dict:
    """Run inference on every scene of ``split``; returns per-scene timings."""
    cmodel = load_calibration(cfg)
    rmodel, bmodels = load_models(cfg)
    manifest = load_manifest(cfg)
    root = cfg.data_path
    timings = {}
    for e in manifest["scenes"]:
        if e["split"] != split:
            continue
        raw = _read(root, e["images"]["distorted_range"])
        amp = _read(root, e["images"]["amplitude"])
        res = infer_frame(cfg, raw, amp, cmodel, rmodel, bmodels)
        write_infer_outputs(res, cfg.output_path / e["id"])
        timings[e["id"]] = res.timings_ms
    return timings


# -- evaluation -------------------------------------------------------------

METHODS = ("distorted", "calibrated", "rf", "rhat")


def relative_improvement(acc_new: float, acc_base: float) -> float:
    """Share of the baseline's incorrect pixels that became correct."""
    if acc_base >= 1.0:
        return 0.0
    return (acc_new - acc_base) / (1.0 - acc_base)


def evaluate_stage(cfg: PipelineConfig, split: str = "test") -> dict:
    manifest = load_manifest(cfg)
    _, bmodels = load_models(cfg)
    root = cfg.data_path
    out = cfg.output_path
    ev = cfg.eval
    per_method = {m: {"all": [], "boundary": []} for m in METHODS}
    g_pairs, c_pairs, raw_pairs = [], [], []
    n_scenes = 0
    for e in manifest["scenes"]:
        if e["split"] != split:
            continue
        n_scenes += 1
        ref = _read(root, e["images"]["reference_range"])
        amp = _read(root, e["images"]["amplitude"])
        est = {"distorted": _read(root, e["images"]["distorted_range"])}
        for m in ("calibrated", "rf", "rhat"):
            path = out / f"{e['id']}_{m}.tfd"
            if not path.exists():
                raise DataError(f"missing inference output {path} (run infer)")
            est[m] = read_image(path)
        # common evaluation region: pixels where the networks ran
        region = est["rf"].valid_mask
        gt = boundary.gt_edges(ref, cfg.canny)
        bmask = evalmetrics.boundary_region_mask(gt, ev.boundary_margin) & region
        for m in METHODS:
            per_method[m]["all"].append((est[m], ref, region))
            per_method[m]["boundary"].append((est[m], ref, bmask))
        gt_in = gt.edge & region
        # the stored edge map is binary; the PR sweep needs the detector scores
        em = boundary.detect_boundaries(bmodels, est["calibrated"], amp, cfg.detector.low, cfg.detector.high)
        g_pairs.append((em, gt_in))
        c_pairs.append((_restrict(boundary.canny(est["calibrated"], cfg.canny), region), gt_in))
        raw_pairs.append((_restrict(boundary.canny(est["distorted"], cfg.canny), region), gt_in))
    if n_scenes == 0:
        raise DataError(f"no {split} scenes in the manifest")

    th = ev.thresholds
    curves = {m: {r: evalmetrics.pooled_accuracy(per_method[m][r], th, r) for r in ("all", "boundary")}
              for m in METHODS}
    pr_g = evalmetrics.pooled_edge_pr(g_pairs, ev.edge_tolerance)
    pr_c = evalmetrics.pooled_edge_pr(c_pairs, ev.edge_tolerance)
    pr_raw = evalmetrics.pooled_edge_pr(raw_pairs, ev.edge_tolerance)

    tau = ev.report_tau
    acc = {m: {r: curves[m][r].at(tau) for r in ("all", "boundary")} for m in METHODS}
    report = {
        "split": split,
        "n_scenes": n_scenes,
        "tau_mm": tau,
        "rows": [
            {"method": m, "region": r, "accuracy_at_tau": acc[m][r],
             "n_pixels": curves[m][r].n_pixels,
             "curve": [float(v) for v in curves[m][r].fraction_correct]}
            for m in METHODS for r in ("all", "boundary")
        ],
        "thresholds_mm": [float(t) for t in th],
        "relative_improvement": relative_improvement(acc["rhat"]["all"], acc["distorted"]["all"]),
        "relative_improvement_vs_calibrated": relative_improvement(acc["rhat"]["all"], acc["calibrated"]["all"]),
        "edge_pr": {
            "tolerance_px": ev.edge_tolerance,
            "detector": _pr_summary(pr_g),
            "canny_on_calibrated": _pr_summary(pr_c),
            "canny_on_distorted": _pr_summary(pr_raw),
        },
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    with open(out / "accuracy.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "region", "threshold_mm", "fraction_correct"])
        for m in METHODS:
            for r in ("all", "boundary"):
                for t, f in zip(th, curves[m][r].fraction_correct):
                    wr.writerow([m, r, f"{t:g}", f"{f:.6f}"])
    with open(out / "edge_pr.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["detector", "threshold", "precision", "recall", "f1"])
        for name, pr in (("nn", pr_g), ("canny_calibrated", pr_c), ("canny_distorted", pr_raw)):
            for row in zip(pr.thresholds, pr.precision, pr.recall, pr.f1):
                wr.writerow([name] + [f"{v:.6f}" for v in row])
    return report


def _restrict(em: boundary.EdgeMap, region: np.ndarray) -> boundary.EdgeMap:
    return boundary.EdgeMap(em.edge & region, em.direction, em.score, em.thin & region)


def _pr_summary(pr: evalmetrics.PrCurve) -> dict:
    i = pr.best_index
    return {
        "best_f1": pr.best_f1,
        "best_threshold": pr.best_threshold,
        "precision_at_best": float(pr.precision[i]),
        "recall_at_best": float(pr.recall[i]),
    }


def run_all(cfg: PipelineConfig) -> dict:
    simulate_dataset(cfg)
    fit_calibration_stage(cfg)
    train_range_stage(cfg)
    train_boundary_stage(cfg)
    infer_stage(cfg)
    return evaluate_stage(cfg)


__all__ = [
    "ConfigError", "DataError", "NumericError", "PipelineConfig", "load_config", "simulate_dataset",
    "fit_calibration_stage", "train_range_stage", "train_boundary_stage", "infer_stage",
    "evaluate_stage", "run_all",
]

"""Cross-validated baseline-versus-proposed experiment.

Both arms share data, folds and diagnosis models; they differ only in the
input the diagnosis stage sees: raw P-CBCT (baseline) or P-CBCT passed
through a denoiser trained on the fold's training cases (proposed).  Every
fold model is scored on the whole external set and the per-fold values are
aggregated as mean and population standard deviation.

Scoring is per side: each case contributes its left and its right sinus.
A case where the selector finds no sinus counts as wrong on both sides and
gets a one-hot probability on a wrong class.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .denoise import Denoiser, TrainConfig, denoise_volume, evaluate_denoiser, train_denoiser
from .diagnosis import (
    FitConfig,
    diagnose,
    key_substack,
    occlusion_saliency,
    save_models,
    severe_argmax,
    split_sides,
    train_selector,
    train_side_classifier,
)
from .errors import InvalidArgumentError, NoSinusFoundError, StageError
from .fdk import WINDOWS, synthesize_pcbct
from .geometry import ConeBeamGeometry, Volume, half_scan_angles
from .phantom import EXTERNAL_RATIOS, INTERNAL_RATIOS, DatasetSpec, DiagnosisLabel, generate_dataset

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CBCTCAD_OUTPUT_ROOT"
ARMS = ("baseline", "proposed")
REPORT_METRICS = (
    "accuracy",
    "micro_auc",
    "macro_auc",
    "macro_precision",
    "macro_sensitivity",
    "macro_f1",
    *(f"{m}_{c.name}" for c in DiagnosisLabel for m in ("precision", "sensitivity", "f1")),
    "psnr",
    "ssim",
    "selector_interval_hit",
    "no_sinus_cases",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment settings; every field maps to one JSON key.

    The denoiser defaults are desk-scale overrides of the reference protocol
    (lr 1e-3 and 5 epochs on a subsample of slices instead of lr 1e-4 and 20
    epochs on all slices).
    """

    seed: int = 0
    internal_cases: int = 100
    external_cases: int = 20
    dims: int = 64
    detector_pixels: int = 128
    view_step_deg: float = 2.0
    arc_deg: float = 180.0
    window: str = "hann"
    parker: bool = False
    folds: int = 5
    denoiser: str = "learned"
    denoiser_epochs: int = 5
    denoiser_lr: float = 1e-3
    denoiser_batch_size: int = 18
    denoiser_channels: int = 8
    denoiser_slices_per_case: int = 8
    tv_weight: float = 0.05
    fit_iterations: int = 600
    fit_lr: float = 0.05
    fit_l2: float = 1e-3
    saliency_patch: int = 8
    output_dir: str = "cbctcad-run"

    def __post_init__(self):
        if self.folds < 2:
            raise InvalidArgumentError("folds must be at least 2")
        if self.internal_cases < self.folds:
            raise InvalidArgumentError("internal_cases must be at least the fold count")
        if self.external_cases < 1:
            raise InvalidArgumentError("external_cases must be positive")
        if self.window not in WINDOWS:
            raise InvalidArgumentError(f"window must be one of {WINDOWS}")
        if self.denoiser not in ("identity", "tv", "learned"):
            raise InvalidArgumentError(f"unknown denoiser {self.denoiser!r}")
        if self.denoiser_slices_per_case < 1:
            raise InvalidArgumentError("denoiser_slices_per_case must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def geometry(self) -> ConeBeamGeometry:
        return ConeBeamGeometry(
            detector_pixels=self.detector_pixels,
            angles=half_scan_angles(self.view_step_deg, self.arc_deg),
        )

    def fit_config(self) -> FitConfig:
        return FitConfig(self.fit_iterations, self.fit_lr, self.fit_l2, self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.denoiser_epochs,
            lr=self.denoiser_lr,
            batch_size=self.denoiser_batch_size,
            seed=self.seed,
            channels=self.denoiser_channels,
        )

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


@dataclass
class MetricsReport:
    arm: str
    folds: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.arm not in ARMS:
            raise InvalidArgumentError(f"arm must be one of {ARMS}")

    def aggregate(self) -> dict:
        out = {}
        for name in REPORT_METRICS:
            m, sd = metrics.mean_sd([f[name] for f in self.folds])
            out[name] = {"mean": m, "sd": sd}
        return out

    def to_dict(self) -> dict:
        return {"arm": self.arm, "folds": self.folds, "aggregate": _json_safe(self.aggregate())}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        folds = [{k: _from_json(v) for k, v in f.items()} for f in d["folds"]]
        return cls(d["arm"], folds)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def _from_json(v):
    if v in ("inf", "-inf", "nan"):
        return float(v)
    return v


def _fmt(mean: float, sd: float, pct: bool) -> str:
    k = 100.0 if pct else 1.0
    return f"{mean * k:.1f}±{sd * k:.1f}"


_PCT = {"psnr": False, "no_sinus_cases": False}


def compare_arms(baseline: MetricsReport, proposed: MetricsReport) -> dict:
    """Per-metric ``proposed - baseline`` of the fold means.

    ``formatted`` mirrors the ``mean±sd (+delta)`` style, with fractions shown
    as percentages.
    """
    if len(baseline.folds) != len(proposed.folds):
        raise InvalidArgumentError("reports have different fold counts")
    a, b = baseline.aggregate(), proposed.aggregate()
    table = {}
    for name in REPORT_METRICS:
        delta = b[name]["mean"] - a[name]["mean"]
        pct = _PCT.get(name, True)
        k = 100.0 if pct else 1.0
        dk = delta * k
        table[name] = {
            "baseline": a[name]["mean"],
            "proposed": b[name]["mean"],
            "delta": delta,
            "formatted": f"{_fmt(b[name]['mean'], b[name]['sd'], pct)} ({dk:+.1f})" if math.isfinite(dk) else "n/a",
        }
    return table


def assign_folds(n: int, k: int, seed: int) -> np.ndarray:
    """Fold index of each of ``n`` cases; fold sizes differ by at most one."""
    if k < 2 or n < k:
        raise InvalidArgumentError("need 2 <= folds <= cases")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF01D]))
    out = np.empty(n, dtype=np.int64)
    out[rng.permutation(n)] = np.arange(n) % k
    return out


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc

        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner

    return wrap


@_stage("generate")
def _generate(config: ExperimentConfig):
    dims = (config.dims,) * 3
    internal = generate_dataset(DatasetSpec.from_ratios(config.internal_cases, INTERNAL_RATIOS, dims=dims, prefix="int"), config.seed)
    external = generate_dataset(DatasetSpec.from_ratios(config.external_cases, EXTERNAL_RATIOS, dims=dims, prefix="ext"), config.seed)
    return internal, external


@_stage("synthesize")
def _synthesize(cases, config: ExperimentConfig) -> list[Volume]:
    geom = config.geometry()
    out = []
    for i, c in enumerate(cases):
        out.append(synthesize_pcbct(c, geom, window=config.window, parker=config.parker))
        log.debug("synthesized %s (%d/%d)", c.case_id, i + 1, len(cases))
    return out


def _pick_slices(case, n: int, rng: np.random.Generator) -> np.ndarray:
    ny = case.volume.dims[1]
    return np.sort(rng.choice(ny, size=min(n, ny), replace=False))


@_stage("train-denoiser")
def _train_denoiser(config, cases, pcs, fold: int) -> Denoiser:
    if config.denoiser == "identity":
        return Denoiser.identity()
    if config.denoiser == "tv":
        return Denoiser.tv(config.tv_weight)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD1CE, fold]))
    pairs = []
    for case, pc in zip(cases, pcs):
        for j in _pick_slices(case, config.denoiser_slices_per_case, rng):
            pairs.append((pc.data[:, j, :], case.volume.data[:, j, :]))
    return train_denoiser(pairs, config.train_config())


def key_slice_pairs(cases, inputs) -> list:
    """(input, clean) coronal slice pairs over each case's key-slice range."""
    pairs = []
    for case, vol in zip(cases, inputs):
        lo, hi = case.key_slice_range
        for j in range(lo, hi + 1):
            pairs.append((vol.data[:, j, :], case.volume.data[:, j, :]))
    return pairs


@_stage("train-diagnosis")
def _train_diagnosis(config, cases, vols):
    fit = config.fit_config()
    selector = train_selector([(v, c.key_slice_range) for c, v in zip(cases, vols)], fit)
    samples = []
    for c, v in zip(cases, vols):
        left, right = split_sides(key_substack(v, c.key_slice_range))
        samples += [(left, c.left_label), (right, c.right_label)]
    return selector, train_side_classifier(samples, fit)


def _wrong_onehot(label: int) -> np.ndarray:
    p = np.zeros(len(DiagnosisLabel))
    p[(int(label) + 1) % len(DiagnosisLabel)] = 1.0
    return p


def score_sides(selector, classifier, cases, vols):
    """Per-side truth, probabilities and bookkeeping for one evaluation set."""
    truth, probs, hits, missing, results = [], [], 0, 0, []
    for c, v in zip(cases, vols):
        truth += [int(c.left_label), int(c.right_label)]
        try:
            dx = diagnose(selector, classifier, v)
        except NoSinusFoundError:
            missing += 1
            probs += [_wrong_onehot(c.left_label), _wrong_onehot(c.right_label)]
            results.append(None)
            continue
        lo, hi = dx.interval
        klo, khi = c.key_slice_range
        hits += abs(lo - klo) <= 2 and abs(hi - khi) <= 2
        probs += [dx.left_probs, dx.right_probs]
        results.append(dx)
    return np.array(truth), np.array(probs), hits / len(cases), missing, results


def _predict(probs: np.ndarray) -> np.ndarray:
    return np.array([severe_argmax(p) for p in probs])


def fold_metrics(truth, probs, interval_hit: float, missing: int, psnr: float, ssim: float) -> dict:
    cm = metrics.confusion_matrix(truth, _predict(probs))
    prf = metrics.per_class_prf(cm)
    micro, macro = metrics.multiclass_auc(truth, probs)
    out = {
        "accuracy": metrics.accuracy(cm),
        "micro_auc": micro,
        "macro_auc": macro,
        "macro_precision": prf.macro_precision,
        "macro_sensitivity": prf.macro_sensitivity,
        "macro_f1": prf.macro_f1,
        "psnr": psnr,
        "ssim": ssim,
        "selector_interval_hit": interval_hit,
        "no_sinus_cases": missing,
        "confusion_matrix": cm.tolist(),
    }
    for c in DiagnosisLabel:
        out[f"precision_{c.name}"] = float(prf.precision[c])
        out[f"sensitivity_{c.name}"] = float(prf.sensitivity[c])
        out[f"f1_{c.name}"] = float(prf.f1[c])
    return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in out.items()}


def _side_mask(case, side: str, interval) -> np.ndarray:
    """Cavity mask of one side cropped like ``split_sides(key_substack(...))``."""
    lo, hi = interval
    mask = case.cavity_mask(side)[:, lo : hi + 1, :]
    cut = (mask.shape[0] + 1) // 2
    return mask[:cut] if side == "left" else mask[cut:]


def saliency_localization(classifier, cases, vols, results, patch: int = 8) -> dict:
    """Share of correctly classified MFB sides whose saliency peak is in the cavity.

    The maximum of an occlusion map is a flat block, so a side counts as a hit
    when most voxels of that block lie inside the cavity.
    """
    hits = total = 0
    for c, v, dx in zip(cases, vols, results):
        if dx is None:
            continue
        halves = split_sides(key_substack(v, dx.interval))
        for side, half, label, pred in (
            ("left", halves[0], c.left_label, dx.left_label),
            ("right", halves[1], c.right_label, dx.right_label),
        ):
            if label != DiagnosisLabel.MFB or pred != DiagnosisLabel.MFB:
                continue
            size = tuple(min(patch, n) for n in half.dims)
            sal = occlusion_saliency(classifier, half, size)
            top = sal >= sal.max() - 1e-9
            total += 1
            hits += bool(_side_mask(c, side, dx.interval)[top].mean() > 0.5)
    return {"correct_mfb_sides": total, "peak_in_cavity": hits, "rate": hits / total if total else math.nan}


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _report_tables(out: Path, reports: dict, deltas: dict):
    for arm, rep in reports.items():
        agg = rep.aggregate()
        rows = [[name, *[f[name] for f in rep.folds], agg[name]["mean"], agg[name]["sd"]] for name in REPORT_METRICS]
        _write_csv(out / f"{arm}.csv", ["metric", *[f"fold{i}" for i in range(len(rep.folds))], "mean", "sd"], rows)
    _write_csv(
        out / "comparison.csv",
        ["metric", "baseline", "proposed", "delta", "proposed_formatted"],
        [[k, v["baseline"], v["proposed"], v["delta"], v["formatted"]] for k, v in deltas.items()],
    )


def audit_splits(internal, external, fold_of, training_log: dict) -> dict:
    """Check that no external or same-fold case was seen by any training stage."""
    external_ids = {c.case_id for c in external}
    violations = []
    for fold, stages in training_log.items():
        held_out = {c.case_id for c, f in zip(internal, fold_of) if f == fold}
        for stage, ids in stages.items():
            bad = sorted((set(ids) & external_ids) | (set(ids) & held_out))
            if bad:
                violations.append({"fold": fold, "stage": stage, "case_ids": bad})
    return {"external_cases": len(external_ids), "violations": violations, "passed": not violations}


def run_experiment(config: ExperimentConfig, write: bool = True) -> tuple[MetricsReport, MetricsReport]:
    """Run both arms over all folds; write reports and models if ``write``."""
    out = config.resolved_output_dir()
    timings = {}
    t0 = time.perf_counter()
    internal, external = _generate(config)
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pc_int = _synthesize(internal, config)
    pc_ext = _synthesize(external, config)
    timings["synthesize"] = time.perf_counter() - t0

    fold_of = assign_folds(len(internal), config.folds, config.seed)
    reports = {arm: MetricsReport(arm) for arm in ARMS}
    training_log = {}
    saliency = {}
    identity_scores = evaluate_denoiser(Denoiser.identity(), key_slice_pairs(external, pc_ext))

    for k in range(config.folds):
        t0 = time.perf_counter()
        tr = [i for i in range(len(internal)) if fold_of[i] != k]
        cases = [internal[i] for i in tr]
        ids = [c.case_id for c in cases]
        training_log[k] = {"denoiser": ids, "selector": ids, "classifier": ids}

        den = _train_denoiser(config, cases, [pc_int[i] for i in tr], k)
        arm_inputs = {
            "baseline": ([pc_int[i] for i in tr], pc_ext),
            "proposed": (
                [denoise_volume(den, pc_int[i]) for i in tr],
                [denoise_volume(den, v) for v in pc_ext],
            ),
        }
        for arm, (train_vols, ext_vols) in arm_inputs.items():
            selector, classifier = _train_diagnosis(config, cases, train_vols)
            try:
                truth, probs, hit, missing, results = score_sides(selector, classifier, external, ext_vols)
                scores = identity_scores if arm == "baseline" else evaluate_denoiser(den, key_slice_pairs(external, pc_ext))
                reports[arm].folds.append(fold_metrics(truth, probs, hit, missing, scores.psnr_mean, scores.ssim_mean))
                loc = saliency_localization(classifier, external, ext_vols, results, config.saliency_patch)
                acc = saliency.setdefault(arm, {"correct_mfb_sides": 0, "peak_in_cavity": 0})
                acc["correct_mfb_sides"] += loc["correct_mfb_sides"]
                acc["peak_in_cavity"] += loc["peak_in_cavity"]
            except Exception as exc:
                raise StageError("evaluate", exc) from exc
            if write:
                save_models(out / "models" / f"fold{k}" / f"{arm}.bin", selector, classifier, {"fold": k, "arm": arm})
        if write and den.kind != "identity":
            den.save(out / "models" / f"fold{k}" / "denoiser.bin")
        timings[f"fold{k}"] = time.perf_counter() - t0
        log.info("fold %d/%d done in %.1fs", k + 1, config.folds, timings[f"fold{k}"])

    for acc in saliency.values():
        n = acc["correct_mfb_sides"]
        acc["rate"] = acc["peak_in_cavity"] / n if n else math.nan
    audit = audit_splits(internal, external, fold_of, training_log)
    if not audit["passed"]:
        raise StageError("audit", f"split hygiene violated: {audit['violations']}")
    if write:
        try:
            _write_outputs(out, config, internal, external, fold_of, reports, audit, saliency, timings)
        except Exception as exc:
            raise StageError("report", exc) from exc
    return reports["baseline"], reports["proposed"]


def _write_outputs(out: Path, config, internal, external, fold_of, reports, audit, saliency, timings):
    out.mkdir(parents=True, exist_ok=True)
    deltas = compare_arms(reports["baseline"], reports["proposed"])
    manifest = {
        "internal": [
            {"case_id": c.case_id, "seed": c.rng_seed, "left": c.left_label.name, "right": c.right_label.name, "fold": int(f)}
            for c, f in zip(internal, fold_of)
        ],
        "external": [{"case_id": c.case_id, "seed": c.rng_seed, "left": c.left_label.name, "right": c.right_label.name} for c in external],
    }
    report = {
        "scoring": "per side (left and right sinus each scored); no-sinus-found cases count as wrong on both sides",
        # the output location is not an experiment parameter; leaving it out
        # keeps reports of identical runs byte-identical wherever they land
        "config": {k: v for k, v in config.to_dict().items() if k != "output_dir"},
        "arms": {arm: rep.to_dict() for arm, rep in reports.items()},
        "comparison": deltas,
        "split_audit": audit,
        "saliency_localization": saliency,
    }
    dump = lambda obj: json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n"
    (out / "report.json").write_text(dump(report))
    (out / "manifest.json").write_text(dump(manifest))
    (out / "config.json").write_text(dump(config.to_dict()))
    (out / "timings.json").write_text(dump(timings))
    _report_tables(out, reports, deltas)


def load_report(path) -> tuple[MetricsReport, MetricsReport, dict]:
    data = json.loads(Path(path).read_text())
    arms = data["arms"]
    return MetricsReport.from_dict(arms["baseline"]), MetricsReport.from_dict(arms["proposed"]), data

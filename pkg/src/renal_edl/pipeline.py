"""End-to-end commands: synthesize, merge detections, cross-validate, evaluate, report.

Every command writes ``run_config.json`` (the fully resolved
:class:`RunConfig`) next to its outputs.  Report files are plain CSV with
fixed headers; floats are written with ``repr`` so reruns compare bitwise.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as data_mod
from .data import SubjectRecord, class_counts, load_manifest, stratified_kfold, write_manifest
from .detection import merge_slices, read_boxes, write_boxes
from .errors import ConfigurationError, EDLError, ValidationError
from .metrics import (
    PredictionRecord,
    bootstrap_auc_ci,
    class_metrics,
    flag_anomalies,
    fold_ci,
    grade_correct_rates,
    macro_auc,
    predictions_from_evidence,
    uncertainty_summary,
)
from .network import (
    NetworkConfig,
    OptimizerConfig,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .volume import Box3D, Volume3D, crop, load_volume, rescale_box, resample_isotropic, save_volume, window_normalize

log = logging.getLogger(__name__)

NUM_CLASSES = 3
PRED_HEADER = ["id", "true", "pred", "p0", "p1", "p2", "u", "grade"]
VOI_HEADER = ["id", "x_min", "y_min", "z_min", "x_max", "y_max", "z_max"]


@dataclass
class RunConfig:
    command: str = "crossval"
    seed: int = 0
    k_folds: int = 5
    # Desk-scale training defaults; the clinical run used 300 epochs, lr 1e-4, batch 32.
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    manifest: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    voi: str | None = None
    n: int = 150
    proportions: tuple[float, ...] = data_mod.DEFAULT_PROPORTIONS
    difficulty: str = "easy"
    side: int = 32
    stage1_channels: int = 16
    block_channels: int = 16
    evidence_activation: str = "softplus"
    head_bias_init: float = 1.0
    window_width: float = 300.0
    window_level: float = 40.0
    target_spacing_mm: float = 1.0
    bootstrap_resamples: int = 2000
    ci_level: float = 0.95

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            input_side=self.side,
            stage1_channels=self.stage1_channels,
            block_channels=self.block_channels,
            num_classes=NUM_CLASSES,
            evidence_activation=self.evidence_activation,
            head_bias_init=self.head_bias_init,
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            batch_size=self.batch_size,
            epochs=self.epochs,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proportions"] = list(self.proportions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown run config keys: {sorted(unknown)}")
        d = dict(d)
        if "proportions" in d:
            d["proportions"] = tuple(d["proportions"])
        return cls(**d)


def _out_dir(config: RunConfig) -> Path:
    if not config.out:
        raise ValidationError("an output directory is required (--out)")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_config(config: RunConfig, out: Path) -> None:
    (out / "run_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# preprocessing


def subject_voi(record: SubjectRecord, voi_table: dict[str, Box3D] | None = None) -> Box3D | None:
    """VoI for a subject: the table entry if present, else merged boxes, else None."""
    if voi_table is not None and record.id in voi_table:
        return voi_table[record.id]
    if record.boxes_path is not None and Path(record.boxes_path).exists():
        boxes = read_boxes(record.boxes_path)
        if boxes:
            return merge_slices(boxes)
    return None


def preprocess(volume: Volume3D, voi: Box3D | None, config: RunConfig) -> np.ndarray:
    """Window, resample to isotropic spacing, crop the VoI into a network-sized cube."""
    windowed = window_normalize(volume, config.window_width, config.window_level)
    iso = resample_isotropic(windowed, config.target_spacing_mm)
    if voi is None:
        box = Box3D.full(iso)
    else:
        box = rescale_box(voi, volume.spacing_mm, config.target_spacing_mm)
    return crop(iso, box, config.side).values


def load_cohort(records: Sequence[SubjectRecord], config: RunConfig, voi_table=None) -> np.ndarray:
    cubes = []
    for r in records:
        try:
            vol = load_volume(r.volume_path)
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"subject {r.id}: volume file not found: {exc.filename}") from exc
        cubes.append(preprocess(vol, subject_voi(r, voi_table), config))
    side = config.side
    if not cubes:
        return np.zeros((0, side, side, side), dtype=np.float32)
    return np.stack(cubes).astype(np.float32)


def read_voi_table(path) -> dict[str, Box3D]:
    table = {}
    for row in _read_csv(Path(path)):
        table[row["id"]] = Box3D(
            (int(row["x_min"]), int(row["y_min"]), int(row["z_min"])),
            (int(row["x_max"]), int(row["y_max"]), int(row["z_max"])),
        )
    return table


# ---------------------------------------------------------------------------
# reports


def write_predictions(path: Path, preds: Sequence[PredictionRecord]) -> None:
    _write_csv(
        path,
        PRED_HEADER,
        ([p.id, p.true_class, p.predicted_class, *p.probs, p.uncertainty, p.grade] for p in preds),
    )


def read_predictions(path: Path) -> list[PredictionRecord]:
    out = []
    for row in _read_csv(path):
        probs = tuple(float(row[f"p{c}"]) for c in range(NUM_CLASSES))
        out.append(PredictionRecord(row["id"], int(row["true"]), int(row["pred"]), probs, float(row["u"]), int(row["grade"])))
    return out


METRICS_HEADER = [
    "set", "class", "accuracy", "sensitivity", "specificity", "auc",
    "auc_fold_mean", "auc_fold_sd", "auc_ci_low", "auc_ci_high", "auc_boot_ci_low", "auc_boot_ci_high",
]


def write_report(
    out: Path,
    preds: Sequence[PredictionRecord],
    config: RunConfig,
    set_name: str,
    fold_aucs: list[list[float]] | None = None,
) -> None:
    """Write the shared report surface for a pooled or external prediction set."""
    nan = float("nan")
    write_predictions(out / "predictions.csv", preds)
    cms = class_metrics(preds, NUM_CLASSES)
    rows = []
    for c, m in enumerate(cms):
        labels = np.array([p.true_class == c for p in preds])
        if np.isnan(m.auc):
            boot = (nan, nan)
        else:
            boot = bootstrap_auc_ci([p.probs[c] for p in preds], labels, config.bootstrap_resamples, config.seed, config.ci_level)
        if fold_aucs is not None:
            fs = fold_ci([f[c] for f in fold_aucs], config.ci_level)
            fold_fields = (fs.mean, fs.sd, fs.ci_low, fs.ci_high)
        else:
            fold_fields = (nan, nan, nan, nan)
        rows.append([set_name, data_mod.CLASS_NAMES[c], m.accuracy, m.sensitivity, m.specificity, m.auc, *fold_fields, *boot])
        _write_csv(out / f"roc_class{c}.csv", ["fpr", "tpr", "threshold"], m.roc_points)
    if fold_aucs is not None:
        fs = fold_ci([float(np.mean(f)) for f in fold_aucs], config.ci_level)
        macro_fold = (fs.mean, fs.sd, fs.ci_low, fs.ci_high)
    else:
        macro_fold = (nan, nan, nan, nan)
    rows.append([set_name, "macro", *(float(np.mean([r[i] for r in rows])) for i in (2, 3, 4)), macro_auc(cms), *macro_fold, nan, nan])
    _write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    _write_csv(out / "grades.csv", ["grade", "count", "correct_rate"], ((g.grade, g.count, g.correct_rate) for g in grade_correct_rates(preds)))
    _write_csv(out / "anomalies.csv", ["id", "kind"], flag_anomalies(preds))
    _write_csv(
        out / "uncertainty.csv",
        ["class", "median_uncertainty"],
        zip(data_mod.CLASS_NAMES, uncertainty_summary(preds, NUM_CLASSES)),
    )
    (out / "summary.txt").write_text(render_summary(out))


def render_summary(out: Path) -> str:
    """Human-readable digest of the CSV report files in ``out``."""
    metrics = _read_csv(out / "metrics.csv")
    grades = _read_csv(out / "grades.csv")
    anomalies = _read_csv(out / "anomalies.csv")
    medians = _read_csv(out / "uncertainty.csv")
    set_name = metrics[0]["set"] if metrics else "?"
    lines = [f"Report ({set_name} set)", ""]
    folds_path = out / "folds.csv"
    if folds_path.exists():
        lines.append("Per-fold AUC (ccRCC, pRCC, chRCC):")
        for row in _read_csv(folds_path):
            lines.append(f"  fold {row['fold']}: {float(row['auc_ccRCC']):.3f} {float(row['auc_pRCC']):.3f} {float(row['auc_chRCC']):.3f}")
        lines.append("")
    lines.append(f"{'class':<7} {'acc':>6} {'sens':>6} {'spec':>6} {'AUC':>6}  fold mean+-SD     normal CI        bootstrap CI")
    for row in metrics:
        f = {k: float(v) for k, v in row.items() if k not in ("set", "class")}
        fold_part = "" if math.isnan(f["auc_fold_mean"]) else f"{f['auc_fold_mean']:.3f}+-{f['auc_fold_sd']:.3f}"
        ci_part = "" if math.isnan(f["auc_ci_low"]) else f"({f['auc_ci_low']:.3f}-{f['auc_ci_high']:.3f})"
        boot_part = "" if math.isnan(f["auc_boot_ci_low"]) else f"({f['auc_boot_ci_low']:.3f}-{f['auc_boot_ci_high']:.3f})"
        lines.append(
            f"{row['class']:<7} {f['accuracy']:6.3f} {f['sensitivity']:6.3f} {f['specificity']:6.3f} {f['auc']:6.3f}"
            f"  {fold_part:<16} {ci_part:<16} {boot_part}"
        )
    lines += ["", "Uncertainty grades (grade, n, correct rate):"]
    for row in grades:
        rate = float(row["correct_rate"])
        lines.append(f"  {row['grade']}  {int(row['count']):4d}  {'-' if math.isnan(rate) else f'{rate:.3f}'}")
    lines += ["", "Median uncertainty by true class:"]
    for row in medians:
        med = float(row["median_uncertainty"])
        lines.append(f"  {row['class']:<6} {'-' if math.isnan(med) else f'{med:.3f}'}")
    lines += ["", f"Anomalous cases: {len(anomalies)}"]
    for row in anomalies:
        lines.append(f"  {row['id']}  {row['kind']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(config: RunConfig) -> Path:
    """Generate a synthetic cohort on disk; returns the manifest path."""
    out = _out_dir(config)
    (out / "volumes").mkdir(exist_ok=True)
    (out / "boxes").mkdir(exist_ok=True)
    subjects = data_mod.generate_synthetic_cohort(config.n, config.proportions, config.difficulty, config.side, config.seed)
    records = []
    for s in subjects:
        vol_path = save_volume(s.volume, out / "volumes" / s.id)
        box_path = out / "boxes" / f"{s.id}.csv"
        write_boxes(s.boxes, box_path)
        records.append(SubjectRecord(s.id, s.label, vol_path, box_path))
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    write_run_config(config, out)
    log.info("wrote %d subjects, class counts %s", len(records), class_counts(records).tolist())
    return manifest


def cmd_detect_merge(config: RunConfig) -> tuple[dict[str, Box3D], list[tuple[str, str]]]:
    """Merge each subject's per-slice boxes into a VoI table.

    Subjects without a usable boxes file are listed in ``skipped.csv``.
    """
    out = _out_dir(config)
    records = load_manifest(_require(config.manifest, "--manifest"), NUM_CLASSES)
    table: dict[str, Box3D] = {}
    skipped: list[tuple[str, str]] = []
    for r in records:
        if r.boxes_path is None:
            skipped.append((r.id, "no boxes file listed"))
            continue
        if not Path(r.boxes_path).exists():
            skipped.append((r.id, "boxes file missing"))
            continue
        boxes = read_boxes(r.boxes_path)
        if not boxes:
            skipped.append((r.id, "no boxes"))
            continue
        table[r.id] = merge_slices(boxes)
    rows = []
    for sid, b in table.items():
        rows.append([sid, *(int(math.floor(v)) for v in b.min_voxel), *(int(math.ceil(v)) for v in b.max_voxel)])
    _write_csv(out / "voi.csv", VOI_HEADER, rows)
    _write_csv(out / "skipped.csv", ["id", "reason"], skipped)
    write_run_config(config, out)
    return table, skipped


def _require(value, flag: str):
    if not value:
        raise ValidationError(f"{flag} is required for this command")
    return value


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


@dataclass
class CrossvalResult:
    predictions: list[PredictionRecord]
    fold_aucs: list[list[float]]
    loss_traces: list[list[float]] = field(default_factory=list)


def cmd_crossval(config: RunConfig) -> CrossvalResult:
    out = _out_dir(config)
    write_run_config(config, out)
    records = load_manifest(_require(config.manifest, "--manifest"), NUM_CLASSES)
    folds = stratified_kfold(records, config.k_folds, config.seed, NUM_CLASSES)
    voi_table = read_voi_table(config.voi) if config.voi else None
    cubes = load_cohort(records, config, voi_table)
    index = {r.id: i for i, r in enumerate(records)}
    labels = np.array([r.label for r in records], dtype=np.int64)
    net_cfg, opt_cfg = config.network_config(), config.optimizer_config()

    pooled: dict[str, PredictionRecord] = {}
    fold_rows, fold_aucs, traces = [], [], []
    for split in folds:
        f = split.fold_index
        try:
            tr = np.array([index[i] for i in split.train_ids])
            va = np.array([index[i] for i in split.validation_ids])
            log.info("fold %d: %d train / %d validation", f, len(tr), len(va))
            result = train(
                cubes[tr], labels[tr], net_cfg, opt_cfg, fold_seed(config.seed, f),
                on_epoch=lambda e, loss, f=f: log.info("fold %d epoch %d loss %.6f", f, e + 1, loss),
            )
            evidence = forward_batch(result.state, cubes[va])
        except EDLError as exc:
            raise type(exc)(f"fold {f}: {exc}") from exc
        preds = predictions_from_evidence(split.validation_ids, labels[va], evidence)
        fold_dir = out / f"fold_{f}"
        fold_dir.mkdir(exist_ok=True)
        save_checkpoint(result.state, fold_dir / "checkpoint.bin")
        write_predictions(fold_dir / "predictions.csv", preds)
        _write_csv(fold_dir / "loss_trace.csv", ["epoch", "loss"], enumerate(result.loss_trace, start=1))
        _write_csv(fold_dir / "split.csv", ["id", "role"], [*((i, "train") for i in split.train_ids), *((i, "validation") for i in split.validation_ids)])
        cms = class_metrics(preds, NUM_CLASSES)
        aucs = [m.auc for m in cms]
        fold_aucs.append(aucs)
        fold_rows.append([f, *aucs, macro_auc(cms), *(m.accuracy for m in cms), *(m.sensitivity for m in cms), *(m.specificity for m in cms)])
        traces.append(result.loss_trace)
        for p in preds:
            pooled[p.id] = p
    names = data_mod.CLASS_NAMES
    _write_csv(
        out / "folds.csv",
        ["fold", *(f"auc_{n}" for n in names), "auc_macro", *(f"accuracy_{n}" for n in names),
         *(f"sensitivity_{n}" for n in names), *(f"specificity_{n}" for n in names)],
        fold_rows,
    )
    # pooled predictions in manifest order
    preds = [pooled[r.id] for r in records]
    write_report(out, preds, config, "internal", fold_aucs)
    return CrossvalResult(preds, fold_aucs, traces)


def cmd_eval(config: RunConfig) -> list[PredictionRecord]:
    """Apply a checkpoint to a manifest and write an external-set report."""
    out = _out_dir(config)
    write_run_config(config, out)
    state = load_checkpoint(_require(config.checkpoint, "--checkpoint"))
    records = load_manifest(_require(config.manifest, "--manifest"), state.config.num_classes)
    if state.config.input_side != config.side:
        raise ConfigurationError(f"checkpoint expects side {state.config.input_side}, run config has {config.side}")
    voi_table = read_voi_table(config.voi) if config.voi else None
    cubes = load_cohort(records, config, voi_table)
    evidence = forward_batch(state, cubes) if len(records) else np.zeros((0, NUM_CLASSES))
    preds = predictions_from_evidence([r.id for r in records], [r.label for r in records], evidence)
    write_report(out, preds, config, "external")
    return preds


def cmd_report(config: RunConfig) -> str:
    """Re-render the summary from an existing report directory."""
    out = Path(_require(config.out, "--out"))
    if not (out / "metrics.csv").exists():
        raise FileNotFoundError(f"no report found in {out}")
    text = render_summary(out)
    (out / "summary.txt").write_text(text)
    return text

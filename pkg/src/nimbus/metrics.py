"""Forecast verification: confusion counts, CSI, evaluation, baselines,
and region ensembling.

The evaluation pipeline mirrors deployment: model logits at crop resolution
become probabilities, are bilinearly upsampled to the target grid, and both
prediction and target are binarized before counting.  Pooled scores always
come from pooled counts, never from averaging per-group scores.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import data as D
from . import tensor as T
from .errors import ConfigError, DataError, ShapeError

PREDICTION_SUFFIX = ".pred.w4cl"


@dataclasses.dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.2        # rain rate (mm/h) defining an event
    prob_threshold: float = 0.5   # probability cut for bce-trained models
    prediction_kind: str = "probability"   # "rate" for mse-trained models
    batch_size: int = 8
    drop_bands: tuple = ()

    def __post_init__(self):
        if self.threshold < 0:
            raise ConfigError(f"threshold must be >= 0, got {self.threshold}")
        if not 0 < self.prob_threshold < 1:
            raise ConfigError("prob_threshold must lie in (0, 1)")
        if self.prediction_kind not in ("probability", "rate"):
            raise ConfigError(f"unknown prediction kind {self.prediction_kind!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
        d = dict(d)
        if "drop_bands" in d:
            d["drop_bands"] = tuple(d["drop_bands"])
        return cls(**d)


def binarize(rates, threshold):
    """Boolean event mask: 1 where rate >= threshold (inclusive boundary)."""
    if threshold < 0:
        raise ConfigError(f"threshold must be >= 0, got {threshold}")
    return np.asarray(rates) >= threshold


def csi(counts):
    """Critical Success Index tp/(tp+fp+fn); 0 when nothing was predicted
    or observed, so an all-quiet comparison scores 0 rather than dividing
    by zero."""
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 0.0
    return counts.tp / denom


def count_events(pred_event, true_event):
    """Tally one prediction/truth pair of boolean masks of identical dims."""
    pred_event = np.asarray(pred_event)
    true_event = np.asarray(true_event)
    if pred_event.shape != true_event.shape:
        raise ShapeError(f"prediction {pred_event.shape} vs truth {true_event.shape}")
    tp = int(np.sum(pred_event & true_event))
    fp = int(np.sum(pred_event & ~true_event))
    fn = int(np.sum(~pred_event & true_event))
    return ConfusionCounts(tp, fp, fn, pred_event.size - tp - fp - fn)


@dataclasses.dataclass
class EvalReport:
    split: str
    counts_by_job: dict           # (region, year) -> ConfusionCounts
    counts_by_lead: list          # one ConfusionCounts per lead time
    pooled: ConfusionCounts
    config: EvalConfig
    n_samples: int

    @property
    def pooled_csi(self):
        return csi(self.pooled)

    def csi_by_job(self):
        return {job: csi(c) for job, c in sorted(self.counts_by_job.items())}

    def csi_by_lead(self):
        return [csi(c) for c in self.counts_by_lead]

    def to_json_dict(self):
        return {
            "split": self.split,
            "n_samples": self.n_samples,
            "pooled_csi": self.pooled_csi,
            "pooled_counts": self.pooled.to_dict(),
            "csi_by_job": {f"{r}:{y}": v for (r, y), v in self.csi_by_job().items()},
            "counts_by_job": {f"{r}:{y}": c.to_dict()
                              for (r, y), c in sorted(self.counts_by_job.items())},
            "csi_by_lead": self.csi_by_lead(),
            "config": {"threshold": self.config.threshold,
                       "prob_threshold": self.config.prob_threshold,
                       "prediction_kind": self.config.prediction_kind,
                       "drop_bands": list(self.config.drop_bands)},
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    def to_tsv(self):
        """One diff-friendly line per (region, year): counts then CSI."""
        lines = []
        for (region, year), c in sorted(self.counts_by_job.items()):
            lines.append(f"{region}\t{year}\t{c.tp}\t{c.fp}\t{c.fn}\t{c.tn}"
                         f"\t{csi(c):.6f}")
        lines.append(f"pooled\t-\t{self.pooled.tp}\t{self.pooled.fp}"
                     f"\t{self.pooled.fn}\t{self.pooled.tn}\t{self.pooled_csi:.6f}")
        return "\n".join(lines) + "\n"


def sample_stem(record):
    """File-name stem identifying one sample, shared by prediction files."""
    base = os.path.basename(record.input_path)
    for suffix in (".input.w4cl", ".w4cl"):
        if base.endswith(suffix):
            return base[:-len(suffix)]
    return base


def prediction_path(pred_dir, record):
    return os.path.join(pred_dir, sample_stem(record) + PREDICTION_SUFFIX)


def model_probabilities(model, x):
    """Eval-mode forward to event probabilities at crop resolution."""
    return T.sigmoid(model.forward(x, train=False))


def predict_to_files(model, manifest, split, out_dir, config=EvalConfig()):
    """Write one prediction tensor file per sample; returns the paths.

    Files hold probabilities (or rates, for mse-trained models) at crop
    resolution with dims (1, t_out, crop, crop), named <stem>.pred.w4cl.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for x, _, records in D.batch_iter(manifest, split, config.batch_size,
                                      seed=0, shuffle=False, drop=config.drop_bands):
        probs = model.forward(x, train=False)
        if config.prediction_kind == "probability":
            probs = T.sigmoid(probs)
        for i, record in enumerate(records):
            path = prediction_path(out_dir, record)
            D.write_tensor_file(path, probs[i:i + 1])
            paths.append(path)
    return paths


def _event_mask(pred, config):
    """Upsample crop-resolution predictions 2x and binarize them."""
    up = T.bilinear_resize(pred, 2 * pred.shape[2], 2 * pred.shape[3])
    cut = config.prob_threshold if config.prediction_kind == "probability" \
        else config.threshold
    return up >= cut


def _load_predictions(pred_dir, records, manifest):
    rows = []
    for record in records:
        path = prediction_path(pred_dir, record)
        if not os.path.exists(path):
            raise DataError(f"missing prediction file {path}")
        p = D.read_tensor_file(path)
        want = (1, manifest.t_out, manifest.crop, manifest.crop)
        if p.shape != want:
            raise DataError(f"{path}: dims {p.shape} != {want}")
        rows.append(p)
    return np.concatenate(rows, axis=0)


def evaluate(source, manifest, split, config=EvalConfig()):
    """Score a model or a directory of prediction files against a split.

    source is either a model (anything with .forward) or the path of a
    directory holding <stem>.pred.w4cl files from predict_to_files.  Counts
    accumulate per (region, year) and per lead time; the pooled CSI comes
    from the pooled counts.
    """
    from_files = isinstance(source, (str, os.PathLike))
    by_job = {}
    by_lead = None
    n_samples = 0
    for x, y, records in D.batch_iter(manifest, split, config.batch_size,
                                      seed=0, shuffle=False, drop=config.drop_bands):
        if from_files:
            pred = _load_predictions(source, records, manifest)
        else:
            pred = source.forward(x, train=False)
            if config.prediction_kind == "probability":
                pred = T.sigmoid(pred)
        if by_lead is None:
            by_lead = [ConfusionCounts() for _ in range(y.shape[1])]
        pred_event = _event_mask(pred, config)
        true_event = binarize(y, config.threshold)
        if pred_event.shape != true_event.shape:
            raise ShapeError(f"prediction {pred_event.shape} vs target {true_event.shape}")
        for i, record in enumerate(records):
            job = (record.region, record.year)
            sample_counts = ConfusionCounts()
            for lead in range(y.shape[1]):
                c = count_events(pred_event[i, lead], true_event[i, lead])
                by_lead[lead] = by_lead[lead] + c
                sample_counts = sample_counts + c
            by_job[job] = by_job.get(job, ConfusionCounts()) + sample_counts
            n_samples += 1
    if n_samples == 0:
        raise DataError(f"split {split!r} has no samples to evaluate")
    pooled = sum(by_lead, ConfusionCounts())
    return EvalReport(split=split if isinstance(split, str) else "custom",
                      counts_by_job=by_job, counts_by_lead=by_lead,
                      pooled=pooled, config=config, n_samples=n_samples)


def _constant_report(manifest, split, config, value):
    """Evaluate an all-zeros or all-ones probability field without a model."""
    by_job = {}
    by_lead = None
    n_samples = 0
    pred_frame = None
    for _, y, records in D.batch_iter(manifest, split, config.batch_size,
                                      seed=0, shuffle=False, drop=config.drop_bands):
        if by_lead is None:
            by_lead = [ConfusionCounts() for _ in range(y.shape[1])]
        if pred_frame is None or pred_frame.shape != y.shape[2:]:
            pred_frame = np.full(y.shape[2:], value >= config.prob_threshold)
        true_event = binarize(y, config.threshold)
        for i, record in enumerate(records):
            job = (record.region, record.year)
            sample_counts = ConfusionCounts()
            for lead in range(y.shape[1]):
                c = count_events(pred_frame, true_event[i, lead])
                by_lead[lead] = by_lead[lead] + c
                sample_counts = sample_counts + c
            by_job[job] = by_job.get(job, ConfusionCounts()) + sample_counts
            n_samples += 1
    if n_samples == 0:
        raise DataError(f"split {split!r} has no samples to evaluate")
    return EvalReport(split=split if isinstance(split, str) else "custom",
                      counts_by_job=by_job, counts_by_lead=by_lead,
                      pooled=sum(by_lead, ConfusionCounts()), config=config,
                      n_samples=n_samples)


def persistence_report(manifest, split, config=EvalConfig()):
    """Score the repeat-the-last-observation forecast, or None if the split
    carries no latent rain fields to persist."""
    samples = manifest.split_samples(split) if isinstance(split, str) else list(split)
    if not samples or any(s.latent_path is None for s in samples):
        return None
    by_job = {}
    by_lead = None
    n_samples = 0
    for s in samples:
        latent = D.read_tensor_file(manifest.resolve(s.latent_path))
        y = D.load_sample_target(manifest, s)
        if by_lead is None:
            by_lead = [ConfusionCounts() for _ in range(y.shape[1])]
        pred_event = binarize(latent[0, 0], config.threshold)
        true_event = binarize(y[0], config.threshold)
        job = (s.region, s.year)
        sample_counts = ConfusionCounts()
        for lead in range(y.shape[1]):
            c = count_events(pred_event, true_event[lead])
            by_lead[lead] = by_lead[lead] + c
            sample_counts = sample_counts + c
        by_job[job] = by_job.get(job, ConfusionCounts()) + sample_counts
        n_samples += 1
    return EvalReport(split=split if isinstance(split, str) else "custom",
                      counts_by_job=by_job, counts_by_lead=by_lead,
                      pooled=sum(by_lead, ConfusionCounts()), config=config,
                      n_samples=n_samples)


def trivial_baselines(manifest, split, config=EvalConfig()):
    """CSI of the no-skill references: all-zeros, all-ones, persistence.

    Persistence repeats the last observed rain field across every lead; when
    the data carries no such field the entry is None rather than an error.
    """
    zeros = _constant_report(manifest, split, config, 0.0)
    ones = _constant_report(manifest, split, config, 1.0)
    persist = persistence_report(manifest, split, config)
    return {"all_zeros": zeros.pooled_csi, "all_ones": ones.pooled_csi,
            "persistence": None if persist is None else persist.pooled_csi}


def ensemble_predict(models, x, mode="average"):
    """Mean of per-model event probabilities for one input batch."""
    if mode != "average":
        raise ConfigError(f"unknown ensemble mode {mode!r}")
    if not models:
        raise ConfigError("ensemble needs at least one model")
    out = None
    for model in models:
        probs = model_probabilities(model, x)
        if out is None:
            out = np.zeros_like(probs, dtype=np.float64)
        elif probs.shape != out.shape:
            raise ShapeError(f"ensemble member output {probs.shape} != {out.shape}")
        out += probs
    return (out / len(models)).astype(probs.dtype)


def ensemble_to_files(models, manifest, split, out_dir, config=EvalConfig()):
    """Write averaged-probability prediction files for a model ensemble."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for x, _, records in D.batch_iter(manifest, split, config.batch_size,
                                      seed=0, shuffle=False, drop=config.drop_bands):
        probs = ensemble_predict(models, x)
        for i, record in enumerate(records):
            path = prediction_path(out_dir, record)
            D.write_tensor_file(path, probs[i:i + 1])
            paths.append(path)
    return paths

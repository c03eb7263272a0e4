"""Seed-quality evaluation: masks from maps, mIoU / FP / FN, threshold and K sweeps.

Evaluation happens at patch resolution.  Label 0 is background and label
c + 1 is class c.  All metrics come from one confusion matrix aggregated
over the whole evaluation set:

* IoU_c = TP_c / (T_c + P_c - TP_c), for background and every class;
* mIoU is the mean IoU over background and every class that appears in
  the truth or the prediction;
* FP = sum over foreground classes of (P_c - TP_c), FN = sum of
  (T_c - TP_c), both divided by the number of foreground truth pixels.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .maps import localization_pipeline
from .model import forward

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class SeedEvaluation:
    iou: np.ndarray  # (C + 1,), index 0 = background; NaN where the label never occurs
    miou: float
    fp: float
    fn: float
    best_threshold: float | None = None
    confusion: np.ndarray | None = field(default=None, repr=False)

    def rows(self):
        """(label, name, IoU) rows: background first, then each class."""
        out = []
        for i, v in enumerate(self.iou):
            out.append((i, "background" if i == 0 else f"class{i - 1}", v))
        return out


def maps_to_mask(maps, threshold):
    """Per-patch label: argmax class (lowest index on ties) if its value >= threshold, else 0."""
    arr = maps.maps if hasattr(maps, "maps") else np.asarray(maps)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    best = arr.argmax(axis=0)
    top = arr.max(axis=0)
    return np.where(top >= threshold, best + 1, 0).astype(np.int64)


def confusion_matrix(predictions, truths, num_classes):
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions but {len(truths)} ground-truth masks")
    if not len(predictions):
        raise ValueError("cannot evaluate an empty list of masks")
    pred = np.concatenate([np.asarray(p).ravel() for p in predictions])
    truth = np.concatenate([np.asarray(t).ravel() for t in truths])
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth masks have different sizes")
    return kernels.active().confusion_counts(pred.astype(np.int64), truth.astype(np.int64), num_classes + 1)


def scores_from_confusion(conf):
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    t = conf.sum(axis=1)
    p = conf.sum(axis=0)
    union = t + p - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    miou = float(iou[union > 0].mean())
    fg_truth = t[1:].sum()
    denom = max(fg_truth, 1.0)
    fp = float((p[1:] - tp[1:]).sum() / denom)
    fn = float((t[1:] - tp[1:]).sum() / denom)
    return iou, miou, fp, fn


def evaluate_seeds(predictions, truths, num_classes):
    conf = confusion_matrix(predictions, truths, num_classes)
    iou, miou, fp, fn = scores_from_confusion(conf)
    return SeedEvaluation(iou=iou, miou=miou, fp=fp, fn=fn, confusion=conf)


def threshold_sweep(maps_list, truths, thresholds=DEFAULT_THRESHOLDS, num_classes=None):
    """Evaluation at the threshold with the best mIoU (lowest threshold on ties)."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("threshold grid is empty")
    arrays = [m.maps if hasattr(m, "maps") else np.asarray(m) for m in maps_list]
    if num_classes is None:
        num_classes = arrays[0].shape[0]
    best = None
    for th in thresholds:
        ev = evaluate_seeds([maps_to_mask(a, th) for a in arrays], truths, num_classes)
        if best is None or ev.miou > best.miou:
            ev.best_threshold = float(th)
            best = ev
    return best


# ----------------------------------------------------------------------
# model-level helpers


def forward_batches(params, config, images, batch_size=32):
    """Yield (start, ForwardRecord) over ``images`` in chunks."""
    for start in range(0, len(images), batch_size):
        yield start, forward(images[start:start + batch_size], params, config)


def infer_maps(params, config, samples, stage="full", fuse_layers=None, use_labels=True, batch_size=32):
    """Localization maps for every sample (list of ClassLocalizationMaps)."""
    images = np.stack([s.image for s in samples])
    out = []
    for start, record in forward_batches(params, config, images, batch_size):
        for i in range(record.batch_size):
            labels = samples[start + i].labels if use_labels else None
            out.append(localization_pipeline(record, config, i, stage=stage, labels=labels, fuse_layers=fuse_layers))
    return out


def collect_records(params, config, samples, batch_size=32):
    images = np.stack([s.image for s in samples])
    return list(forward_batches(params, config, images, batch_size))


def maps_from_records(records, config, samples, stage="full", fuse_layers=None, use_labels=True):
    out = []
    for start, record in records:
        for i in range(record.batch_size):
            labels = samples[start + i].labels if use_labels else None
            out.append(localization_pipeline(record, config, i, stage=stage, labels=labels, fuse_layers=fuse_layers))
    return out


def evaluate_model(params, config, samples, stage="full", fuse_layers=None, thresholds=DEFAULT_THRESHOLDS):
    maps = infer_maps(params, config, samples, stage=stage, fuse_layers=fuse_layers)
    return threshold_sweep(maps, [s.gt_mask for s in samples], thresholds, config.num_classes)


def k_sweep(params, config, samples, k_values=None, thresholds=DEFAULT_THRESHOLDS):
    """Rows (K, FP, FN, mIoU) of the attention-only maps fused over the last K layers."""
    if k_values is None:
        k_values = range(1, config.num_layers + 1)
    records = collect_records(params, config, samples)
    truths = [s.gt_mask for s in samples]
    rows = []
    for k in k_values:
        maps = maps_from_records(records, config, samples, stage="attn", fuse_layers=k)
        ev = threshold_sweep(maps, truths, thresholds, config.num_classes)
        rows.append((int(k), ev.fp, ev.fn, ev.miou))
    return rows


def write_evaluation_csv(path, ev):
    """Columns label,name,iou followed by summary rows miou, fp, fn, best_threshold."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "name", "iou"])
        for label, name, v in ev.rows():
            w.writerow([label, name, "" if np.isnan(v) else repr(float(v))])
        w.writerow(["", "miou", repr(ev.miou)])
        w.writerow(["", "fp", repr(ev.fp)])
        w.writerow(["", "fn", repr(ev.fn)])
        w.writerow(["", "best_threshold", "" if ev.best_threshold is None else repr(ev.best_threshold)])


def summary_text(ev):
    lines = [f"mIoU {ev.miou:.4f}  FP {ev.fp:.4f}  FN {ev.fn:.4f}"]
    if ev.best_threshold is not None:
        lines[0] += f"  best threshold {ev.best_threshold:.2f}"
    for _, name, v in ev.rows():
        lines.append(f"  {name:<12s} IoU {v:.4f}" if not np.isnan(v) else f"  {name:<12s} IoU n/a")
    return "\n".join(lines)

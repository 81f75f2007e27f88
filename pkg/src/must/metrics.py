"""Recognition metrics: AP/mAP, per-class F1, accuracy, transition stats.

All frame-level metrics pool frames across videos before scoring, so
videos contribute in proportion to their length. Transition counts and
durations are computed per video and then summed / averaged, since a
video boundary is not a phase transition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


def average_precision(scores, positives):
    """AP for one class: mean precision at the rank of each positive.

    Rows are ranked by descending score with ties broken by original
    index. Returns None when the class has no positive frames.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError(
            f"average_precision: scores {scores.shape} vs positives {positives.shape}"
        )
    npos = int(positives.sum())
    if npos == 0:
        return None
    # lexsort uses the last key as primary: descending score, then index
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = positives[order]
    ranks = np.nonzero(hits)[0] + 1
    cum = np.arange(1, npos + 1, dtype=np.float64)
    return float((cum / ranks).mean())


def mean_average_precision(probs, labels, num_classes):
    """Per-class AP over pooled frames plus their mean.

    Classes with no positive frames get None and are excluded from the
    mean; the mean itself is None if no class has positives.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"mAP: probs {probs.shape} vs labels {labels.shape}")
    per_class = [
        average_precision(probs[:, c], labels == c) for c in range(num_classes)
    ]
    defined = [ap for ap in per_class if ap is not None]
    return per_class, (float(np.mean(defined)) if defined else None)


def f1_scores(preds, labels, num_classes):
    """One-vs-rest F1 per class and the mean over classes present in labels.

    A class with zero precision and recall scores 0; classes absent from
    the labels still get a per-class value but do not enter the mean.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"f1: preds {preds.shape} vs labels {labels.shape}")
    per_class = np.zeros(num_classes, dtype=np.float64)
    present = []
    for c in range(num_classes):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall:
            per_class[c] = 2 * precision * recall / (precision + recall)
        if tp + fn:
            present.append(c)
    mean = float(per_class[present].mean()) if present else 0.0
    return per_class, mean


def accuracy(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"accuracy: preds {preds.shape} vs labels {labels.shape}")
    if preds.size == 0:
        raise ValueError("accuracy: empty inputs")
    return float((preds == labels).mean())


def transition_count(seq):
    """Number of adjacent label changes within one sequence."""
    seq = np.asarray(seq)
    if seq.size == 0:
        return 0
    return int((seq[1:] != seq[:-1]).sum())


def run_lengths(seq):
    """Run-length encode a label sequence into (label, start, length) rows."""
    seq = np.asarray(seq)
    if seq.size == 0:
        return []
    breaks = np.nonzero(seq[1:] != seq[:-1])[0] + 1
    starts = np.concatenate(([0], breaks))
    ends = np.concatenate((breaks, [seq.size]))
    return [(int(seq[s]), int(s), int(e - s)) for s, e in zip(starts, ends)]


def phase_durations(label_seqs, num_classes, fps=1.0):
    """Mean duration in seconds of each phase's runs, pooled over videos.

    Phases that never occur get None.
    """
    totals = np.zeros(num_classes, dtype=np.float64)
    counts = np.zeros(num_classes, dtype=np.int64)
    for seq in label_seqs:
        for label, _, length in run_lengths(seq):
            totals[label] += length / fps
            counts[label] += 1
    return [
        float(totals[c] / counts[c]) if counts[c] else None
        for c in range(num_classes)
    ]


@dataclass
class MetricsReport:
    num_videos: int
    num_frames: int
    accuracy: float
    mean_ap: float | None
    per_class_ap: list
    mean_f1: float
    per_class_f1: list
    pred_transitions: int
    true_transitions: int
    pred_mean_durations: list
    true_mean_durations: list

    def to_dict(self):
        return {
            "num_videos": self.num_videos,
            "num_frames": self.num_frames,
            "accuracy": self.accuracy,
            "mean_ap": self.mean_ap,
            "per_class_ap": self.per_class_ap,
            "mean_f1": self.mean_f1,
            "per_class_f1": self.per_class_f1,
            "pred_transitions": self.pred_transitions,
            "true_transitions": self.true_transitions,
            "pred_mean_durations": self.pred_mean_durations,
            "true_mean_durations": self.true_mean_durations,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self):
        def fmt(x):
            return "  n/a" if x is None else f"{x:.4f}"

        lines = [
            f"videos {self.num_videos}  frames {self.num_frames}",
            f"accuracy        {fmt(self.accuracy)}",
            f"mean AP         {fmt(self.mean_ap)}",
            f"mean F1         {fmt(self.mean_f1)}",
            f"transitions     pred {self.pred_transitions}  "
            f"true {self.true_transitions}",
            "phase    AP      F1      pred dur(s)  true dur(s)",
        ]
        for c in range(len(self.per_class_ap)):
            pd = self.pred_mean_durations[c]
            td = self.true_mean_durations[c]
            lines.append(
                f"{c:>5}  {fmt(self.per_class_ap[c])}  {fmt(self.per_class_f1[c])}"
                f"  {'n/a' if pd is None else f'{pd:11.2f}'}"
                f"  {'n/a' if td is None else f'{td:11.2f}'}"
            )
        return "\n".join(lines)


def evaluate_timelines(timelines, num_classes, fps=1.0):
    """Score a list of labeled prediction timelines into one report."""
    if not timelines:
        raise ValueError("evaluate_timelines: no timelines")
    for tl in timelines:
        if tl.labels is None:
            raise ValueError(f"timeline {tl.video_id!r} has no labels")
    probs = np.concatenate([tl.probs for tl in timelines])
    labels = np.concatenate([np.asarray(tl.labels) for tl in timelines])
    preds = np.concatenate([tl.predictions for tl in timelines])
    per_ap, mean_ap = mean_average_precision(probs, labels, num_classes)
    per_f1, mean_f1 = f1_scores(preds, labels, num_classes)
    pred_seqs = [tl.predictions for tl in timelines]
    true_seqs = [np.asarray(tl.labels) for tl in timelines]
    return MetricsReport(
        num_videos=len(timelines),
        num_frames=int(labels.size),
        accuracy=accuracy(preds, labels),
        mean_ap=mean_ap,
        per_class_ap=per_ap,
        mean_f1=mean_f1,
        per_class_f1=list(map(float, per_f1)),
        pred_transitions=sum(transition_count(s) for s in pred_seqs),
        true_transitions=sum(transition_count(s) for s in true_seqs),
        pred_mean_durations=phase_durations(pred_seqs, num_classes, fps),
        true_mean_durations=phase_durations(true_seqs, num_classes, fps),
    )

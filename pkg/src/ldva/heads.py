"""Task-specific predictors and losses on top of the part-probability code:
GZSL compatibility hinge with calibrated stacking, FSL cross-entropy and
nearest-class-mean classification, DA pseudo-label loss, and the seen/unseen
accuracy arithmetic (ts, tr, harmonic mean).

All argmax-style decisions break ties toward the lowest label, and
pseudo-labels are constants under differentiation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ldva import tensorcore as tc
from ldva.tensorcore import ShapeError, Tensor


# -- semantic vectors ---------------------------------------------------------


@dataclass
class SemanticTable:
    """Per-class semantic vectors, stored sorted by class label."""

    labels: np.ndarray   # (Y,) int64, strictly increasing
    vectors: np.ndarray  # (Y, S) float64

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.labels.ndim != 1 or self.vectors.ndim != 2 \
                or len(self.labels) != len(self.vectors):
            raise ValueError("semantic table needs one vector per label")
        order = np.argsort(self.labels)
        self.labels = self.labels[order]
        self.vectors = self.vectors[order]
        if len(np.unique(self.labels)) != len(self.labels):
            raise ValueError("duplicate class labels in semantic table")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row_of(self, label: int) -> int:
        idx = int(np.searchsorted(self.labels, label))
        if idx >= len(self.labels) or self.labels[idx] != label:
            raise ValueError(f"unknown class label {label}")
        return idx

    def rows_of(self, labels) -> np.ndarray:
        return np.array([self.row_of(int(y)) for y in np.asarray(labels).ravel()])

    def select(self, labels) -> "SemanticTable":
        rows = self.rows_of(sorted(labels))
        return SemanticTable(self.labels[rows], self.vectors[rows])

    def normalized(self) -> "SemanticTable":
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("cannot L2-normalize a zero semantic vector")
        return SemanticTable(self.labels.copy(), self.vectors / norms)


def load_semantics_csv(path) -> SemanticTable:
    """CSV rows: integer label, then the attribute values. Vectors are
    L2-normalized on load so margins are scale-meaningful."""
    labels, vectors = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            labels.append(int(row[0]))
            vectors.append([float(v) for v in row[1:]])
    return SemanticTable(np.array(labels), np.array(vectors)).normalized()


@dataclass(frozen=True)
class GzslSplit:
    """Disjoint seen/unseen label sets plus the stacking calibration constant."""

    seen: tuple
    unseen: tuple
    c_cs: float = 0.0

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ValueError("seen and unseen label sets overlap")
        if self.c_cs < 0:
            raise ValueError("calibration constant must be >= 0")


# -- predictor ----------------------------------------------------------------


@dataclass
class Predictor:
    """Two affine layers with a ReLU between them."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]


def init_predictor_params(params: tc.ParamSet, in_dim: int, hidden: int,
                          out_dim: int, rng: np.random.Generator) -> Predictor:
    pred = Predictor(
        w1=params.add("predictor.w1",
                      Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (hidden, in_dim))),
                      "predictor_V"),
        b1=params.add("predictor.b1", Tensor(np.zeros(hidden)), "predictor_V"),
        w2=params.add("predictor.w2",
                      Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), (out_dim, hidden))),
                      "predictor_V"),
        b2=params.add("predictor.b2", Tensor(np.zeros(out_dim)), "predictor_V"))
    return pred


def predictor_from_params(params: tc.ParamSet) -> Predictor:
    return Predictor(w1=params["predictor.w1"], b1=params["predictor.b1"],
                     w2=params["predictor.w2"], b2=params["predictor.b2"])


def predict(pi: Tensor, predictor: Predictor) -> Tensor:
    """Flattened codes (N, M*K) -> predictor outputs (N, out_dim)."""
    if pi.ndim != 2 or pi.shape[1] != predictor.in_dim:
        raise ShapeError(f"predict: pi {pi.shape} vs predictor input {predictor.in_dim}")
    hidden = tc.relu(tc.linear(pi, predictor.w1, predictor.b1))
    return tc.linear(hidden, predictor.w2, predictor.b2)


def predict_array(pi_data: np.ndarray, predictor: Predictor) -> np.ndarray:
    """Inference-only forward for classification paths (no tape)."""
    return predict(Tensor(pi_data), predictor).data


# -- GZSL -----------------------------------------------------------------------


def gzsl_hinge(v: Tensor, label_rows, sem_vectors: np.ndarray, eta: float) -> Tensor:
    """Structured hinge over seen classes, per sample:

        sum_{y' != y} [eta + sigma_{y'}^T v - sigma_y^T v]_+

    v: predictor outputs (N, S); label_rows: index of each sample's class in
    sem_vectors. Returns a length-N tensor.
    """
    sem = np.asarray(sem_vectors, dtype=np.float64)
    if v.ndim != 2 or sem.ndim != 2 or v.shape[1] != sem.shape[1]:
        raise ShapeError(f"gzsl_hinge: v {v.shape} vs semantics {sem.shape}")
    rows = np.asarray(label_rows, dtype=np.intp)
    n, n_classes = v.shape[0], sem.shape[0]
    if rows.shape != (n,) or np.any(rows < 0) or np.any(rows >= n_classes):
        raise ValueError("gzsl_hinge: label row out of range")
    scores = tc.matmul(v, Tensor(sem.T))                      # (N, Y_s)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), rows] = 1.0
    own = tc.tsum(tc.mul(scores, Tensor(onehot)), axis=1, keepdims=True)
    margins = tc.relu(scores - own + eta)
    return tc.tsum(tc.mul(margins, Tensor(1.0 - onehot)), axis=1)


def loss_gzsl(pi: Tensor, labels, table_seen: SemanticTable, eta: float,
              predictor: Predictor) -> Tensor:
    """Per-sample GZSL training loss; labels must be seen-class labels."""
    rows = table_seen.rows_of(labels)
    return gzsl_hinge(predict(pi, predictor), rows, table_seen.vectors, eta)


def compatibility_scores(pi_data: np.ndarray, predictor: Predictor,
                         table: SemanticTable) -> np.ndarray:
    """Score matrix sigma_y^T V(pi) for every class in the table; (N, Y)."""
    return predict_array(pi_data, predictor) @ table.vectors.T


def gzsl_classify(pi_data: np.ndarray, predictor: Predictor, table: SemanticTable,
                  split: GzslSplit) -> np.ndarray:
    """Calibrated-stacking argmax: seen-class scores are reduced by c_cs.
    Ties resolve to the lowest label."""
    scores = compatibility_scores(pi_data, predictor, table)
    seen_mask = np.isin(table.labels, np.asarray(split.seen, dtype=np.int64))
    calibrated = scores - split.c_cs * seen_mask
    return table.labels[np.argmax(calibrated, axis=1)]


def zsl_classify(pi_data: np.ndarray, predictor: Predictor,
                 table_unseen: SemanticTable) -> np.ndarray:
    """Argmax restricted to the unseen classes (conventional ZSL accuracy)."""
    scores = compatibility_scores(pi_data, predictor, table_unseen)
    return table_unseen.labels[np.argmax(scores, axis=1)]


# -- FSL --------------------------------------------------------------------------


def loss_fsl(pi: Tensor, labels, predictor: Predictor) -> Tensor:
    """Per-sample cross-entropy of the predictor logits against the labels."""
    return tc.cross_entropy(predict(pi, predictor), labels)


def fsl_prototypes(encodings: np.ndarray, labels, required=None) -> dict[int, np.ndarray]:
    """Mean flattened code per class over the support samples."""
    enc = np.asarray(encodings, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if enc.ndim != 2 or lab.shape != (enc.shape[0],):
        raise ShapeError(f"fsl_prototypes: encodings {enc.shape} vs labels {lab.shape}")
    prototypes = {int(y): enc[lab == y].mean(axis=0) for y in np.unique(lab)}
    if required is not None:
        missing = sorted(set(int(y) for y in required) - set(prototypes))
        if missing:
            raise ValueError(f"fsl_prototypes: no support samples for classes {missing}")
    return prototypes


def _prototype_matrix(prototypes: dict[int, np.ndarray]):
    if not prototypes:
        raise ValueError("fsl_classify: empty prototype set")
    labels = np.array(sorted(prototypes), dtype=np.int64)
    matrix = np.stack([prototypes[int(y)] for y in labels])
    return labels, matrix


def fsl_classify(code: np.ndarray, prototypes: dict[int, np.ndarray]) -> int:
    """Label of the squared-Euclidean-nearest prototype; ties -> lowest label."""
    labels, matrix = _prototype_matrix(prototypes)
    dists = ((matrix - np.asarray(code, dtype=np.float64)) ** 2).sum(axis=1)
    return int(labels[np.argmin(dists)])


def fsl_classify_batch(codes: np.ndarray, prototypes: dict[int, np.ndarray]) -> np.ndarray:
    labels, matrix = _prototype_matrix(prototypes)
    d = ((codes[:, None, :] - matrix[None, :, :]) ** 2).sum(axis=2)
    return labels[np.argmin(d, axis=1)]


# -- domain adaptation ---------------------------------------------------------------


def pseudo_label(logits: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties -> lowest index. Input is raw predictor
    output, not softmax (argmax is the same either way)."""
    return np.argmax(np.asarray(logits), axis=-1)


def loss_da(pi: Tensor, labels, is_source, predictor: Predictor) -> Tensor:
    """Per-sample adaptation loss: cross-entropy against the true label for
    source samples, against the model's own argmax for target samples. The
    pseudo-label is recomputed from the current forward pass and carries no
    gradient."""
    src = np.asarray(is_source, dtype=bool)
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != src.shape or pi.shape[0] != src.shape[0]:
        raise ShapeError("loss_da: pi/labels/is_source lengths differ")
    if np.any(src & (lab < 0)):
        raise ValueError("loss_da: source sample without a label")
    logits = predict(pi, predictor)
    targets = np.where(src, lab, pseudo_label(logits.data))
    return tc.cross_entropy(logits, targets)


# -- metrics ---------------------------------------------------------------------------


def harmonic_mean(ts: float, tr: float) -> float:
    """H = 2*ts*tr / (ts + tr)."""
    if ts < 0 or tr < 0:
        raise ValueError("harmonic_mean: accuracies must be >= 0")
    if ts == 0 and tr == 0:
        raise ValueError("harmonic_mean: ts and tr cannot both be 0")
    return 2.0 * ts * tr / (ts + tr)


def class_averaged_accuracy(predicted, true, classes):
    """Mean over classes of per-class top-1 accuracy.

    Classes with no test samples are excluded from the average and returned
    so callers can report them. Returns (accuracy, per_class, skipped).
    """
    pred = np.asarray(predicted)
    lab = np.asarray(true)
    per_class: dict[int, float] = {}
    skipped: list[int] = []
    for y in sorted(int(c) for c in classes):
        mask = lab == y
        if not mask.any():
            skipped.append(y)
            continue
        per_class[y] = float((pred[mask] == y).mean())
    if not per_class:
        return 0.0, per_class, skipped
    return float(np.mean(list(per_class.values()))), per_class, skipped


@dataclass
class CalibrationResult:
    c_cs: float
    ts: float
    tr: float
    h: float


def _safe_h(ts: float, tr: float) -> float:
    return 0.0 if ts + tr == 0 else harmonic_mean(ts, tr)


def gzsl_metrics(scores: np.ndarray, true_labels, table: SemanticTable,
                 split: GzslSplit, c_cs: float):
    """(ts, tr, H) at a fixed calibration constant, from a precomputed score
    matrix aligned with table.labels."""
    seen_mask = np.isin(table.labels, np.asarray(split.seen, dtype=np.int64))
    predicted = table.labels[np.argmax(scores - c_cs * seen_mask, axis=1)]
    lab = np.asarray(true_labels)
    ts, _, _ = class_averaged_accuracy(predicted, lab, split.unseen)
    tr, _, _ = class_averaged_accuracy(predicted, lab, split.seen)
    return ts, tr, _safe_h(ts, tr)


def sweep_calibration(scores: np.ndarray, true_labels, table: SemanticTable,
                      split: GzslSplit, steps: int = 51) -> CalibrationResult:
    """Grid-search c_cs over [0, max score] maximizing H on the given samples.
    The grid includes 0, so the selected H is never below the uncalibrated H;
    ties keep the smallest constant."""
    top = max(0.0, float(np.max(scores)))
    best = None
    for c in np.linspace(0.0, top, steps):
        ts, tr, h = gzsl_metrics(scores, true_labels, table, split, float(c))
        if best is None or h > best.h:
            best = CalibrationResult(c_cs=float(c), ts=ts, tr=tr, h=h)
    return best

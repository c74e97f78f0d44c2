"""Inference modes, ranking and classification metrics, and the bias audit.

Every inference mode is a pure function of the three pathway scores, so one
trained model supports the whole ablation table:

  deci            sigmoid(sigmoid(z_k+z_d+z_e) - sigmoid(z_d+z_e))
  naive           sigmoid(z_k+z_d+z_e)
  knowledge-only  sigmoid(z_k)
  wo-zd           sigmoid(sigmoid(z_k+z_d+z_e) - sigmoid(z_e))
  wo-ze           sigmoid(sigmoid(z_k+z_d+z_e) - sigmoid(z_d))

The two ablations keep the full additive score and drop one term from the
subtrahend only, so each reduces to deci exactly when its dropped pathway
score is zero, and each re-admits exactly one bias source at the 0.5
decision threshold.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import model as M
from .corpus import LabelSpace, Vocabulary, confound_predicate
from .errors import DimensionError, EvaluationError
from .numerics import sigmoid


class InferenceMode(Enum):
    DECI = "deci"
    NAIVE = "naive"
    KNOWLEDGE_ONLY = "knowledge-only"
    WO_ZD = "wo-zd"
    WO_ZE = "wo-ze"


def final_scores_from_z(z_k, z_d, z_e, mode: InferenceMode) -> np.ndarray:
    """Per-label prediction scores in [0, 1] under the given mode."""
    z_k = np.asarray(z_k, dtype=np.float64)
    z_d = np.asarray(z_d, dtype=np.float64)
    z_e = np.asarray(z_e, dtype=np.float64)
    if mode is InferenceMode.DECI:
        return sigmoid(sigmoid(z_k + z_d + z_e) - sigmoid(z_d + z_e))
    if mode is InferenceMode.NAIVE:
        return sigmoid(z_k + z_d + z_e)
    if mode is InferenceMode.KNOWLEDGE_ONLY:
        return sigmoid(z_k)
    if mode is InferenceMode.WO_ZD:
        return sigmoid(sigmoid(z_k + z_d + z_e) - sigmoid(z_e))
    if mode is InferenceMode.WO_ZE:
        return sigmoid(sigmoid(z_k + z_d + z_e) - sigmoid(z_d))
    raise ValueError(f"unknown inference mode {mode!r}")


def final_scores(scores: M.PathwayScores, mode: InferenceMode) -> np.ndarray:
    return final_scores_from_z(scores.z_k, scores.z_d, scores.z_e, mode)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float | None:
    """Probability a positive outranks a negative, ties counted half.

    Computed from average ranks (the Mann-Whitney statistic). Returns None
    when either class is absent, leaving the caller to skip or fail.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"scores/labels length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1.0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2.0 * tp + fp + fn
    return 0.0 if denom == 0.0 else 2.0 * tp / denom


def f1_scores(pred, gold):
    """(macro, micro, per-label F1) for binary matrices of shape (docs, labels).

    Micro pools TP/FP/FN across all cells. Macro averages per-label F1 over
    every label, counting a label with no gold positives and no predictions
    as 0 rather than skipping it.
    """
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    if pred.shape != gold.shape or pred.ndim != 2:
        raise DimensionError(f"pred/gold must be matching 2-D matrices, got {pred.shape} and {gold.shape}")
    tp = (pred & gold).sum(axis=0).astype(np.float64)
    fp = (pred & ~gold).sum(axis=0).astype(np.float64)
    fn = (~pred & gold).sum(axis=0).astype(np.float64)
    per_label = np.array([_f1(tp[i], fp[i], fn[i]) for i in range(pred.shape[1])])
    macro = float(per_label.mean()) if per_label.size else 0.0
    micro = _f1(tp.sum(), fp.sum(), fn.sum())
    return macro, micro, per_label


def precision_at_k(scores, gold, k: int) -> float:
    """Mean over documents of the gold fraction among the k top-scored labels.

    Ties are broken toward the lower label index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gold = np.asarray(gold, dtype=bool)
    if scores.shape != gold.shape or scores.ndim != 2:
        raise DimensionError(f"scores/gold must be matching 2-D matrices, got {scores.shape} and {gold.shape}")
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k must be in [1, {scores.shape[1]}], got {k}")
    hits = 0.0
    for d in range(scores.shape[0]):
        top = np.argsort(-scores[d], kind="stable")[:k]
        hits += float(gold[d, top].sum())
    return hits / (scores.shape[0] * k)


@dataclass
class Disparity:
    """False-positive rates on one label for documents satisfying the
    confound attribute (group A) versus the rest (group B)."""

    label: str
    group_a_fpr: float | None
    group_b_fpr: float | None
    gap: float | None

    def to_dict(self) -> dict:
        return {"label": self.label, "group_a_fpr": self.group_a_fpr,
                "group_b_fpr": self.group_b_fpr, "gap": self.gap}


def _fpr(pred: np.ndarray, gold: np.ndarray) -> float | None:
    negatives = ~gold
    n_neg = int(negatives.sum())
    if n_neg == 0:
        return None
    return float((pred & negatives).sum() / n_neg)


def _disparity(pred_col, gold_col, in_group_a, label) -> Disparity:
    fpr_a = _fpr(pred_col[in_group_a], gold_col[in_group_a])
    fpr_b = _fpr(pred_col[~in_group_a], gold_col[~in_group_a])
    gap = None if fpr_a is None or fpr_b is None else abs(fpr_a - fpr_b)
    return Disparity(label=label, group_a_fpr=fpr_a, group_b_fpr=fpr_b, gap=gap)


@dataclass
class EvalReport:
    mode: str
    n_docs: int
    macro_auc: float
    micro_auc: float
    macro_f1: float
    micro_f1: float
    p_at_k: dict[int, float]
    per_label_f1: list[float]
    auc_skipped_labels: list[str]
    disparity: Disparity | None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_docs": self.n_docs,
            "macro_auc": self.macro_auc,
            "micro_auc": self.micro_auc,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "p_at_k": {str(k): v for k, v in sorted(self.p_at_k.items())},
            "per_label_f1": self.per_label_f1,
            "auc_skipped_labels": self.auc_skipped_labels,
            "disparity": None if self.disparity is None else self.disparity.to_dict(),
        }


def _report(scores, gold, label_space, mode, ks, docs, confounded_label, attribute) -> EvalReport:
    pred = scores >= 0.5
    per_label_auc = []
    skipped = []
    for li, label in enumerate(label_space):
        auc = roc_auc(scores[:, li], gold[:, li])
        if auc is None:
            skipped.append(label)
        else:
            per_label_auc.append(auc)
    if not per_label_auc:
        raise EvaluationError("every label is degenerate: AUC undefined for all of them")
    micro_auc = roc_auc(scores.ravel(), gold.ravel())
    macro_f1, micro_f1, per_label_f1 = f1_scores(pred, gold)
    disparity = None
    if confounded_label is not None:
        predicate = confound_predicate(attribute)
        in_a = np.array([predicate(d.age, d.gender) for d in docs], dtype=bool)
        li = label_space.index(confounded_label)
        disparity = _disparity(pred[:, li], gold[:, li].astype(bool), in_a, confounded_label)
    return EvalReport(
        mode=mode.value,
        n_docs=int(scores.shape[0]),
        macro_auc=float(np.mean(per_label_auc)),
        micro_auc=micro_auc,
        macro_f1=macro_f1,
        micro_f1=micro_f1,
        p_at_k={k: precision_at_k(scores, gold, k) for k in ks},
        per_label_f1=[float(v) for v in per_label_f1],
        auc_skipped_labels=skipped,
        disparity=disparity,
    )


def evaluate(docs, params: M.ModelParams, vocab: Vocabulary, label_space: LabelSpace,
             mode: InferenceMode = InferenceMode.DECI, ks: tuple[int, ...] = (5,),
             max_len: int = M.DEFAULT_MAX_LEN, confounded_label: str | None = None,
             confound_attribute: str = "age>=65") -> EvalReport:
    """Score docs under one mode and assemble the full report.

    Labels with a single class in the gold data are skipped by macro AUC and
    listed in the report; micro AUC pools every (document, label) cell. With
    a confounded_label, the report also carries the FPR disparity for this
    mode. Results do not depend on document order.
    """
    if not docs:
        raise EvaluationError("cannot evaluate an empty document collection")
    z_k, z_d, z_e = M.pathway_scores_batch(params, docs, vocab, max_len)
    gold = np.stack([label_space.multi_hot(d.codes) for d in docs])
    scores = final_scores_from_z(z_k, z_d, z_e, mode)
    return _report(scores, gold, label_space, mode, ks, docs, confounded_label, confound_attribute)


def run_ablation(docs, params: M.ModelParams, vocab: Vocabulary, label_space: LabelSpace,
                 ks: tuple[int, ...] = (5,), max_len: int = M.DEFAULT_MAX_LEN,
                 confounded_label: str | None = None,
                 confound_attribute: str = "age>=65") -> dict[str, EvalReport]:
    """One report per inference mode, from a single forward pass."""
    if not docs:
        raise EvaluationError("cannot evaluate an empty document collection")
    z_k, z_d, z_e = M.pathway_scores_batch(params, docs, vocab, max_len)
    gold = np.stack([label_space.multi_hot(d.codes) for d in docs])
    out = {}
    for mode in InferenceMode:
        scores = final_scores_from_z(z_k, z_d, z_e, mode)
        out[mode.value] = _report(scores, gold, label_space, mode, ks, docs,
                                  confounded_label, confound_attribute)
    return out


@dataclass
class BiasAudit:
    label: str
    deci: Disparity
    naive: Disparity

    def to_dict(self) -> dict:
        return {"label": self.label, "deci": self.deci.to_dict(), "naive": self.naive.to_dict()}


def bias_audit(docs, params: M.ModelParams, vocab: Vocabulary, label_space: LabelSpace,
               confounded_label: str, confound_attribute: str = "age>=65",
               max_len: int = M.DEFAULT_MAX_LEN) -> BiasAudit:
    """FPR disparity on the confounded label under debiased vs naive scoring."""
    if not docs:
        raise EvaluationError("cannot audit an empty document collection")
    z_k, z_d, z_e = M.pathway_scores_batch(params, docs, vocab, max_len)
    li = label_space.index(confounded_label)
    gold = np.array([confounded_label in d.codes for d in docs], dtype=bool)
    predicate = confound_predicate(confound_attribute)
    in_a = np.array([predicate(d.age, d.gender) for d in docs], dtype=bool)
    audits = {}
    for mode in (InferenceMode.DECI, InferenceMode.NAIVE):
        pred = final_scores_from_z(z_k, z_d, z_e, mode)[:, li] >= 0.5
        audits[mode.value] = _disparity(pred, gold, in_a, confounded_label)
    return BiasAudit(label=confounded_label, deci=audits["deci"], naive=audits["naive"])

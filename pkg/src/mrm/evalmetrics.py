"""Ranking metrics, the training loop with early stopping, and baselines."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import model as mrm_model
from .events import frequency_vector

log = logging.getLogger("mrm.train")


class TrainingDiverged(RuntimeError):
    """The optimizer hit a non-finite loss or gradient."""


def auc(scores, labels) -> float:
    """Pairwise ranking statistic: the fraction of (positive, negative)
    pairs the scores order correctly, ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n = s.size
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"auc needs both classes, got {n_pos} positive / "
                         f"{n_neg} negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < n:  # average ranks across tied scores
        j = i
        while j + 1 < n and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """Mean, over positives in descending-score order, of the precision at
    each positive's rank. Ties are broken by original index (stable), so
    the value is deterministic on tied scores."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if not (y == 1).any():
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    y_sorted = (y[order] == 1)
    precision_at = np.cumsum(y_sorted) / np.arange(1, s.size + 1)
    return float(precision_at[y_sorted].mean())


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("lr, batch_size and max_epochs must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not (0 <= self.patience < self.max_epochs):
            raise ValueError(f"need 0 <= patience < max_epochs, got "
                             f"patience={self.patience} max_epochs={self.max_epochs}")


@dataclass
class EvalReport:
    """Test-split metrics of the selected model plus the training trace."""

    auc: float
    ap: float
    n_pos: int
    n_neg: int
    train_auc: float
    train_ap: float
    valid_auc: float
    best_epoch: int
    loss_trace: list = field(default_factory=list)  # (epoch, train_loss, valid_auc)


def score_sequences(kind: str, params, seqs, config, partitions=None) -> np.ndarray:
    """Forward probabilities for a list of sequences, no graph kept."""
    scores = np.empty(len(seqs))
    with dc.no_grad():
        for i, seq in enumerate(seqs):
            if kind == "mrm":
                part = partitions[i] if partitions is not None else None
                scores[i] = mrm_model.forward(seq, params, config, partition=part)[0].item()
            else:
                scores[i] = mrm_model.plain_lstm_forward(seq, params, config).item()
    return scores


def _labels(seqs) -> np.ndarray:
    return np.array([s.label for s in seqs], dtype=np.intp)


def _fit(named_params, batch_loss_fn, scorer, n_train, train_config):
    """Shared early-stopping loop.

    batch_loss_fn(indices) builds the mean-loss graph for a batch;
    scorer(split) returns scores for "train"/"valid"/"test". Keeps the
    best validation-AUC parameters and restores them before returning.
    """
    state = dc.AdamState(lr=train_config.lr)
    rng = np.random.default_rng(train_config.seed)
    trace = []
    best_auc = -np.inf
    best_epoch = 0
    best_arrays = {name: t.data.copy() for name, t in named_params.items()}
    bad_epochs = 0
    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for batch_id, start in enumerate(range(0, n_train, train_config.batch_size)):
            batch = order[start:start + train_config.batch_size]
            total = batch_loss_fn(batch)
            if not np.isfinite(total.data):
                raise TrainingDiverged(
                    f"non-finite loss in epoch {epoch}, batch {batch_id}")
            for t in named_params.values():
                t.zero_grad()
            total.backward()
            grads = {name: t.grad for name, t in named_params.items()
                     if t.grad is not None}
            dc.clip_gradients(grads, train_config.clip_norm)
            try:
                dc.adam_step(named_params, grads, state)
            except FloatingPointError as err:
                raise TrainingDiverged(
                    f"epoch {epoch}, batch {batch_id}: {err}") from None
            epoch_loss += float(total.data) * len(batch)
        train_loss = epoch_loss / n_train
        valid_auc = scorer("valid")
        trace.append((epoch, train_loss, valid_auc))
        log.info("epoch %d: train_loss=%.4f valid_auc=%.4f", epoch, train_loss,
                 valid_auc)
        if valid_auc > best_auc:
            best_auc = valid_auc
            best_epoch = epoch
            best_arrays = {name: t.data.copy() for name, t in named_params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > train_config.patience:
                log.info("early stop after epoch %d (best epoch %d)", epoch,
                         best_epoch)
                break
    for name, t in named_params.items():
        t.data = best_arrays[name]
    return trace, best_auc, best_epoch


def _report(scorer, labels_by_split, trace, best_auc, best_epoch) -> EvalReport:
    test_scores = scorer("test")
    train_scores = scorer("train")
    y_test = labels_by_split["test"]
    return EvalReport(
        auc=auc(test_scores, y_test),
        ap=average_precision(test_scores, y_test),
        n_pos=int((y_test == 1).sum()),
        n_neg=int((y_test == 0).sum()),
        train_auc=auc(train_scores, labels_by_split["train"]),
        train_ap=average_precision(train_scores, labels_by_split["train"]),
        valid_auc=best_auc,
        best_epoch=best_epoch,
        loss_trace=trace,
    )


def train(model_kind: str, datasets, train_config: TrainConfig,
          model_config: mrm_model.MrmConfig):
    """Train an "mrm" or "plain_lstm" model on (train, valid, test) splits.

    Adam on the mean cross entropy of shuffled mini-batches; after each
    epoch the validation AUC decides early stopping and model selection.
    Test data is only touched after selection finishes. Returns
    (params, EvalReport).
    """
    if model_kind not in ("mrm", "plain_lstm"):
        raise ValueError(f"unknown model kind {model_kind!r}")
    train_seqs, valid_seqs, test_seqs = datasets
    if not train_seqs or not valid_seqs or not test_seqs:
        raise ValueError("all three splits must be non-empty")
    params = mrm_model.MrmParams.init(model_config, seed=train_config.seed,
                                      kind=model_kind)
    named = params.named()

    partitions = {"train": None, "valid": None, "test": None}
    if model_kind == "mrm":
        # times never change, so the per-sequence partition is computed once
        partitions = {
            "train": [mrm_model.sequence_partition(s, model_config) for s in train_seqs],
            "valid": [mrm_model.sequence_partition(s, model_config) for s in valid_seqs],
            "test": [mrm_model.sequence_partition(s, model_config) for s in test_seqs],
        }
    splits = {"train": train_seqs, "valid": valid_seqs, "test": test_seqs}
    labels_by_split = {k: _labels(v) for k, v in splits.items()}

    def batch_loss(indices):
        total = None
        for i in indices:
            seq = train_seqs[i]
            if model_kind == "mrm":
                y_hat, _ = mrm_model.forward(seq, params, model_config,
                                             partition=partitions["train"][i])
            else:
                y_hat = mrm_model.plain_lstm_forward(seq, params, model_config)
            term = mrm_model.loss(y_hat, seq.label)
            total = term if total is None else dc.add(total, term)
        return dc.scale(total, 1.0 / len(indices))

    def scorer(split):
        scores = score_sequences(model_kind, params, splits[split], model_config,
                                 partitions[split])
        if split == "valid":
            return auc(scores, labels_by_split["valid"])
        return scores

    trace, best_auc, best_epoch = _fit(named, batch_loss, scorer,
                                       len(train_seqs), train_config)
    return params, _report(scorer, labels_by_split, trace, best_auc, best_epoch)


def lr_scores(weights: np.ndarray, bias: float, fv_matrix: np.ndarray) -> np.ndarray:
    z = fv_matrix @ weights + bias
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def train_lr_baseline(datasets, l2: float, train_config: TrainConfig,
                      n_codes: int):
    """Logistic regression on per-code frequency vectors with an L2
    penalty, trained with the same optimizer machinery and early-stopping
    protocol. Returns ({"weight", "bias"} params, EvalReport)."""
    train_seqs, valid_seqs, test_seqs = datasets
    if not train_seqs or not valid_seqs or not test_seqs:
        raise ValueError("all three splits must be non-empty")
    splits = {"train": train_seqs, "valid": valid_seqs, "test": test_seqs}
    fv = {k: np.stack([frequency_vector(s, n_codes) for s in v])
          for k, v in splits.items()}
    labels_by_split = {k: _labels(v) for k, v in splits.items()}

    weight = dc.Tensor(np.zeros(n_codes), requires_grad=True)
    bias = dc.Tensor(0.0, requires_grad=True)
    named = {"weight": weight, "bias": bias}
    y_train = labels_by_split["train"].astype(np.float64)

    def batch_loss(indices):
        xb = dc.Tensor(fv["train"][indices])
        yb = dc.Tensor(y_train[indices])
        ones = dc.Tensor(np.ones(len(indices)))
        p = dc.clip(dc.sigmoid(dc.add(dc.matmul(xb, weight), bias)),
                    1e-7, 1.0 - 1e-7)
        ce = dc.neg(dc.add(dc.mul(yb, dc.log(p)),
                           dc.mul(dc.sub(ones, yb), dc.log(dc.sub(ones, p)))))
        mean = dc.scale(dc.sum_all(ce), 1.0 / len(indices))
        if l2 > 0:
            mean = dc.add(mean, dc.scale(dc.sum_all(dc.mul(weight, weight)), l2))
        return mean

    def scorer(split):
        scores = lr_scores(weight.data, bias.item(), fv[split])
        if split == "valid":
            return auc(scores, labels_by_split["valid"])
        return scores

    trace, best_auc, best_epoch = _fit(named, batch_loss, scorer,
                                       len(train_seqs), train_config)
    return named, _report(scorer, labels_by_split, trace, best_auc, best_epoch)


# ---------------------------------------------------------------------------
# report files


def write_report(path, report: EvalReport, extra: dict | None = None):
    """Flat key-value serialization (floats via repr for exactness)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"test_auc = {report.auc!r}\n")
        fh.write(f"test_ap = {report.ap!r}\n")
        fh.write(f"n_pos = {report.n_pos}\n")
        fh.write(f"n_neg = {report.n_neg}\n")
        fh.write(f"train_auc = {report.train_auc!r}\n")
        fh.write(f"train_ap = {report.train_ap!r}\n")
        fh.write(f"valid_auc = {report.valid_auc!r}\n")
        fh.write(f"best_epoch = {report.best_epoch}\n")
        for key, value in (extra or {}).items():
            fh.write(f"{key} = {value}\n")


def write_trace_csv(path, report: EvalReport):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,valid_auc\n")
        for epoch, train_loss, valid_auc in report.loss_trace:
            fh.write(f"{epoch},{train_loss!r},{valid_auc!r}\n")

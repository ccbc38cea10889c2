"""Downstream evaluation: metrics, classifier fine-tuning, the leave-one-patient-out
protocol and 2-D embedding export."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.neighbors import NearestNeighbors
from sklearn.utils.validation import check_array, check_is_fitted

from .contrastive import ContrastiveConfig, ImageEncoder, LogCountEncoder, build_image_encoder, train_contrastive
from .dataio import UNLABELED, FoldView, SpotDataset, fold_views
from .gene_encoder import GeneEncoderConfig, ScviEncoder, subsample_labels, train_gene_encoder
from .tensor import AdamW, Linear, RngStreams, Tape, Tensor
from .tensor import autograd as ag
from .tensor.autograd import NonFiniteError

logger = logging.getLogger(__name__)

SOURCES = ("image", "gene", "latent")
METHODS = ("ours-scvi", "ours-scanvi", "clip", "none")


# metrics ------------------------------------------------------------------------


def _check_pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("cannot score an empty set")
    return preds, labels


def confusion_matrix(preds, labels, n_classes: int | None = None) -> np.ndarray:
    """M[i, j] = number of spots with true class i predicted as j."""
    preds, labels = _check_pair(preds, labels)
    C = n_classes if n_classes is not None else int(max(preds.max(), labels.max())) + 1
    if labels.min() < 0 or labels.max() >= C or preds.min() < 0 or preds.max() >= C:
        raise ValueError(f"classes must lie in [0, {C})")
    M = np.zeros((C, C), dtype=np.int64)
    np.add.at(M, (labels, preds), 1)
    return M


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(np.mean(preds == labels))


def per_class_f1(preds, labels, n_classes: int | None = None) -> np.ndarray:
    """F1 per class; 0 where precision + recall is 0."""
    M = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(M).astype(np.float64)
    denom = M.sum(axis=0) + M.sum(axis=1)  # 2TP + FP + FN
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(preds, labels, n_classes: int | None = None) -> float:
    """Unweighted mean F1 over the classes that occur in ``labels``."""
    preds, labels = _check_pair(preds, labels)
    f1 = per_class_f1(preds, labels, n_classes)
    return float(f1[np.unique(labels)].mean())


# embeddings -----------------------------------------------------------------------


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray
    spot_ids: list[str]
    batch_ids: np.ndarray
    labels: np.ndarray
    source: str

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.batch_ids = np.asarray(self.batch_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.spot_ids = [str(s) for s in self.spot_ids]
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-D array")
        n = len(self.embeddings)
        if not len(self.spot_ids) == len(self.batch_ids) == len(self.labels) == n:
            raise ValueError("embeddings, spot_ids, batch_ids and labels must have equal lengths")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite values")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")

    @classmethod
    def from_dataset(cls, ds: SpotDataset, embeddings, source: str) -> EmbeddingSet:
        return cls(embeddings, ds.spot_ids, ds.batch_ids, ds.labels, source)


def _neighbors(X: np.ndarray, k: int) -> np.ndarray:
    if not 0 < k < len(X):
        raise ValueError(f"k must satisfy 0 < k < N (k={k}, N={len(X)})")
    nn = NearestNeighbors(n_neighbors=k + 1).fit(X)
    _, idx = nn.kneighbors(X)
    # drop self; with exact duplicates self may not come first, so remove by identity
    out = np.empty((len(X), k), dtype=np.int64)
    for i, row in enumerate(idx):
        row = row[row != i]
        out[i] = row[:k]
    return out


def mixing_entropy(counts, n_batches: int) -> float:
    """Shannon entropy of neighbour batch proportions, divided by ln(n_batches)."""
    p = np.asarray(counts, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum() / math.log(n_batches))


def knn_batch_mixing(emb: EmbeddingSet, k: int = 15) -> float:
    """Mean normalised entropy of batch labels among each point's k nearest neighbours."""
    batches = np.unique(emb.batch_ids)
    if len(batches) < 2:
        raise ValueError("batch mixing needs at least two batches")
    code = np.searchsorted(batches, emb.batch_ids)
    nbr = _neighbors(emb.embeddings, k)
    scores = [mixing_entropy(np.bincount(code[row], minlength=len(batches)), len(batches)) for row in nbr]
    return float(np.mean(scores))


def knn_class_accuracy(emb: EmbeddingSet, k: int = 15) -> float:
    """Leave-one-out k-NN majority vote over labeled points (lowest class wins ties)."""
    mask = emb.labels != UNLABELED
    X, y = emb.embeddings[mask], emb.labels[mask]
    nbr = _neighbors(X, k)
    votes = np.array([np.argmax(np.bincount(y[row], minlength=y.max() + 1)) for row in nbr])
    return float(np.mean(votes == y))


def pca_embedding(X, n_components: int) -> np.ndarray:
    """Centered PCA scores with each component's largest-magnitude loading made positive."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    V = Vt[:n_components].T
    pivots = V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])]
    V = V * np.where(pivots < 0, -1.0, 1.0)
    return Xc @ V


def log_count_pca(ds: SpotDataset, n_components: int = 30) -> np.ndarray:
    return pca_embedding(np.log1p(ds.counts), n_components)


def export_embeddings(emb: EmbeddingSet, path: str | os.PathLike | None = None, header: str | None = None) -> str:
    """Project to two principal components and write tab-separated rows.

    Returns the text; writes it to ``path`` when given.
    """
    if emb.embeddings.shape[1] < 2:
        raise ValueError("need at least two embedding dimensions")
    pcs = pca_embedding(emb.embeddings, 2)
    buf = io.StringIO()
    if header:
        for line in header.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["spot_id", "pc1", "pc2", "batch", "label", "source"])
    for sid, (p1, p2), b, lab in zip(emb.spot_ids, pcs, emb.batch_ids, emb.labels):
        w.writerow([sid, repr(float(p1)), repr(float(p2)), int(b), int(lab), emb.source])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# fine-tuning ----------------------------------------------------------------------


class FineTunedClassifier(ClassifierMixin, BaseEstimator):
    """Linear head on top of an image encoder, trained with cross-entropy.

    ``encoder`` is copied before training, so the caller's object is never
    modified. With ``mode="head"`` only the head is updated.
    """

    def __init__(self, encoder=None, n_classes=None, mode="full", lr=1e-3, epochs=20, batch_size=64,
                 weight_decay=1e-2, seed=0):
        self.encoder = encoder
        self.n_classes = n_classes
        self.mode = mode
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def _logits(self, x: np.ndarray, train: bool) -> Tensor:
        self.encoder_.train(train and self.mode == "full")
        h = self.encoder_(Tensor(x))
        if self.mode == "head":
            h = h.detach()
        return self.head_(h)

    def fit(self, X, y):
        if len(X) == 0:
            raise ValueError("no labeled samples to fine-tune on")
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        if self.mode not in ("full", "head"):
            raise ValueError("mode must be 'full' or 'head'")
        if self.encoder is None:
            raise ValueError("FineTunedClassifier needs an image encoder")
        C = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        if y.min() < 0 or y.max() >= C:
            raise ValueError(f"labels must lie in [0, {C})")
        streams = RngStreams(self.seed)
        self.encoder_ = copy.deepcopy(self.encoder)
        self.head_ = Linear(self.encoder_.cfg.output_dim, C, streams["head-init"])
        params = list(self.head_.parameters())
        if self.mode == "full":
            params = list(self.encoder_.parameters()) + params
        opt = AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        order_rng = streams["finetune-data"]
        self.losses_ = []
        for _ in range(self.epochs):
            order = order_rng.permutation(len(X))
            for i in range(0, len(X), self.batch_size):
                idx = order[i : i + self.batch_size]
                opt.zero_grad()
                with Tape() as tape:
                    logp = ag.log_softmax(self._logits(X[idx], True), axis=1)
                    loss = -ag.getitem(logp, (np.arange(len(idx)), y[idx])).mean()
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("non-finite fine-tuning loss")
                tape.backward(loss)
                opt.step()
                self.losses_.append(loss.item())
        self.encoder_.eval()
        self.classes_ = np.arange(C)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        logits = self._logits(check_array(X, dtype=np.float64), False)
        return np.exp(ag.log_softmax(logits, axis=1).data)

    def predict(self, X):
        # np.argmax returns the first maximum, i.e. the lowest class index
        return np.argmax(self.predict_proba(X), axis=1)


def finetune_classify(encoder: ImageEncoder, X, y, n_classes: int, mode: str = "full", lr: float = 1e-3,
                      epochs: int = 20, batch_size: int = 64, seed: int = 0) -> FineTunedClassifier:
    return FineTunedClassifier(encoder, n_classes, mode, lr, epochs, batch_size, seed=seed).fit(X, y)


# leave-one-patient-out ------------------------------------------------------------


@dataclass
class EvalConfig:
    k: int = 15
    finetune_mode: str = "full"
    finetune_lr: float = 1e-3
    finetune_epochs: int = 20
    finetune_batch_size: int = 64
    finetune_label_fraction: float = 1.0
    n_seeds: int = 10
    methods: list[str] = field(default_factory=lambda: ["ours-scvi"])

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.finetune_mode not in ("full", "head"):
            raise ValueError("finetune_mode must be 'full' or 'head'")
        if not 0.0 < self.finetune_label_fraction <= 1.0:
            raise ValueError("finetune_label_fraction must lie in (0, 1]")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")


@dataclass
class FoldResult:
    fold: int
    seed: int
    method: str
    loss_kind: str
    accuracy: float
    macro_f1: float
    per_class_f1: np.ndarray
    confusion: np.ndarray
    batch_mixing: float

    def __post_init__(self):
        total = self.confusion.sum()
        if total and self.accuracy != np.trace(self.confusion) / total:
            raise ValueError("accuracy disagrees with the confusion matrix")

    def row(self) -> tuple:
        return (self.fold, self.seed, self.method, self.loss_kind, self.accuracy, self.macro_f1, self.batch_mixing)

    def equals(self, other: FoldResult) -> bool:
        return (
            self.row() == other.row()
            and np.array_equal(self.per_class_f1, other.per_class_f1)
            and np.array_equal(self.confusion, other.confusion)
        )


class _FrozenGene:
    """Posterior interface over a trained gene model."""

    def __init__(self, model):
        self._est = ScviEncoder.from_model(model)

    def posterior(self, g):
        return self._est.posterior(g)


def evaluate_fold(
    fold: FoldView,
    method: str,
    seed: int,
    gene_cfg: GeneEncoderConfig,
    con_cfg: ContrastiveConfig,
    eval_cfg: EvalConfig,
    gene_cache: dict | None = None,
) -> FoldResult:
    """Train every stage without held-out labels, then score the held-out batch."""
    blind = fold.label_blind()
    held_out = int(blind.batch_ids[fold.test_ids[0]])
    con_cfg = replace(con_cfg, seed=seed)
    loss_kind = con_cfg.loss_kind if method != "none" else "-"
    if method in ("ours-scvi", "ours-scanvi"):
        kind = method.split("-")[1]
        key = (held_out, seed, kind)
        if gene_cache is not None and key in gene_cache:
            model = gene_cache[key]
        else:
            model, _ = train_gene_encoder(blind, replace(gene_cfg, kind=kind, seed=seed))
            if gene_cache is not None:
                gene_cache[key] = model
        source = _FrozenGene(model)
    elif method == "clip":
        source = LogCountEncoder()
    else:
        source = None

    if source is not None:
        con_model, _ = train_contrastive(blind.image_features, blind.counts, source, con_cfg)
        encoder = con_model.image_encoder
    else:
        encoder = build_image_encoder(blind.image_dim, con_cfg, RngStreams(seed))
    return score_fold(fold, encoder, method, loss_kind, seed, eval_cfg)


def score_fold(
    fold: FoldView, encoder: ImageEncoder, method: str, loss_kind: str, seed: int, eval_cfg: EvalConfig
) -> FoldResult:
    """Fine-tune ``encoder`` on training-batch labels and score the held-out batch."""
    blind = fold.label_blind()
    held_out = int(blind.batch_ids[fold.test_ids[0]])
    train_labels = subsample_labels(
        blind.labels[fold.train_ids], eval_cfg.finetune_label_fraction, RngStreams(seed)["finetune-labels"]
    )
    tr = fold.train_ids[train_labels != UNLABELED]
    clf = finetune_classify(
        encoder, blind.image_features[tr], blind.labels[tr], blind.n_classes, eval_cfg.finetune_mode,
        eval_cfg.finetune_lr, eval_cfg.finetune_epochs, eval_cfg.finetune_batch_size, seed,
    )
    feats = clf.encoder_(Tensor(blind.image_features)).data
    mixing = knn_batch_mixing(EmbeddingSet.from_dataset(blind, feats, "image"), eval_cfg.k)
    test_preds = clf.predict(blind.image_features[fold.test_ids])

    fold.locked = False
    try:
        test_truth = fold.test_labels()
    finally:
        fold.locked = True
    scored = test_truth != UNLABELED
    if not scored.any():
        raise ValueError(f"held-out batch {held_out} has no labeled spots to score")
    preds, truth = test_preds[scored], test_truth[scored]
    conf = confusion_matrix(preds, truth, blind.n_classes)
    return FoldResult(
        fold=held_out,
        seed=seed,
        method=method,
        loss_kind=loss_kind,
        accuracy=float(np.trace(conf) / conf.sum()),
        macro_f1=macro_f1(preds, truth, blind.n_classes),
        per_class_f1=per_class_f1(preds, truth, blind.n_classes),
        confusion=conf,
        batch_mixing=mixing,
    )


def run_louo(
    ds: SpotDataset,
    gene_cfg: GeneEncoderConfig,
    con_cfg: ContrastiveConfig,
    eval_cfg: EvalConfig,
    base_seed: int = 0,
) -> list[FoldResult]:
    """Hold out each patient in turn; ``eval_cfg.n_seeds`` seeds per fold and method.

    Gene and contrastive stages see every spot's counts and image features but
    never a held-out label.
    """
    results = []
    for fold in fold_views(ds):
        cache: dict = {}
        for s in range(eval_cfg.n_seeds):
            for method in eval_cfg.methods:
                r = evaluate_fold(fold, method, base_seed + s, gene_cfg, con_cfg, eval_cfg, cache)
                logger.info("fold %d seed %d %s acc %.3f f1 %.3f", r.fold, r.seed, method, r.accuracy, r.macro_f1)
                results.append(r)
    return results


def summarize(results: list[FoldResult]) -> list[tuple[str, str, float, float, float, float, int]]:
    """(method, loss_kind, acc mean, acc std, f1 mean, f1 std, n) per method/loss pair."""
    groups: dict[tuple[str, str], list[FoldResult]] = {}
    for r in results:
        groups.setdefault((r.method, r.loss_kind), []).append(r)
    out = []
    for (method, kind), rs in groups.items():
        acc = np.array([r.accuracy for r in rs])
        f1 = np.array([r.macro_f1 for r in rs])
        out.append((method, kind, float(acc.mean()), float(acc.std()), float(f1.mean()), float(f1.std()), len(rs)))
    return out


def format_results(results: list[FoldResult], header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        for line in header.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["fold", "seed", "method", "loss_kind", "accuracy", "macro_f1", "batch_mixing"])
    for r in results:
        fold, seed, method, kind, acc, f1, mix = r.row()
        w.writerow([fold, seed, method, kind, repr(acc), repr(f1), repr(mix)])
    buf.write("# summary: method\tloss_kind\taccuracy mean±std\tmacro_f1 mean±std\tn\n")
    for method, kind, am, asd, fm, fsd, n in summarize(results):
        buf.write(f"# {method}\t{kind}\t{am:.4f}±{asd:.4f}\t{fm:.4f}±{fsd:.4f}\t{n}\n")
    return buf.getvalue()

"""Stage 1: batch-agnostic gene encoders trained by variational inference.

:class:`ScviModel` is a ZINB variational autoencoder whose encoder sees only
``log1p(counts)`` while the decoder is conditioned on a one-hot patient id, so
patient-specific signal is pushed into the decoder rather than the latent.
:class:`ScanviModel` adds a class latent and a classifier for semi-supervised
training on partially labeled spots.

The estimator classes at the bottom wrap the functional core in the usual
``fit``/``transform``/``predict`` interface.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataio import UNLABELED, SpotDataset
from .distributions import (
    PI_EPS,
    GaussianPosterior,
    ZinbParams,
    categorical_entropy,
    categorical_log_pmf,
    gaussian_kl,
    gaussian_kl_standard,
    gaussian_log_pdf,
    sample_reparam,
    zinb_log_pmf,
)
from .tensor import MLP, AdamW, MlpConfig, Module, RngStreams, Tape, Tensor
from .tensor import autograd as ag
from .tensor.autograd import NonFiniteError

logger = logging.getLogger(__name__)


@dataclass
class GeneEncoderConfig:
    kind: str = "scvi"
    n_latent: int = 30
    n_hidden: int = 128
    n_layers: int = 2
    dropout_rate: float = 0.1
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 256
    weight_decay: float = 1e-6
    kl_warmup_epochs: float = 1.0
    alpha: float | None = None
    labeled_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("scvi", "scanvi"):
            raise ValueError(f"gene encoder kind must be scvi or scanvi, got {self.kind!r}")
        for name in ("n_latent", "n_hidden", "n_layers", "epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainTrace:
    """Per-step objective components and per-epoch mean ELBO."""

    step: list[int] = field(default_factory=list)
    elbo: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    epoch_elbo: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float, float]]:
        return list(zip(self.step, self.elbo, self.kl, self.recon))


def _hidden(cfg: GeneEncoderConfig) -> list[int]:
    return [cfg.n_hidden] * cfg.n_layers


class ScviModel(Module):
    """ZINB VAE with a batch-free encoder and a patient-conditioned decoder."""

    def __init__(self, n_genes: int, n_batches: int, cfg: GeneEncoderConfig, streams: RngStreams):
        self.n_genes, self.n_batches, self.n_latent = n_genes, n_batches, cfg.n_latent
        init, drop = streams["init"], streams["dropout"]
        enc = MlpConfig(n_genes, cfg.n_latent, _hidden(cfg), "relu", cfg.dropout_rate, use_layer_norm=True)
        dec = MlpConfig(cfg.n_latent + n_batches, n_genes, _hidden(cfg), "relu", 0.0, use_layer_norm=True)
        self.enc_mu = MLP(enc, init, drop)
        self.enc_logvar = MLP(enc, init, drop)
        self.dec_rho = MLP(dec, init, drop)
        self.dec_pi = MLP(dec, init, drop)
        self.log_theta = Tensor(np.zeros(n_genes), requires_grad=True)

    @property
    def theta(self) -> Tensor:
        theta = ag.exp(self.log_theta)
        if not np.all(np.isfinite(theta.data) & (theta.data > 0)):
            raise NonFiniteError("gene dispersion overflowed or underflowed")
        return theta

    def encoder_parameters(self) -> list[Tensor]:
        return self.enc_mu.parameters() + self.enc_logvar.parameters()


def encode(model: ScviModel, g) -> GaussianPosterior:
    """Posterior over the shared latent from counts alone (no patient input)."""
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape[1] != model.n_genes:
        raise ValueError(f"expected {model.n_genes} genes, got {g.shape[1]}")
    x = Tensor(np.log1p(g))
    return GaussianPosterior.from_raw(model.enc_mu(x), model.enc_logvar(x))


def _one_hot(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def decode(model: ScviModel, z, b, lib=None) -> ZinbParams:
    """ZINB parameters from a latent sample and the patient id."""
    b = np.asarray(b, dtype=np.int64).reshape(-1)
    if np.any((b < 0) | (b >= model.n_batches)):
        raise ValueError(f"batch id out of range [0, {model.n_batches})")
    z = ag.as_tensor(z)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    h = ag.concat([z, Tensor(_one_hot(b, model.n_batches))], axis=1)
    rho = ag.softmax(model.dec_rho(h), axis=1)
    pi = ag.clip(ag.sigmoid(model.dec_pi(h)), PI_EPS, 1.0 - PI_EPS)
    return ZinbParams(rho=rho, lib=lib, theta=model.theta, pi=pi)


def _reconstruction(model: ScviModel, g: np.ndarray, z, b) -> Tensor:
    """Per-spot ZINB log-likelihood with library size = observed total count."""
    lib = g.sum(axis=1, keepdims=True)
    params = decode(model, z, b)
    mu = ag.clip(params.rho * lib, 1e-12, np.inf)
    return zinb_log_pmf(g, mu, params.theta, params.pi).sum(axis=1)


def elbo_scvi(
    model: ScviModel,
    g,
    b,
    rng: np.random.Generator | None = None,
    kl_weight: float = 1.0,
    eps: np.ndarray | None = None,
    return_parts: bool = False,
):
    """Mean over spots of ZINB log-likelihood minus ``kl_weight`` x KL(q(z|g) || N(0, I))."""
    g = np.asarray(g, dtype=np.float64)
    post = encode(model, g)
    z = sample_reparam(post, rng, eps=eps)
    recon = _reconstruction(model, g, z, b)
    kl = gaussian_kl_standard(post)
    per_spot = recon - kl * kl_weight
    out = per_spot.mean()
    if return_parts:
        return out, {"recon": recon, "kl": kl, "posterior": post, "z": z}
    return out


def latent(model: ScviModel, g) -> np.ndarray:
    """Deterministic embedding: the posterior mean, evaluated in eval mode."""
    was_training = model.training
    model.eval()
    try:
        return encode(model, g).mu.data.copy()
    finally:
        model.train(was_training)


def posterior_arrays(model: ScviModel, g) -> tuple[np.ndarray, np.ndarray]:
    was_training = model.training
    model.eval()
    try:
        post = encode(model, g)
        return post.mu.data.copy(), post.logvar.data.copy()
    finally:
        model.train(was_training)


def kl_weight_schedule(step: int, steps_per_epoch: int, warmup_epochs: float = 1.0) -> float:
    """Linear 0 -> 1 over the first ``warmup_epochs`` epochs."""
    warm = warmup_epochs * steps_per_epoch
    if warm <= 0:
        return 1.0
    return float(min(1.0, step / warm))


def stratified_batches(batch_ids: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle within patients, then spread each patient evenly over the epoch.

    Spot k of a patient with n spots is placed at position (k + 0.5) / n, so
    every mini-batch mixes patients in roughly their overall proportions.
    """
    groups = [rng.permutation(np.flatnonzero(batch_ids == b)) for b in np.unique(batch_ids)]
    groups = [groups[i] for i in rng.permutation(len(groups))]
    idx = np.concatenate(groups)
    pos = np.concatenate([(np.arange(len(gr)) + 0.5) / len(gr) for gr in groups])
    tie = np.concatenate([np.full(len(gr), k) for k, gr in enumerate(groups)])
    order = idx[np.lexsort((tie, pos))]
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite {what}: {value}")


def train_scvi(ds: SpotDataset, cfg: GeneEncoderConfig) -> tuple[ScviModel, TrainTrace]:
    """Maximise the ELBO with AdamW; KL weight warms up linearly over the first epoch."""
    streams = RngStreams(cfg.seed)
    model = ScviModel(ds.n_genes, ds.n_batches, cfg, streams)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    counts = ds.counts.astype(np.float64)
    steps_per_epoch = math.ceil(ds.n_spots / cfg.batch_size)
    trace = TrainTrace()
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        totals = []
        for idx in stratified_batches(ds.batch_ids, cfg.batch_size, streams["data"]):
            w = kl_weight_schedule(step, steps_per_epoch, cfg.kl_warmup_epochs)
            opt.zero_grad()
            with Tape() as tape:
                elbo, parts = elbo_scvi(model, counts[idx], ds.batch_ids[idx], streams["sampling"], w, return_parts=True)
                loss = -elbo
            value = elbo.item()
            _check_finite(value, "ELBO")
            tape.backward(loss)
            opt.step()
            trace.step.append(step)
            trace.elbo.append(value)
            trace.kl.append(float(parts["kl"].data.mean()))
            trace.recon.append(float(parts["recon"].data.mean()))
            totals.append(value * len(idx))
            step += 1
        trace.epoch_elbo.append(sum(totals) / ds.n_spots)
        logger.info("scvi epoch %d elbo %.3f", epoch, trace.epoch_elbo[-1])
    model.eval()
    return model, trace


def importance_weighted_bound(
    model: ScviModel, g, b, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-spot IWAE bound log mean_k p(g, z_k) / q(z_k | g) with the N(0, I) prior."""
    g = np.asarray(g, dtype=np.float64)
    was_training = model.training
    model.eval()
    try:
        post = encode(model, g)
        mu, lv = post.mu.data, post.logvar.data
        logw = np.empty((n_samples, g.shape[0]))
        for k in range(n_samples):
            z = mu + np.exp(0.5 * lv) * rng.standard_normal(mu.shape)
            recon = _reconstruction(model, g, Tensor(z), b).data
            logw[k] = recon + gaussian_log_pdf(z, 0.0, 0.0) - gaussian_log_pdf(z, mu, lv)
    finally:
        model.train(was_training)
    m = logw.max(axis=0)
    return m + np.log(np.exp(logw - m).mean(axis=0))


# semi-supervised extension -----------------------------------------------------


class ScanviModel(ScviModel):
    """Adds q(y|z1), q(z2|z1,y) and the conditional prior p(z1|z2,y)."""

    def __init__(self, n_genes: int, n_batches: int, n_classes: int, cfg: GeneEncoderConfig, streams: RngStreams):
        super().__init__(n_genes, n_batches, cfg, streams)
        self.n_classes = n_classes
        init, drop = streams["init"], streams["dropout"]
        L, h = cfg.n_latent, [cfg.n_hidden]
        self.classifier = MLP(MlpConfig(L, n_classes, h, "relu", cfg.dropout_rate, True), init, drop)
        self.enc_z2 = MLP(MlpConfig(L + n_classes, 2 * L, h, "relu", 0.0, True), init, drop)
        self.prior_net = MLP(MlpConfig(L + n_classes, 2 * L, h, "relu", 0.0, True), init, drop)

    def class_log_probs(self, z1) -> Tensor:
        return ag.log_softmax(self.classifier(ag.as_tensor(z1)), axis=1)

    def _gaussian_head(self, net: MLP, z, y_onehot: np.ndarray) -> GaussianPosterior:
        out = net(ag.concat([ag.as_tensor(z), Tensor(y_onehot)], axis=1))
        L = self.n_latent
        return GaussianPosterior.from_raw(out[:, :L], out[:, L:])


def _class_terms(model: ScanviModel, post1: GaussianPosterior, z1, y, eps2: np.ndarray, kl_weight: float) -> Tensor:
    """-w * [KL(q(z1|g) || p(z1|z2,y)) + KL(q(z2|z1,y) || N(0,I))] per row."""
    onehot = _one_hot(y, model.n_classes)
    q2 = model._gaussian_head(model.enc_z2, z1, onehot)
    z2 = sample_reparam(q2, None, eps=eps2)
    p1 = model._gaussian_head(model.prior_net, z2, onehot)
    kl1 = gaussian_kl(post1, p1)
    kl2 = gaussian_kl_standard(q2)
    return -(kl1 + kl2) * kl_weight


def _draw(rng, shape, given):
    return given if given is not None else rng.standard_normal(shape)


def elbo_scanvi_labeled(
    model: ScanviModel,
    g,
    y,
    b,
    rng: np.random.Generator | None = None,
    alpha: float | None = None,
    kl_weight: float = 1.0,
    eps1: np.ndarray | None = None,
    eps2: np.ndarray | None = None,
    per_spot: bool = False,
):
    """Labeled objective: ZINB log-lik - KL(z1 | z2, y) - KL(z2) + alpha * log q(y | z1).

    z1 and z2 are single reparametrised draws; the Gaussian KL terms are in
    closed form given those draws.
    """
    g = np.asarray(g, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if np.any((y < 0) | (y >= model.n_classes)):
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    alpha = default_alpha(model.n_classes) if alpha is None else alpha
    post1 = encode(model, g)
    z1 = sample_reparam(post1, None, eps=_draw(rng, post1.mu.shape, eps1))
    eps2 = _draw(rng, post1.mu.shape, eps2)
    recon = _reconstruction(model, g, z1, b)
    obj = recon + _class_terms(model, post1, z1, y, eps2, kl_weight)
    if alpha:
        obj = obj + categorical_log_pmf(y, model.class_log_probs(z1)) * alpha
    return obj if per_spot else obj.mean()


def elbo_scanvi_unlabeled(
    model: ScanviModel,
    g,
    b,
    rng: np.random.Generator | None = None,
    kl_weight: float = 1.0,
    eps1: np.ndarray | None = None,
    eps2: np.ndarray | None = None,
    per_spot: bool = False,
):
    """Unlabeled objective with the class marginalised exactly over all C values.

    sum_y q(y|z1) * [labeled objective without the classification term] + H(q(y|z1)).
    One z2 noise draw is shared by all classes.
    """
    g = np.asarray(g, dtype=np.float64)
    n, C = g.shape[0], model.n_classes
    post1 = encode(model, g)
    z1 = sample_reparam(post1, None, eps=_draw(rng, post1.mu.shape, eps1))
    eps2 = _draw(rng, post1.mu.shape, eps2)
    recon = _reconstruction(model, g, z1, b)
    log_q = model.class_log_probs(z1)
    # rows ordered class-major: rows [k*n, (k+1)*n) hold class k
    rep = np.tile(np.arange(n), C)
    ys = np.repeat(np.arange(C), n)
    post_rep = GaussianPosterior(post1.mu[rep], post1.logvar[rep])
    terms = _class_terms(model, post_rep, z1[rep], ys, eps2[rep], kl_weight).reshape(C, n).T
    obj = recon + (ag.exp(log_q) * terms).sum(axis=1) + categorical_entropy(log_q)
    return obj if per_spot else obj.mean()


def default_alpha(n_classes: int) -> float:
    return 50.0 / n_classes


def scanvi_objective(
    model: ScanviModel, g, y, b, rng, alpha: float | None = None, kl_weight: float = 1.0
) -> tuple[Tensor, int, int]:
    """Mean over a mixed mini-batch of labeled and unlabeled per-spot objectives."""
    y = np.asarray(y, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    lab = y != UNLABELED
    parts = []
    if lab.any():
        parts.append(elbo_scanvi_labeled(model, g[lab], y[lab], b[lab], rng, alpha, kl_weight, per_spot=True))
    if (~lab).any():
        parts.append(elbo_scanvi_unlabeled(model, g[~lab], b[~lab], rng, kl_weight, per_spot=True))
    total = parts[0].sum() if len(parts) == 1 else parts[0].sum() + parts[1].sum()
    return total * (1.0 / len(y)), int(lab.sum()), int((~lab).sum())


def subsample_labels(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Keep roughly ``fraction`` of the labels, at least one per observed class."""
    labels = labels.copy()
    if fraction >= 1.0:
        return labels
    for c in np.unique(labels[labels != UNLABELED]):
        idx = rng.permutation(np.flatnonzero(labels == c))
        keep = max(1, int(round(fraction * len(idx))))
        labels[idx[keep:]] = UNLABELED
    return labels


def train_scanvi(ds: SpotDataset, cfg: GeneEncoderConfig) -> tuple[ScanviModel, TrainTrace]:
    """Semi-supervised training over mini-batches mixing labeled and unlabeled spots."""
    streams = RngStreams(cfg.seed)
    labels = subsample_labels(ds.labels, cfg.labeled_fraction, streams["labels"])
    present = np.unique(labels[labels != UNLABELED])
    missing = sorted(set(range(ds.n_classes)) - set(present.tolist()))
    if missing:
        raise ValueError(f"no labeled training spots for class(es) {missing}")
    model = ScanviModel(ds.n_genes, ds.n_batches, ds.n_classes, cfg, streams)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    counts = ds.counts.astype(np.float64)
    steps_per_epoch = math.ceil(ds.n_spots / cfg.batch_size)
    trace = TrainTrace()
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        totals = []
        for idx in stratified_batches(ds.batch_ids, cfg.batch_size, streams["data"]):
            w = kl_weight_schedule(step, steps_per_epoch, cfg.kl_warmup_epochs)
            opt.zero_grad()
            with Tape() as tape:
                obj, _, _ = scanvi_objective(model, counts[idx], labels[idx], ds.batch_ids[idx], streams["sampling"], cfg.alpha, w)
                loss = -obj
            value = obj.item()
            _check_finite(value, "scANVI objective")
            tape.backward(loss)
            opt.step()
            trace.step.append(step)
            trace.elbo.append(value)
            trace.kl.append(float("nan"))
            trace.recon.append(float("nan"))
            totals.append(value * len(idx))
            step += 1
        trace.epoch_elbo.append(sum(totals) / ds.n_spots)
        logger.info("scanvi epoch %d objective %.3f", epoch, trace.epoch_elbo[-1])
    model.eval()
    return model, trace


def build_model(kind: str, n_genes: int, n_batches: int, n_classes: int, cfg: GeneEncoderConfig) -> ScviModel:
    """Fresh, untrained model with the given architecture (used to load checkpoints)."""
    streams = RngStreams(cfg.seed)
    if kind == "scanvi":
        return ScanviModel(n_genes, n_batches, n_classes, cfg, streams)
    return ScviModel(n_genes, n_batches, cfg, streams)


def train_gene_encoder(ds: SpotDataset, cfg: GeneEncoderConfig) -> tuple[ScviModel, TrainTrace]:
    if cfg.kind == "scanvi":
        return train_scanvi(ds, cfg)
    return train_scvi(ds, cfg)


# estimators --------------------------------------------------------------------


def _check_counts(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64)
    if np.any(X < 0):
        raise ValueError("counts must be nonnegative")
    return X


class ScviEncoder(TransformerMixin, BaseEstimator):
    """Batch-agnostic gene encoder; ``transform`` returns the posterior mean.

    Parameters mirror :class:`GeneEncoderConfig`. ``fit`` takes the count
    matrix and the per-spot patient ids via the ``batch`` keyword.

    >>> enc = ScviEncoder(epochs=1).fit(counts, batch=batch_ids)   # doctest: +SKIP
    >>> z = enc.transform(counts)                                   # doctest: +SKIP
    """

    _kind = "scvi"

    def __init__(
        self,
        n_latent=30,
        n_hidden=128,
        n_layers=2,
        dropout_rate=0.1,
        lr=1e-3,
        epochs=5,
        batch_size=256,
        weight_decay=1e-6,
        kl_warmup_epochs=1.0,
        seed=0,
    ):
        self.n_latent = n_latent
        self.n_hidden = n_hidden
        self.n_layers = n_layers
        self.dropout_rate = dropout_rate
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.kl_warmup_epochs = kl_warmup_epochs
        self.seed = seed

    def _config(self) -> GeneEncoderConfig:
        fields = set(GeneEncoderConfig.__dataclass_fields__)
        return GeneEncoderConfig(kind=self._kind, **{k: v for k, v in self.get_params().items() if k in fields})

    def _dataset(self, X, y, batch) -> SpotDataset:
        X = _check_counts(X)
        if batch is None:
            raise ValueError("fit needs the per-spot patient ids via batch=")
        batch = np.asarray(batch, dtype=np.int64)
        if len(batch) != len(X):
            raise ValueError("batch and X have different lengths")
        labels = np.full(len(X), UNLABELED) if y is None else np.asarray(y, dtype=np.int64)
        n_classes = int(labels.max()) + 1 if np.any(labels != UNLABELED) else 1
        return SpotDataset(
            counts=np.rint(X).astype(np.int64),
            batch_ids=batch,
            coords=np.zeros((len(X), 2)),
            labels=labels,
            image_features=np.zeros((len(X), 0)),
            gene_names=[str(i) for i in range(X.shape[1])],
            n_batches=int(batch.max()) + 1,
            n_classes=getattr(self, "n_classes", None) or n_classes,
        )

    def fit(self, X, y=None, batch=None):
        ds = self._dataset(X, None, batch)
        self.model_, self.trace_ = train_scvi(ds, self._config())
        self.n_features_in_ = ds.n_genes
        self.n_batches_ = ds.n_batches
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return latent(self.model_, _check_counts(X))

    def posterior(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and log-variance, used by the contrastive stage."""
        check_is_fitted(self, "model_")
        return posterior_arrays(self.model_, _check_counts(X))

    def score(self, X, y=None, batch=None):
        """Mean ELBO (KL weight 1) with a fixed evaluation noise stream."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        rng = RngStreams(self.seed)["eval"]
        return elbo_scvi(self.model_, _check_counts(X), np.asarray(batch), rng).item()

    @classmethod
    def from_model(cls, model: ScviModel, **params) -> ScviEncoder:
        est = cls(**params)
        est.model_ = model
        est.n_features_in_ = model.n_genes
        est.n_batches_ = model.n_batches
        return est


class ScanviEncoder(ClassifierMixin, ScviEncoder):
    """Semi-supervised variant; ``y`` uses -1 for unlabeled spots."""

    _kind = "scanvi"

    def __init__(
        self,
        n_latent=30,
        n_hidden=128,
        n_layers=2,
        dropout_rate=0.1,
        lr=1e-3,
        epochs=5,
        batch_size=256,
        weight_decay=1e-6,
        kl_warmup_epochs=1.0,
        alpha=None,
        labeled_fraction=1.0,
        n_classes=None,
        seed=0,
    ):
        super().__init__(
            n_latent, n_hidden, n_layers, dropout_rate, lr, epochs, batch_size, weight_decay, kl_warmup_epochs, seed
        )
        self.alpha = alpha
        self.labeled_fraction = labeled_fraction
        self.n_classes = n_classes

    def fit(self, X, y=None, batch=None):
        if y is None:
            raise ValueError("ScanviEncoder.fit needs labels (use -1 for unlabeled spots)")
        ds = self._dataset(X, y, batch)
        self.model_, self.trace_ = train_scanvi(ds, self._config())
        self.n_features_in_ = ds.n_genes
        self.n_batches_ = ds.n_batches
        self.classes_ = np.arange(ds.n_classes)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        z = latent(self.model_, _check_counts(X))
        return np.exp(self.model_.class_log_probs(z).data)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y, batch=None):
        return ClassifierMixin.score(self, X, y)


def config_dict(cfg: GeneEncoderConfig) -> dict:
    return asdict(cfg)

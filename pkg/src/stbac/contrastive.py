"""Stage 2: cross-modal contrastive training against a frozen gene encoder.

Image features go through a trainable encoder and projector; gene counts go
through the frozen stage-1 encoder (a reparametrised latent sample while
training, the posterior mean at evaluation) and a second projector. Three
losses are supported over cosine/temperature similarity matrices:

* ``SI``   symmetric InfoNCE,
* ``WSI``  InfoNCE with the diagonal of one shared weight matrix built from the
  image-image and gene-gene similarities,
* ``SWSI`` the same with separate image and gene weight matrices.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataio import SpotDataset
from .tensor import MLP, AdamW, Dropout, LayerNorm, Linear, MlpConfig, Module, RngStreams, Tape, Tensor
from .tensor import autograd as ag
from .tensor.autograd import NonFiniteError

logger = logging.getLogger(__name__)

LOSS_KINDS = ("SI", "WSI", "SWSI")


class ZeroNormError(FloatingPointError):
    """An embedding row has zero norm, so cosine similarity is undefined."""


# similarities and losses -------------------------------------------------------


def _check_square(S: Tensor, name: str = "similarity") -> None:
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} matrix must be square, got shape {S.shape}")


def l2_normalize(E) -> Tensor:
    E = ag.as_tensor(E)
    norms = np.sqrt((E.data**2).sum(axis=1))
    bad = np.flatnonzero(norms == 0)
    if len(bad):
        raise ZeroNormError(f"embedding row {int(bad[0])} has zero norm")
    return E / ag.sqrt((E * E).sum(axis=1, keepdims=True))


def similarity(E_a, E_b, tau: float) -> Tensor:
    """S[i, j] = cos(a_i, b_j) / tau."""
    E_a, E_b = ag.as_tensor(E_a), ag.as_tensor(E_b)
    if E_a.shape[1] != E_b.shape[1]:
        raise ValueError(f"embedding widths differ: {E_a.shape[1]} vs {E_b.shape[1]}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    return ag.matmul(l2_normalize(E_a), l2_normalize(E_b).T) * (1.0 / tau)


class SimilarityMatrices(NamedTuple):
    vg: Tensor
    vv: Tensor
    gg: Tensor
    tau: float


def pairwise_similarities(E_v, E_g, tau: float) -> SimilarityMatrices:
    return SimilarityMatrices(similarity(E_v, E_g, tau), similarity(E_v, E_v, tau), similarity(E_g, E_g, tau), tau)


def _directional_log_probs(S_vg: Tensor) -> tuple[Tensor, Tensor]:
    """Diagonal of the row-wise and column-wise log-softmax."""
    return ag.diag(ag.log_softmax(S_vg, axis=1)), ag.diag(ag.log_softmax(S_vg, axis=0))


def loss_si(S_vg) -> Tensor:
    """Symmetric InfoNCE: -(mean_i log p_row(i|i) + mean_j log p_col(j|j)) / 2."""
    S_vg = ag.as_tensor(S_vg)
    _check_square(S_vg)
    lv, lg = _directional_log_probs(S_vg)
    return -(lv.mean() + lg.mean()) * 0.5


def _check_all(S_vg: Tensor, S_vv: Tensor, S_gg: Tensor) -> None:
    for name, S in (("S_vg", S_vg), ("S_vv", S_vv), ("S_gg", S_gg)):
        _check_square(S, name)
    if not S_vg.shape == S_vv.shape == S_gg.shape:
        raise ValueError(f"similarity shapes differ: {S_vg.shape}, {S_vv.shape}, {S_gg.shape}")


def loss_wsi(S_vg, S_vv, S_gg, tau: float) -> Tensor:
    """InfoNCE weighted by diag(softmax_rows((S_vv + S_gg) / (2 tau))), shared by both directions."""
    S_vg, S_vv, S_gg = ag.as_tensor(S_vg), ag.as_tensor(S_vv), ag.as_tensor(S_gg)
    _check_all(S_vg, S_vv, S_gg)
    w = ag.diag(ag.softmax((S_vv + S_gg) * (1.0 / (2.0 * tau)), axis=1))
    lv, lg = _directional_log_probs(S_vg)
    return -((w * lv).mean() + (w * lg).mean()) * 0.5


def loss_swsi(S_vg, S_vv, S_gg) -> Tensor:
    """InfoNCE with image-side weights diag(softmax(S_vv)) and gene-side diag(softmax(S_gg))."""
    S_vg, S_vv, S_gg = ag.as_tensor(S_vg), ag.as_tensor(S_vv), ag.as_tensor(S_gg)
    _check_all(S_vg, S_vv, S_gg)
    w_v = ag.diag(ag.softmax(S_vv, axis=1))
    w_g = ag.diag(ag.softmax(S_gg, axis=1))
    lv, lg = _directional_log_probs(S_vg)
    return -((w_v * lv).mean() + (w_g * lg).mean()) * 0.5


def contrastive_loss(kind: str, E_v, E_g, tau: float) -> tuple[Tensor, Tensor]:
    """Loss of the given kind plus the image-gene similarity it was computed from."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if kind == "SI":
        S_vg = similarity(E_v, E_g, tau)
        return loss_si(S_vg), S_vg
    sims = pairwise_similarities(E_v, E_g, tau)
    if kind == "WSI":
        return loss_wsi(sims.vg, sims.vv, sims.gg, tau), sims.vg
    return loss_swsi(sims.vg, sims.vv, sims.gg), sims.vg


# networks -----------------------------------------------------------------------


class Projector(Module):
    """h = fc1(x); LayerNorm(h + dropout(fc2(gelu(h))))."""

    def __init__(self, d_in: int, d_proj: int, dropout_rate: float, init: np.random.Generator, drop: np.random.Generator):
        self.fc1 = Linear(d_in, d_proj, init)
        self.fc2 = Linear(d_proj, d_proj, init)
        self.dropout = Dropout(dropout_rate, drop)
        self.norm = LayerNorm(d_proj)

    def forward(self, x) -> Tensor:
        h = self.fc1(ag.as_tensor(x))
        return self.norm(h + self.dropout(self.fc2(ag.gelu(h))))


class ImageEncoder(MLP):
    """MLP over precomputed image feature vectors; stands in for a CNN backbone."""


@dataclass
class ContrastiveConfig:
    loss_kind: str = "SI"
    tau: float = 0.1
    d_proj: int = 256
    image_hidden: list[int] = field(default_factory=lambda: [128, 128])
    image_out: int = 64
    dropout_rate: float = 0.1
    epochs: int = 5
    batch_size: int = 1024
    lr: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}; expected one of {LOSS_KINDS}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("d_proj", "image_out", "epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        self.image_hidden = [int(h) for h in self.image_hidden]


def build_image_encoder(image_dim: int, cfg: ContrastiveConfig, streams: RngStreams) -> ImageEncoder:
    mlp_cfg = MlpConfig(image_dim, cfg.image_out, cfg.image_hidden, "relu", cfg.dropout_rate, use_layer_norm=False)
    return ImageEncoder(mlp_cfg, streams["init"], streams["dropout"])


class ContrastiveModel(Module):
    def __init__(self, image_dim: int, gene_dim: int, cfg: ContrastiveConfig, streams: RngStreams):
        self.image_encoder = build_image_encoder(image_dim, cfg, streams)
        self.p_v = Projector(cfg.image_out, cfg.d_proj, cfg.dropout_rate, streams["init"], streams["dropout"])
        self.p_g = Projector(gene_dim, cfg.d_proj, cfg.dropout_rate, streams["init"], streams["dropout"])


# frozen gene side ---------------------------------------------------------------


class LogCountEncoder(TransformerMixin, BaseEstimator):
    """Fixed ``log1p(counts)`` gene representation with no batch correction.

    Paired with the gene projector (whose first layer is linear) this gives the
    raw log-count linear gene embedding used as a baseline.
    """

    def fit(self, X, y=None, batch=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        return np.log1p(check_array(X, dtype=np.float64))

    def posterior(self, X) -> tuple[np.ndarray, None]:
        return self.transform(X), None


def gene_latent_sample(gene_source, g, train_mode: bool, rng: np.random.Generator | None) -> np.ndarray:
    """z from the frozen gene encoder: a reparametrised draw in train mode, the mean otherwise.

    Computed outside any tape, so no gradient can reach the gene encoder.
    """
    mu, logvar = gene_source.posterior(g)
    if not train_mode or logvar is None:
        return mu
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)


def project_pair(model: ContrastiveModel, gene_source, x, g, train_mode: bool, rng=None) -> tuple[Tensor, Tensor]:
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g)
    if len(x) != len(g):
        raise ValueError(f"unpaired batch: {len(x)} images vs {len(g)} gene rows")
    model.train(train_mode)
    z = gene_latent_sample(gene_source, g, train_mode, rng)
    E_v = model.p_v(model.image_encoder(Tensor(x)))
    E_g = model.p_g(Tensor(z))
    return E_v, E_g


@dataclass
class ContrastiveTrace:
    step: list[int] = field(default_factory=list)
    loss_kind: list[str] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    mean_diag_sim: list[float] = field(default_factory=list)
    mean_offdiag_sim: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)

    def rows(self):
        return list(zip(self.step, self.loss_kind, self.loss, self.mean_diag_sim, self.mean_offdiag_sim))


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a single-pair batch has no negatives
    return [b for b in out if len(b) > 1]


def train_contrastive(
    image_features: np.ndarray,
    counts: np.ndarray,
    gene_source,
    cfg: ContrastiveConfig,
) -> tuple[ContrastiveModel, ContrastiveTrace]:
    """AdamW on the image encoder and both projectors; the gene encoder stays frozen."""
    streams = RngStreams(cfg.seed)
    x = np.asarray(image_features, dtype=np.float64)
    g = np.asarray(counts)
    gene_dim = np.asarray(gene_source.posterior(g[:1])[0]).shape[1]
    model = ContrastiveModel(x.shape[1], gene_dim, cfg, streams)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    trace = ContrastiveTrace()
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(x), cfg.batch_size, streams["data"]):
            opt.zero_grad()
            with Tape() as tape:
                E_v, E_g = project_pair(model, gene_source, x[idx], g[idx], True, streams["sampling"])
                loss, S_vg = contrastive_loss(cfg.loss_kind, E_v, E_g, cfg.tau)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite contrastive loss at step {step}")
            tape.backward(loss)
            opt.step()
            cos = S_vg.data * cfg.tau
            B = len(idx)
            off = (cos.sum() - np.trace(cos)) / (B * (B - 1))
            trace.step.append(step)
            trace.loss_kind.append(cfg.loss_kind)
            trace.loss.append(value)
            trace.mean_diag_sim.append(float(np.trace(cos) / B))
            trace.mean_offdiag_sim.append(float(off))
            losses.append(value)
            step += 1
        trace.epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        logger.info("contrastive epoch %d %s loss %.4f", epoch, cfg.loss_kind, trace.epoch_loss[-1])
    model.eval()
    return model, trace


def image_features_of(model_or_encoder, x) -> np.ndarray:
    enc = model_or_encoder.image_encoder if isinstance(model_or_encoder, ContrastiveModel) else model_or_encoder
    enc.eval()
    return enc(Tensor(np.asarray(x, dtype=np.float64))).data.copy()


class ContrastivePretrainer(TransformerMixin, BaseEstimator):
    """Pretrains an image encoder against a frozen gene encoder.

    ``fit(X_img, counts=...)`` trains; ``transform(X_img)`` returns image
    encoder features; :meth:`embed` gives the projected pair in eval mode.
    ``gene_encoder`` must be fitted and expose ``posterior(counts)``.
    """

    def __init__(
        self,
        gene_encoder=None,
        loss_kind="SI",
        tau=0.1,
        d_proj=256,
        image_hidden=(128, 128),
        image_out=64,
        dropout_rate=0.1,
        epochs=5,
        batch_size=1024,
        lr=1e-3,
        weight_decay=1e-2,
        seed=0,
    ):
        self.gene_encoder = gene_encoder
        self.loss_kind = loss_kind
        self.tau = tau
        self.d_proj = d_proj
        self.image_hidden = image_hidden
        self.image_out = image_out
        self.dropout_rate = dropout_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def config(self) -> ContrastiveConfig:
        params = self.get_params(deep=False)
        params.pop("gene_encoder")
        params["image_hidden"] = list(params["image_hidden"])
        return ContrastiveConfig(**params)

    def fit(self, X, y=None, counts=None):
        if self.gene_encoder is None:
            raise ValueError("ContrastivePretrainer needs a fitted gene_encoder")
        if counts is None:
            raise ValueError("fit needs the paired gene counts via counts=")
        X = check_array(X, dtype=np.float64)
        counts = check_array(counts, dtype=np.float64)
        self.model_, self.trace_ = train_contrastive(X, counts, self.gene_encoder, self.config())
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return image_features_of(self.model_, check_array(X, dtype=np.float64))

    def embed(self, X, counts) -> tuple[np.ndarray, np.ndarray]:
        check_is_fitted(self, "model_")
        E_v, E_g = project_pair(self.model_, self.gene_encoder, check_array(X), check_array(counts), False)
        return E_v.data.copy(), E_g.data.copy()

    def image_encoder(self) -> ImageEncoder:
        """A detached copy of the trained image encoder."""
        check_is_fitted(self, "model_")
        return copy.deepcopy(self.model_.image_encoder)


def pretrain(ds: SpotDataset, gene_source, cfg: ContrastiveConfig) -> tuple[ContrastiveModel, ContrastiveTrace]:
    return train_contrastive(ds.image_features, ds.counts, gene_source, cfg)

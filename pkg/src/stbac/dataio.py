"""Spot datasets: in-memory model, directory format, synthetic generator, folds.

A dataset directory holds::

    manifest.txt          key=value lines (n_spots, n_genes, n_batches, n_classes, checksum, ...)
    counts.tsv            spot_index, gene_index, count  (nonzero entries only)
    metadata.tsv          spot_id, batch, x_um, y_um, label  (label -1 = unlabeled)
    image_features.tsv    spot_id, f0 .. f{D-1}
    genes.txt             one gene name per line

Lines starting with ``#`` are comments (used for provenance headers) and are
ignored by the loader and by the checksum.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .distributions import sample_zinb
from .tensor.rng import RngStreams

logger = logging.getLogger(__name__)

UNLABELED = -1
SPOT_PITCH_UM = 200.0
REGIONS_PER_CLASS = 4
FORMAT_NAME = "stbac-spot-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """A dataset file does not follow the directory format."""


class LabelAccessError(RuntimeError):
    """Held-out labels were requested while the fold is locked."""


@dataclass
class SpotDataset:
    counts: np.ndarray
    batch_ids: np.ndarray
    coords: np.ndarray
    labels: np.ndarray
    image_features: np.ndarray
    gene_names: list[str]
    n_batches: int
    n_classes: int
    spot_ids: np.ndarray | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.batch_ids = np.asarray(self.batch_ids, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        self.gene_names = [str(g) for g in self.gene_names]
        if self.spot_ids is None:
            self.spot_ids = np.arange(self.counts.shape[0], dtype=np.int64)
        self.spot_ids = np.asarray(self.spot_ids, dtype=np.int64)
        self.validate()

    @property
    def n_spots(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]

    @property
    def image_dim(self) -> int:
        return self.image_features.shape[1]

    @property
    def library_size(self) -> np.ndarray:
        return self.counts.sum(axis=1).astype(np.float64)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def validate(self) -> None:
        n = self.counts.shape[0]
        if self.counts.ndim != 2:
            raise ValueError("counts must be a spots x genes matrix")
        for name in ("batch_ids", "coords", "labels", "image_features", "spot_ids"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, counts has {n}")
        if len(self.gene_names) != self.counts.shape[1]:
            raise ValueError("gene_names length does not match the gene dimension")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")
        if np.any((self.batch_ids < 0) | (self.batch_ids >= self.n_batches)):
            raise ValueError(f"batch ids must lie in [0, {self.n_batches})")
        bad = (self.labels != UNLABELED) & ((self.labels < 0) | (self.labels >= self.n_classes))
        if np.any(bad):
            raise ValueError(f"labels must be -1 or lie in [0, {self.n_classes})")
        if n and np.any(self.counts.sum(axis=1) == 0):
            raise ValueError("spots with zero total count are not allowed; filter them first")

    def subset(self, ids) -> SpotDataset:
        ids = np.asarray(ids, dtype=np.int64)
        return replace(
            self,
            counts=self.counts[ids],
            batch_ids=self.batch_ids[ids],
            coords=self.coords[ids],
            labels=self.labels[ids],
            image_features=self.image_features[ids],
            spot_ids=self.spot_ids[ids],
        )

    def equals(self, other: SpotDataset) -> bool:
        return (
            self.n_batches == other.n_batches
            and self.n_classes == other.n_classes
            and self.gene_names == other.gene_names
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("counts", "batch_ids", "coords", "labels", "image_features", "spot_ids")
            )
        )


@dataclass
class GroundTruth:
    latent: np.ndarray
    classes: np.ndarray
    class_means: np.ndarray
    batch_offsets: np.ndarray
    gene_weights: np.ndarray
    image_weights: np.ndarray
    theta: np.ndarray
    pi: np.ndarray
    rho: np.ndarray
    library_size: np.ndarray

    def save(self, path: str | os.PathLike) -> None:
        np.savez(path, **{k: v for k, v in vars(self).items()})


@dataclass
class SynthConfig:
    n_batches: int = 3
    n_classes: int = 6
    spots_per_batch: int = 400
    n_genes: int = 200
    latent_dim_true: int = 8
    image_feature_dim: int = 32
    batch_effect_strength: float = 2.0
    zero_inflation_base: float = 0.1
    dispersion_range: tuple[float, float] = (2.0, 10.0)
    seed: int = 0
    labeled_fraction: float = 0.3
    class_separation: float = 2.5
    library_size_mean: float = 2000.0
    image_noise: float = 1.0

    def __post_init__(self):
        for name in ("n_batches", "n_classes", "spots_per_batch", "n_genes", "latent_dim_true", "image_feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_effect_strength < 0:
            raise ValueError("batch_effect_strength must be >= 0")
        if not 0.0 < self.zero_inflation_base < 1.0:
            raise ValueError("zero_inflation_base must lie in (0, 1)")
        lo, hi = self.dispersion_range
        if not 0 < lo <= hi:
            raise ValueError("dispersion_range must satisfy 0 < low <= high")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in [0, 1]")
        self.dispersion_range = (float(lo), float(hi))


def _grid(n: int) -> np.ndarray:
    side = math.ceil(math.sqrt(n))
    idx = np.arange(n)
    return np.stack([idx % side, idx // side], axis=1) * SPOT_PITCH_UM


def generate_synthetic(cfg: SynthConfig) -> tuple[SpotDataset, GroundTruth]:
    """Draw a paired gene/image dataset with a controllable patient batch effect.

    Gene rates mix a batch-free class latent with a per-patient offset scaled by
    ``batch_effect_strength``; image features see only the latent. Classes are
    spatial Voronoi regions on each slide, and a contiguous block of each slide
    (the leftmost ``labeled_fraction`` of spots) carries labels.
    """
    streams = RngStreams(cfg.seed)
    model_rng, spot_rng, count_rng = streams["synth:model"], streams["synth:spots"], streams["synth:counts"]
    d, g, c = cfg.latent_dim_true, cfg.n_genes, cfg.n_classes
    strength = cfg.batch_effect_strength

    class_means = model_rng.normal(0.0, cfg.class_separation / math.sqrt(2.0), size=(c, d))
    gene_weights = model_rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, g))
    batch_offsets = model_rng.normal(0.0, 1.0, size=(cfg.n_batches, g))
    lib_shift = model_rng.normal(0.0, 0.25, size=cfg.n_batches)
    image_weights = model_rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, cfg.image_feature_dim))
    theta = model_rng.uniform(*cfg.dispersion_range, size=g)
    pi = np.clip(model_rng.uniform(0.5, 1.5, size=g) * cfg.zero_inflation_base, 1e-6, 1 - 1e-6)

    counts, batches, coords, labels, classes, latent, rho_all, libs, images = ([] for _ in range(9))
    for b in range(cfg.n_batches):
        n = cfg.spots_per_batch
        xy = _grid(n)
        n_centres = min(REGIONS_PER_CLASS * c, n)
        centres = xy[spot_rng.choice(n, size=n_centres, replace=False)]
        dist = ((xy[:, None, :] - centres[None, :, :]) ** 2).sum(-1)
        cls = np.argmin(dist, axis=1) % c
        t = class_means[cls] + spot_rng.standard_normal((n, d))
        rho = softmax(t @ gene_weights + strength * batch_offsets[b], axis=1)
        lib = np.exp(spot_rng.normal(math.log(cfg.library_size_mean) + strength * lib_shift[b], 0.2, size=n))
        y = sample_zinb(lib[:, None] * rho, theta, pi, count_rng)
        x = t @ image_weights + cfg.image_noise * spot_rng.standard_normal((n, cfg.image_feature_dim))
        order = np.lexsort((xy[:, 1], xy[:, 0]))
        lab = np.full(n, UNLABELED, dtype=np.int64)
        n_lab = int(round(cfg.labeled_fraction * n))
        lab[order[:n_lab]] = cls[order[:n_lab]]
        counts.append(y)
        batches.append(np.full(n, b))
        coords.append(xy)
        labels.append(lab)
        classes.append(cls)
        latent.append(t)
        rho_all.append(rho)
        libs.append(lib)
        images.append(x)

    counts = np.concatenate(counts)
    keep = counts.sum(axis=1) > 0
    if not keep.all():
        logger.warning("dropping %d synthetic spots with zero total count", int((~keep).sum()))
    ds = SpotDataset(
        counts=counts[keep],
        batch_ids=np.concatenate(batches)[keep],
        coords=np.concatenate(coords)[keep],
        labels=np.concatenate(labels)[keep],
        image_features=np.concatenate(images)[keep],
        gene_names=[f"gene{i:04d}" for i in range(g)],
        n_batches=cfg.n_batches,
        n_classes=c,
        spot_ids=np.arange(len(counts))[keep],
    )
    truth = GroundTruth(
        latent=np.concatenate(latent)[keep],
        classes=np.concatenate(classes)[keep],
        class_means=class_means,
        batch_offsets=batch_offsets,
        gene_weights=gene_weights,
        image_weights=image_weights,
        theta=theta,
        pi=pi,
        rho=np.concatenate(rho_all)[keep],
        library_size=np.concatenate(libs)[keep],
    )
    return ds, truth


def select_top_genes(ds: SpotDataset, k: int = 1000) -> SpotDataset:
    """Keep the ``k`` genes with the largest variance of log1p counts, in original order."""
    if ds.n_genes <= k:
        return ds
    var = np.log1p(ds.counts).var(axis=0)
    keep = np.sort(np.argsort(-var, kind="stable")[:k])
    out = replace(ds, counts=ds.counts[:, keep], gene_names=[ds.gene_names[i] for i in keep])
    dropped = out.counts.sum(axis=1) == 0
    if dropped.any():
        logger.warning("dropping %d spots left with zero total count after gene selection", int(dropped.sum()))
        out = out.subset(np.flatnonzero(~dropped))
    return out


def split_leave_one_batch_out(ds: SpotDataset) -> list[tuple[np.ndarray, np.ndarray]]:
    """One fold per batch; fold k tests on exactly the spots of batch k."""
    if ds.n_batches < 2:
        raise ValueError("leave-one-batch-out needs at least two batches")
    folds = []
    for b in range(ds.n_batches):
        test = np.flatnonzero(ds.batch_ids == b)
        train = np.flatnonzero(ds.batch_ids != b)
        folds.append((train, test))
    return folds


class FoldView:
    """A train/test split of a dataset that guards the held-out labels.

    While locked, :meth:`test_labels` raises; every successful read is logged
    in :attr:`test_label_reads` so protocol tests can audit when it happened.
    """

    def __init__(self, ds: SpotDataset, train_ids, test_ids):
        self.ds = ds
        self.train_ids = np.asarray(train_ids, dtype=np.int64)
        self.test_ids = np.asarray(test_ids, dtype=np.int64)
        self.locked = True
        self.test_label_reads = 0

    def train_labels(self) -> np.ndarray:
        return self.ds.labels[self.train_ids].copy()

    def label_blind(self) -> SpotDataset:
        """The full dataset with held-out labels masked to unlabeled."""
        labels = self.ds.labels.copy()
        labels[self.test_ids] = UNLABELED
        return replace(self.ds, labels=labels)

    def test_labels(self) -> np.ndarray:
        if self.locked:
            raise LabelAccessError("held-out labels requested before training finished")
        self.test_label_reads += 1
        return self.ds.labels[self.test_ids].copy()


# directory format ---------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _data_lines(path: Path) -> list[tuple[int, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("#") or not line.strip():
                continue
            out.append((lineno, line))
    return out


def _checksum(directory: Path) -> str:
    h = hashlib.sha256()
    for name in ("genes.txt", "counts.tsv", "metadata.tsv", "image_features.tsv"):
        h.update(name.encode())
        for _, line in _data_lines(directory / name):
            h.update(line.encode("utf-8"))
            h.update(b"\n")
    return h.hexdigest()


def save_dataset(ds: SpotDataset, path: str | os.PathLike, header: str | None = None) -> str:
    """Write ``ds`` as a dataset directory; returns the content checksum."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    prefix = "".join(f"# {line}\n" for line in header.splitlines()) if header else ""

    with open(root / "genes.txt", "w", encoding="utf-8") as fh:
        fh.write(prefix)
        fh.writelines(f"{g}\n" for g in ds.gene_names)

    rows, cols = np.nonzero(ds.counts)
    with open(root / "counts.tsv", "w", encoding="utf-8") as fh:
        fh.write(prefix)
        fh.write("spot_index\tgene_index\tcount\n")
        fh.writelines(f"{r}\t{c}\t{ds.counts[r, c]}\n" for r, c in zip(rows, cols))

    with open(root / "metadata.tsv", "w", encoding="utf-8") as fh:
        fh.write(prefix)
        fh.write("spot_id\tbatch\tx_um\ty_um\tlabel\n")
        for i in range(ds.n_spots):
            x, y = ds.coords[i]
            fh.write(f"{ds.spot_ids[i]}\t{ds.batch_ids[i]}\t{_fmt(x)}\t{_fmt(y)}\t{ds.labels[i]}\n")

    with open(root / "image_features.tsv", "w", encoding="utf-8") as fh:
        fh.write(prefix)
        fh.write("spot_id\t" + "\t".join(f"f{j}" for j in range(ds.image_dim)) + "\n")
        for i in range(ds.n_spots):
            fh.write(f"{ds.spot_ids[i]}\t" + "\t".join(_fmt(v) for v in ds.image_features[i]) + "\n")

    checksum = _checksum(root)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_spots": ds.n_spots,
        "n_genes": ds.n_genes,
        "n_batches": ds.n_batches,
        "n_classes": ds.n_classes,
        "image_dim": ds.image_dim,
        "checksum": checksum,
    }
    with open(root / "manifest.txt", "w", encoding="utf-8") as fh:
        fh.write(prefix)
        fh.writelines(f"{k}={v}\n" for k, v in manifest.items())
    return checksum


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    file = Path(path) / "manifest.txt"
    if not file.exists():
        raise DatasetFormatError(f"{file}: manifest not found")
    for lineno, line in _data_lines(file):
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetFormatError(f"{file}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    for key in ("n_spots", "n_genes", "n_batches", "n_classes", "checksum"):
        if key not in out:
            raise DatasetFormatError(f"{file}: manifest is missing {key!r}")
    return out


def _int(text: str, where: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DatasetFormatError(f"{where}: expected an integer, got {text!r}") from None


def _float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetFormatError(f"{where}: expected a number, got {text!r}") from None


def _table(path: Path, header: list[str] | None) -> list[tuple[int, list[str]]]:
    if not path.exists():
        raise DatasetFormatError(f"{path}: file not found")
    lines = _data_lines(path)
    if not lines:
        raise DatasetFormatError(f"{path}: missing header")
    lineno, first = lines[0]
    cols = first.split("\t")
    if header is not None and cols != header:
        raise DatasetFormatError(f"{path}:{lineno}: malformed header {cols!r}, expected {header!r}")
    return [(n, line.split("\t")) for n, line in lines[1:]]


def load_dataset(path: str | os.PathLike, top_k_genes: int | None = 1000, verify_checksum: bool = True) -> SpotDataset:
    """Read and validate a dataset directory.

    Spots whose counts sum to zero are dropped with a warning. When the file
    holds more than ``top_k_genes`` genes, only the most variable are kept.
    """
    root = Path(path)
    manifest = read_manifest(root)
    where = f"{root / 'manifest.txt'}"
    n_spots = _int(manifest["n_spots"], where)
    n_genes = _int(manifest["n_genes"], where)
    n_batches = _int(manifest["n_batches"], where)
    n_classes = _int(manifest["n_classes"], where)
    if verify_checksum and _checksum(root) != manifest["checksum"]:
        raise DatasetFormatError(f"{root}: checksum mismatch; files were modified after writing")

    genes = [line for _, line in _data_lines(root / "genes.txt")]
    if len(genes) != n_genes:
        raise DatasetFormatError(f"{root / 'genes.txt'}: {len(genes)} genes, manifest says {n_genes}")

    meta_path = root / "metadata.tsv"
    meta = _table(meta_path, ["spot_id", "batch", "x_um", "y_um", "label"])
    if len(meta) != n_spots:
        raise DatasetFormatError(f"{meta_path}: {len(meta)} rows, manifest says {n_spots}")
    spot_ids = np.empty(n_spots, dtype=np.int64)
    batch_ids = np.empty(n_spots, dtype=np.int64)
    coords = np.empty((n_spots, 2))
    labels = np.empty(n_spots, dtype=np.int64)
    for i, (lineno, cols) in enumerate(meta):
        loc = f"{meta_path}:{lineno}"
        if len(cols) != 5:
            raise DatasetFormatError(f"{loc}: expected 5 columns, got {len(cols)}")
        spot_ids[i] = _int(cols[0], f"{loc} column spot_id")
        batch_ids[i] = _int(cols[1], f"{loc} column batch")
        if not 0 <= batch_ids[i] < n_batches:
            raise DatasetFormatError(f"{loc}: unknown batch id {batch_ids[i]} (n_batches={n_batches})")
        coords[i] = (_float(cols[2], f"{loc} column x_um"), _float(cols[3], f"{loc} column y_um"))
        labels[i] = _int(cols[4], f"{loc} column label")
        if labels[i] != UNLABELED and not 0 <= labels[i] < n_classes:
            raise DatasetFormatError(f"{loc}: label {labels[i]} outside [0, {n_classes})")

    counts_path = root / "counts.tsv"
    counts = np.zeros((n_spots, n_genes), dtype=np.int64)
    for lineno, cols in _table(counts_path, ["spot_index", "gene_index", "count"]):
        loc = f"{counts_path}:{lineno}"
        if len(cols) != 3:
            raise DatasetFormatError(f"{loc}: expected 3 columns, got {len(cols)}")
        r = _int(cols[0], f"{loc} column spot_index")
        c = _int(cols[1], f"{loc} column gene_index")
        v = _int(cols[2], f"{loc} column count")
        if not (0 <= r < n_spots and 0 <= c < n_genes):
            raise DatasetFormatError(f"{loc}: index ({r}, {c}) outside {n_spots} x {n_genes}")
        if v < 0:
            raise DatasetFormatError(f"{loc} column count: negative count {v}")
        counts[r, c] = v

    img_path = root / "image_features.tsv"
    img_rows = _table(img_path, None)
    if len(img_rows) != n_spots:
        raise DatasetFormatError(f"{img_path}: {len(img_rows)} rows, manifest says {n_spots}")
    dim = len(img_rows[0][1]) - 1 if img_rows else int(manifest.get("image_dim", 0))
    image = np.empty((n_spots, dim))
    for i, (lineno, cols) in enumerate(img_rows):
        loc = f"{img_path}:{lineno}"
        if len(cols) != dim + 1:
            raise DatasetFormatError(f"{loc}: expected {dim + 1} columns, got {len(cols)}")
        if _int(cols[0], f"{loc} column spot_id") != spot_ids[i]:
            raise DatasetFormatError(f"{loc}: spot_id {cols[0]} does not match metadata row {spot_ids[i]}")
        image[i] = [_float(v, f"{loc} column {j + 1}") for j, v in enumerate(cols[1:])]

    keep = counts.sum(axis=1) > 0
    if not keep.all():
        logger.warning("dropping %d spots with zero total count from %s", int((~keep).sum()), root)
    ds = SpotDataset(
        counts=counts[keep],
        batch_ids=batch_ids[keep],
        coords=coords[keep],
        labels=labels[keep],
        image_features=image[keep],
        gene_names=genes,
        n_batches=n_batches,
        n_classes=n_classes,
        spot_ids=spot_ids[keep],
    )
    if top_k_genes is not None:
        ds = select_top_genes(ds, top_k_genes)
    return ds


def fold_views(ds: SpotDataset) -> list[FoldView]:
    """Leave-one-batch-out folds wrapped in label-guarded views."""
    return [FoldView(ds, train, test) for train, test in split_leave_one_batch_out(ds)]

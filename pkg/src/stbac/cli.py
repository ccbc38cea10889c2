"""Command-line entry point.

Usage::

    stbac generate          [--config FILE] [--out DIR] [--seed N] [--verbose]
    stbac train-gene        ...
    stbac train-contrastive ...
    stbac evaluate          ...
    stbac embed             ...
    stbac report            ...

Every command reads the same config file (see :mod:`stbac.config`) and works
inside one output directory: ``--out``, else ``[run] output_dir``, else
``$STBAC_OUTPUT_ROOT``, else ``./stbac-runs``. Artifacts::

    dataset/                 generate
    ground_truth.stck        generate
    gene_encoder.stck        train-gene        (+ gene_trace.tsv)
    contrastive.stck         train-contrastive (+ contrastive_trace.tsv)
    results.tsv              evaluate
    embeddings/<source>.tsv  embed
    report.txt               report

Each artifact starts with a provenance header (tool version, command, config
sha256, seed) and contains nothing time- or path-dependent, so reruns with the
same config and seed are byte-identical.

Exit codes: 0 success, 2 config error, 3 data error (bad input files, a
missing prerequisite artifact, an unwritable path), 4 numeric failure (NaN or
inf during training).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .contrastive import ContrastiveModel, LogCountEncoder, gene_latent_sample, project_pair, train_contrastive
from .dataio import DatasetFormatError, LabelAccessError, SpotDataset, fold_views, generate_synthetic, load_dataset, save_dataset
from .evaluation import EmbeddingSet, FoldResult, export_embeddings, format_results, run_louo, score_fold
from .gene_encoder import ScviEncoder, ScviModel, build_model, train_gene_encoder
from .tensor import RngStreams
from .tensor.autograd import NonFiniteError
from .tensor.checkpoint import read_checkpoint, write_checkpoint

logger = logging.getLogger("stbac")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATASET_DIR = "dataset"
GROUND_TRUTH = "ground_truth.stck"
GENE_CKPT = "gene_encoder.stck"
GENE_TRACE = "gene_trace.tsv"
CON_CKPT = "contrastive.stck"
CON_TRACE = "contrastive_trace.tsv"
RESULTS = "results.tsv"
EMBED_DIR = "embeddings"
REPORT = "report.txt"


class MissingArtifactError(RuntimeError):
    """A prerequisite file is absent; the message names the command that makes it."""


class Run:
    """A parsed config bound to an output directory and a command name."""

    def __init__(self, cfg: RunConfig, out: Path, command: str):
        self.cfg, self.out, self.command = cfg, out, command

    def provenance(self) -> dict[str, str]:
        return {
            "tool": "stbac",
            "version": __version__,
            "command": self.command,
            "config_sha256": self.cfg.sha256(),
            "seed": str(self.cfg.seed),
        }

    def header(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.provenance().items())

    def commented_header(self) -> str:
        return "".join(f"# {line}\n" for line in self.header().splitlines())

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(f"{p} not found; run `stbac {producer}` first")
        return p

    def dataset(self) -> SpotDataset:
        if self.cfg.dataset_path:
            return load_dataset(self.cfg.dataset_path, self.cfg.top_k_genes)
        return load_dataset(self.require(DATASET_DIR, "generate"), self.cfg.top_k_genes)


def _write_tsv(path: Path, run: Run, columns: list[str], rows) -> None:
    lines = [run.commented_header(), "\t".join(columns) + "\n"]
    lines.extend("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n" for row in rows)
    path.write_text("".join(lines), encoding="utf-8")


# checkpoints ------------------------------------------------------------------------


def load_gene_model(run: Run) -> tuple[ScviModel, dict[str, str]]:
    params, meta = read_checkpoint(run.require(GENE_CKPT, "train-gene"))
    gene_cfg = run.cfg.gene
    model = build_model(meta["kind"], int(meta["n_genes"]), int(meta["n_batches"]), int(meta["n_classes"]), gene_cfg)
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise ConfigError("gene_encoder", f"checkpoint does not match this config ({exc}); rerun train-gene") from exc
    model.eval()
    return model, meta


def _gene_source(run: Run):
    """(frozen gene representation, method name) for the configured gene embedding."""
    if run.cfg.gene_embedding == "log-counts":
        return LogCountEncoder(), "clip"
    model, meta = load_gene_model(run)
    return ScviEncoder.from_model(model), f"ours-{meta['kind']}"


def load_contrastive(run: Run) -> tuple[ContrastiveModel, dict[str, str]]:
    params, meta = read_checkpoint(run.require(CON_CKPT, "train-contrastive"))
    con_cfg = run.cfg.contrastive
    model = ContrastiveModel(int(meta["image_dim"]), int(meta["gene_dim"]), con_cfg, RngStreams(con_cfg.seed))
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise ConfigError("contrastive", f"checkpoint does not match this config ({exc}); rerun train-contrastive") from exc
    model.eval()
    return model, meta


# commands ---------------------------------------------------------------------------


def cmd_generate(run: Run) -> None:
    ds, truth = generate_synthetic(run.cfg.synth)
    run.out.mkdir(parents=True, exist_ok=True)
    checksum = save_dataset(ds, run.path(DATASET_DIR), header=run.header())
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in vars(truth).items()}
    write_checkpoint(run.path(GROUND_TRUTH), arrays, run.provenance())
    requested = run.cfg.synth.n_batches * run.cfg.synth.spots_per_batch
    print(f"dataset   {run.path(DATASET_DIR)}")
    print(f"n_spots   {ds.n_spots} (requested {requested}, dropped {requested - ds.n_spots} with zero counts)")
    print(f"n_genes   {ds.n_genes}")
    print(f"n_batches {ds.n_batches}")
    print(f"n_classes {ds.n_classes}")
    print(f"labeled   {int(ds.labeled_mask.sum())}")
    print(f"checksum  {checksum}")


def cmd_train_gene(run: Run) -> None:
    ds = run.dataset()
    model, trace = train_gene_encoder(ds, run.cfg.gene)
    meta = run.provenance() | {
        "kind": run.cfg.gene.kind,
        "n_genes": str(ds.n_genes),
        "n_batches": str(ds.n_batches),
        "n_classes": str(ds.n_classes),
    }
    write_checkpoint(run.path(GENE_CKPT), model.state_dict(), meta)
    _write_tsv(run.path(GENE_TRACE), run, ["step", "objective", "kl", "recon"], trace.rows())
    print(f"{run.cfg.gene.kind} final epoch objective {trace.epoch_elbo[-1]:.4f} -> {run.path(GENE_CKPT)}")


def cmd_train_contrastive(run: Run) -> None:
    ds = run.dataset()
    source, method = _gene_source(run)
    model, trace = train_contrastive(ds.image_features, ds.counts, source, run.cfg.contrastive)
    gene_dim = ds.n_genes if method == "clip" else source.model_.n_latent
    meta = run.provenance() | {
        "method": method,
        "loss_kind": run.cfg.contrastive.loss_kind,
        "image_dim": str(ds.image_dim),
        "gene_dim": str(gene_dim),
    }
    write_checkpoint(run.path(CON_CKPT), model.state_dict(), meta)
    _write_tsv(
        run.path(CON_TRACE), run, ["step", "loss_kind", "loss", "mean_diag_sim", "mean_offdiag_sim"], trace.rows()
    )
    print(f"{method} {run.cfg.contrastive.loss_kind} final epoch loss {trace.epoch_loss[-1]:.4f} -> {run.path(CON_CKPT)}")


def _evaluate_checkpoint(run: Run, ds: SpotDataset) -> list[FoldResult]:
    # checked before loading so a missing stage-1 checkpoint is reported first
    if run.cfg.gene_embedding == "encoder":
        _, gene_meta = load_gene_model(run)
        if gene_meta["kind"] == "scanvi":
            raise ConfigError(
                "eval.protocol", "a scanvi checkpoint was trained on held-out labels; use protocol = louo"
            )
    model, meta = load_contrastive(run)
    results = []
    for fold in fold_views(ds):
        for s in range(run.cfg.eval.n_seeds):
            results.append(
                score_fold(fold, model.image_encoder, meta["method"], meta["loss_kind"], run.cfg.seed + s, run.cfg.eval)
            )
    return results


def cmd_evaluate(run: Run) -> None:
    ds = run.dataset()
    if run.cfg.protocol == "louo":
        results = run_louo(ds, run.cfg.gene, run.cfg.contrastive, run.cfg.eval, base_seed=run.cfg.seed)
    else:
        results = _evaluate_checkpoint(run, ds)
    run.path(RESULTS).write_text(format_results(results, header=run.header()), encoding="utf-8")
    print(_summary_text(read_results(run.path(RESULTS))), end="")


def cmd_embed(run: Run) -> None:
    ds = run.dataset()
    source, _ = _gene_source(run)
    model, _ = load_contrastive(run)
    E_v, E_g = project_pair(model, source, ds.image_features, ds.counts, train_mode=False)
    sets = {"image": E_v.data, "gene": E_g.data}
    if run.cfg.gene_embedding == "encoder":
        sets["latent"] = gene_latent_sample(source, ds.counts, False, None)
    out = run.path(EMBED_DIR)
    out.mkdir(parents=True, exist_ok=True)
    for name, emb in sets.items():
        export_embeddings(EmbeddingSet.from_dataset(ds, emb, name), out / f"{name}.tsv", header=run.header())
        print(f"{name:<6} {emb.shape[0]} x {emb.shape[1]} -> {out / f'{name}.tsv'}")


def read_results(path: Path) -> list[dict[str, str]]:
    """Data rows of a results file as dicts keyed by column name."""
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    if not lines:
        raise DatasetFormatError(f"{path} has no header row")
    columns = lines[0].split("\t")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(columns):
            raise DatasetFormatError(f"{path}: row {n} has {len(fields)} fields, expected {len(columns)}")
        rows.append(dict(zip(columns, fields)))
    return rows


def _summary_text(rows: list[dict[str, str]]) -> str:
    groups: dict[tuple[str, str], list[dict[str, str]]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["loss_kind"]), []).append(r)
    out = ["method\tloss_kind\taccuracy\tmacro_f1\tbatch_mixing\tn\n"]
    for (method, kind), rs in groups.items():
        cols = []
        for key in ("accuracy", "macro_f1", "batch_mixing"):
            v = np.array([float(r[key]) for r in rs])
            cols.append(f"{v.mean():.4f}±{v.std():.4f}")
        out.append(f"{method}\t{kind}\t" + "\t".join(cols) + f"\t{len(rs)}\n")
    return "".join(out)


def cmd_report(run: Run) -> None:
    rows = read_results(run.require(RESULTS, "evaluate"))
    text = run.commented_header() + _summary_text(rows)
    run.path(REPORT).write_text(text, encoding="utf-8")
    print(text, end="")


COMMANDS = {
    "generate": cmd_generate,
    "train-gene": cmd_train_gene,
    "train-contrastive": cmd_train_contrastive,
    "evaluate": cmd_evaluate,
    "embed": cmd_embed,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stbac", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"stbac {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file (defaults apply to anything it omits)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        run = Run(cfg, cfg.output_root(args.out), args.command)
        COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, LabelAccessError, MissingArtifactError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import os
from pathlib import Path

import numpy as np
import pytest

from stbac import __version__
from stbac.cli import main
from stbac.config import OUTPUT_ROOT_ENV, ConfigError, RunConfig, load_config, parse_config
from stbac.contrastive import ContrastiveConfig
from stbac.dataio import SynthConfig, load_dataset, read_manifest
from stbac.evaluation import EvalConfig
from stbac.gene_encoder import GeneEncoderConfig
from stbac.tensor.checkpoint import read_checkpoint

SMOKE = """\
[dataset]
n_batches = 3
spots_per_batch = 60
n_genes = 50
n_classes = 3
labeled_fraction = 1.0

[gene_encoder]
n_latent = 8
n_hidden = 32
epochs = 2
batch_size = 64

[contrastive]
d_proj = 16
image_hidden = 32
image_out = 16
epochs = 2
batch_size = 64

[eval]
n_seeds = 2
finetune_epochs = 3
k = 5
"""

PIPELINE = ["generate", "train-gene", "train-contrastive", "evaluate", "embed", "report"]


def write_config(tmp_path: Path, text: str = SMOKE, name: str = "run.ini") -> str:
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


def run_cli(*args) -> int:
    return main([str(a) for a in args])


def run_pipeline(cfg: str, out: Path, steps=PIPELINE) -> None:
    for cmd in steps:
        assert run_cli(cmd, "--config", cfg, "--out", out) == 0, cmd


@pytest.fixture(scope="module")
def pipeline_out(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(root)
    run_pipeline(cfg, root / "out")
    return cfg, root / "out"


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# config -----------------------------------------------------------------------------


def test_empty_config_gives_documented_defaults():
    cfg = parse_config("")
    assert cfg.synth == SynthConfig()
    assert cfg.gene == GeneEncoderConfig()
    assert cfg.contrastive == ContrastiveConfig()
    assert cfg.eval == EvalConfig()
    assert (cfg.seed, cfg.protocol, cfg.gene_embedding, cfg.top_k_genes) == (0, "checkpoint", "encoder", 1000)
    assert load_config(None) == cfg


def test_contrastive_training_defaults():
    c = parse_config("").contrastive
    assert (c.batch_size, c.lr, c.epochs) == (1024, 1e-3, 5)


def test_canonical_text_round_trips():
    cfg = parse_config(SMOKE + "[run]\nseed = 7\n")
    again = parse_config(cfg.canonical_text())
    assert again == cfg
    assert again.sha256() == cfg.sha256()


def test_every_key_is_listed_in_canonical_text():
    text = parse_config("").canonical_text()
    for key in ("alpha", "dispersion_range", "gene_embedding", "protocol", "methods", "image_hidden", "top_k_genes"):
        assert f"\n{key} = " in text


def test_hash_tracks_content_not_formatting():
    a = parse_config("[gene_encoder]\nepochs = 3\n")
    b = parse_config("# comment\n[gene_encoder]\nepochs=3\n\n")
    c = parse_config("[gene_encoder]\nepochs = 4\n")
    assert a.sha256() == b.sha256() != c.sha256()


def test_output_dir_is_not_part_of_hash():
    assert parse_config("[run]\noutput_dir = a\n").sha256() == parse_config("[run]\noutput_dir = b\n").sha256()


def test_seed_reaches_every_stage():
    cfg = parse_config("[run]\nseed = 11\n")
    assert cfg.synth.seed == cfg.gene.seed == cfg.contrastive.seed == 11
    cfg = cfg.with_seed(3)
    assert (cfg.seed, cfg.synth.seed, cfg.gene.seed, cfg.contrastive.seed) == (3, 3, 3, 3)


@pytest.mark.parametrize(
    "text, path",
    [
        ("[gene_encoder]\nepochz = 3\n", "gene_encoder.epochz"),
        ("[gene_encoder]\nseed = 3\n", "gene_encoder.seed"),
        ("[eval]\nprotocl = louo\n", "eval.protocl"),
        ("[datasets]\npath = x\n", "datasets"),
        ("[DEFAULT]\nseed = 1\n", "DEFAULT"),
    ],
)
def test_unknown_names_rejected(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == path


@pytest.mark.parametrize(
    "text, path",
    [
        ("[gene_encoder]\nepochs = 0\n", "gene_encoder.epochs"),
        ("[gene_encoder]\nkind = vae\n", "gene_encoder.kind"),
        ("[gene_encoder]\nlabeled_fraction = 1.5\n", "gene_encoder.labeled_fraction"),
        ("[contrastive]\ntau = 0\n", "contrastive.tau"),
        ("[contrastive]\nloss_kind = XX\n", "contrastive.loss_kind"),
        ("[contrastive]\ngene_embedding = pca\n", "contrastive.gene_embedding"),
        ("[dataset]\ndispersion_range = 5, 2\n", "dataset.dispersion_range"),
        ("[dataset]\nbatch_effect_strength = -1\n", "dataset.batch_effect_strength"),
        ("[dataset]\ntop_k_genes = 0\n", "dataset.top_k_genes"),
        ("[eval]\nmethods = ours-scvi, bert\n", "eval.methods"),
        ("[eval]\nfinetune_mode = partial\n", "eval.finetune_mode"),
        ("[eval]\nprotocol = kfold\n", "eval.protocol"),
        ("[run]\nseed = -1\n", "run.seed"),
        ("[gene_encoder]\nepochs = three\n", "gene_encoder.epochs"),
        ("[gene_encoder]\nalpha = lots\n", "gene_encoder.alpha"),
    ],
)
def test_bad_values_name_their_key(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == path
    assert str(info.value).startswith(path + ":")


def test_inline_comments_are_stripped():
    cfg = parse_config("[gene_encoder]\nkind = scanvi   # semi-supervised\n[eval]\nmethods = clip, none # two\n")
    assert cfg.gene.kind == "scanvi"
    assert cfg.eval.methods == ["clip", "none"]


def test_alpha_empty_means_default():
    assert parse_config("[gene_encoder]\nalpha =\n").gene.alpha is None
    assert parse_config("[gene_encoder]\nalpha = 2.5\n").gene.alpha == 2.5


def test_output_root_precedence(monkeypatch):
    cfg = parse_config("")
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert cfg.output_root() == Path("stbac-runs")
    monkeypatch.setenv(OUTPUT_ROOT_ENV, "/env/root")
    assert cfg.output_root() == Path("/env/root")
    assert parse_config("[run]\noutput_dir = /cfg\n").output_root() == Path("/cfg")
    assert parse_config("[run]\noutput_dir = /cfg\n").output_root("/flag") == Path("/flag")


def test_runconfig_is_a_dataclass_default():
    assert RunConfig() == parse_config("")


# exit codes and prerequisites ---------------------------------------------------------


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, "[gene_encoder]\nepochz = 3\n")
    assert run_cli("generate", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "gene_encoder.epochz" in capsys.readouterr().err


def test_missing_config_file_is_config_error(tmp_path):
    assert run_cli("generate", "--config", tmp_path / "nope.ini", "--out", tmp_path / "o") == 2


def test_evaluate_without_gene_checkpoint_names_train_gene(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run_pipeline(cfg, tmp_path / "o", ["generate"])
    assert run_cli("evaluate", "--config", cfg, "--out", tmp_path / "o") == 3
    assert "train-gene" in capsys.readouterr().err


def test_evaluate_without_contrastive_checkpoint_names_train_contrastive(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run_pipeline(cfg, tmp_path / "o", ["generate", "train-gene"])
    assert run_cli("evaluate", "--config", cfg, "--out", tmp_path / "o") == 3
    assert "train-contrastive" in capsys.readouterr().err


def test_training_without_dataset_names_generate(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run_cli("train-gene", "--config", cfg, "--out", tmp_path / "o") == 3
    assert "generate" in capsys.readouterr().err


def test_report_without_results_names_evaluate(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run_cli("report", "--config", cfg, "--out", tmp_path / "o") == 3
    assert "evaluate" in capsys.readouterr().err


def test_embed_without_checkpoints_fails(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run_pipeline(cfg, tmp_path / "o", ["generate"])
    assert run_cli("embed", "--config", cfg, "--out", tmp_path / "o") == 3
    assert "train-gene" in capsys.readouterr().err


def test_corrupt_dataset_is_data_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run_pipeline(cfg, tmp_path / "o", ["generate"])
    counts = tmp_path / "o" / "dataset" / "counts.tsv"
    counts.write_text(counts.read_text().replace("\t1\n", "\t3.5\n", 1))
    assert run_cli("train-gene", "--config", cfg, "--out", tmp_path / "o") == 3
    assert "data error" in capsys.readouterr().err


def test_unwritable_output_is_data_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path)
    assert run_cli("generate", "--config", cfg, "--out", blocker / "sub") == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_is_numeric_failure(tmp_path, capsys):
    cfg = write_config(tmp_path, SMOKE.replace("[gene_encoder]\n", "[gene_encoder]\nlr = 1e12\n"))
    run_pipeline(cfg, tmp_path / "o", ["generate"])
    assert run_cli("train-gene", "--config", cfg, "--out", tmp_path / "o") == 4
    assert "numeric failure" in capsys.readouterr().err


def test_checkpoint_protocol_refuses_scanvi(tmp_path, capsys):
    cfg = write_config(tmp_path, SMOKE.replace("[gene_encoder]\n", "[gene_encoder]\nkind = scanvi\n"))
    run_pipeline(cfg, tmp_path / "o", ["generate", "train-gene", "train-contrastive"])
    assert run_cli("evaluate", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "eval.protocol" in capsys.readouterr().err


def test_mismatched_checkpoint_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run_pipeline(cfg, tmp_path / "o", ["generate", "train-gene"])
    other = write_config(tmp_path, SMOKE.replace("n_latent = 8", "n_latent = 4"), "other.ini")
    assert run_cli("train-contrastive", "--config", other, "--out", tmp_path / "o") == 2
    assert "rerun train-gene" in capsys.readouterr().err


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "envroot"))
    cfg = write_config(tmp_path)
    assert run_cli("generate", "--config", cfg) == 0
    assert (tmp_path / "envroot" / "dataset" / "manifest.txt").exists()


# generate ---------------------------------------------------------------------------


def test_generate_prints_manifest_and_round_trips(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run_cli("generate", "--config", cfg, "--out", tmp_path / "o") == 0
    out = capsys.readouterr().out
    ds = load_dataset(tmp_path / "o" / "dataset", top_k_genes=None)
    manifest = read_manifest(tmp_path / "o" / "dataset")
    assert int(manifest["n_spots"]) == ds.n_spots == 3 * 60
    assert "requested 180, dropped 0" in out
    assert manifest["checksum"] in out
    truth, meta = read_checkpoint(tmp_path / "o" / "ground_truth.stck")
    assert truth["latent"].shape == (180, SynthConfig().latent_dim_true)
    np.testing.assert_array_equal(truth["classes"], ds.labels)
    assert meta["command"] == "generate"


def test_generate_twice_gives_identical_checksums(tmp_path):
    cfg = write_config(tmp_path)
    for d in ("a", "b"):
        assert run_cli("generate", "--config", cfg, "--out", tmp_path / d) == 0
    assert read_manifest(tmp_path / "a" / "dataset")["checksum"] == read_manifest(tmp_path / "b" / "dataset")["checksum"]


def test_seed_flag_changes_data_and_header(tmp_path):
    cfg = write_config(tmp_path)
    assert run_cli("generate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run_cli("generate", "--config", cfg, "--out", tmp_path / "b", "--seed", 5) == 0
    ma, mb = read_manifest(tmp_path / "a" / "dataset"), read_manifest(tmp_path / "b" / "dataset")
    assert ma["checksum"] != mb["checksum"]
    assert "# seed=5" in (tmp_path / "b" / "dataset" / "manifest.txt").read_text()


# end to end -----------------------------------------------------------------------------


@pytest.mark.slow
def test_smoke_pipeline_produces_results(pipeline_out):
    _, out = pipeline_out
    lines = [ln for ln in (out / "results.tsv").read_text().splitlines() if ln and not ln.startswith("#")]
    assert lines[0].split("\t")[:4] == ["fold", "seed", "method", "loss_kind"]
    rows = [ln.split("\t") for ln in lines[1:]]
    assert len(rows) == 3 * 2
    assert {r[0] for r in rows} == {"0", "1", "2"}
    assert all(0.0 <= float(r[4]) <= 1.0 for r in rows)
    for source in ("image", "gene", "latent"):
        assert (out / "embeddings" / f"{source}.tsv").stat().st_size > 0
    assert "ours-scvi" in (out / "report.txt").read_text()


@pytest.mark.slow
def test_provenance_header_in_every_output(pipeline_out):
    cfg, out = pipeline_out
    sha = load_config(cfg).sha256()
    files = [p for p in out.rglob("*") if p.is_file()]
    assert len(files) >= 14
    for p in files:
        if p.suffix == ".stck":
            _, meta = read_checkpoint(p)
            fields = meta
        else:
            head = [ln[2:] for ln in p.read_text().splitlines() if ln.startswith("# ")]
            fields = dict(ln.split("=", 1) for ln in head if "=" in ln)
        assert fields["config_sha256"] == sha, p
        assert fields["seed"] == "0", p
        assert fields["version"] == __version__, p


@pytest.mark.slow
def test_rerun_is_byte_identical(pipeline_out, tmp_path):
    cfg, out = pipeline_out
    run_pipeline(cfg, tmp_path / "again")
    first, second = _files(out), _files(tmp_path / "again")
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name


@pytest.mark.slow
def test_rerun_in_place_is_idempotent(pipeline_out):
    cfg, out = pipeline_out
    before = _files(out)
    assert run_cli("evaluate", "--config", cfg, "--out", out) == 0
    assert _files(out) == before


@pytest.mark.slow
def test_louo_protocol_needs_no_checkpoints(tmp_path):
    text = SMOKE.replace("n_seeds = 2", "n_seeds = 1\nprotocol = louo\nmethods = ours-scvi, clip")
    cfg = write_config(tmp_path, text)
    run_pipeline(cfg, tmp_path / "o", ["generate", "evaluate"])
    rows = [ln for ln in (tmp_path / "o" / "results.tsv").read_text().splitlines() if ln[:1].isdigit()]
    assert len(rows) == 3 * 2
    assert not (tmp_path / "o" / "gene_encoder.stck").exists()


@pytest.mark.slow
def test_log_count_embedding_skips_gene_checkpoint(tmp_path):
    cfg = write_config(tmp_path, SMOKE.replace("[contrastive]\n", "[contrastive]\ngene_embedding = log-counts\n"))
    run_pipeline(cfg, tmp_path / "o", ["generate", "train-contrastive", "evaluate", "embed"])
    _, meta = read_checkpoint(tmp_path / "o" / "contrastive.stck")
    assert meta["method"] == "clip"
    assert not (tmp_path / "o" / "embeddings" / "latent.tsv").exists()


def test_console_script_help(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for cmd in PIPELINE:
        assert cmd in out


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


def test_relative_out_resolves_against_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = write_config(tmp_path)
    assert run_cli("generate", "--config", cfg, "--out", "rel") == 0
    assert os.path.isdir(tmp_path / "rel" / "dataset")

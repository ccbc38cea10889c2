import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score

import stbac.evaluation as ev
from stbac.contrastive import ContrastiveConfig, build_image_encoder
from stbac.dataio import UNLABELED, SynthConfig, generate_synthetic
from stbac.evaluation import (
    EmbeddingSet,
    EvalConfig,
    FineTunedClassifier,
    accuracy,
    confusion_matrix,
    export_embeddings,
    format_results,
    knn_batch_mixing,
    knn_class_accuracy,
    macro_f1,
    mixing_entropy,
    pca_embedding,
    per_class_f1,
    run_louo,
)
from stbac.gene_encoder import GeneEncoderConfig
from stbac.tensor import RngStreams
from stbac.tensor.checkpoint import dumps


# ---- hand-computed oracle


def oracle_scores(preds, labels):
    classes = sorted(set(labels))
    f1s = []
    for c in classes:
        tp = sum(1 for p, l in zip(preds, labels) if p == c and l == c)
        fp = sum(1 for p, l in zip(preds, labels) if p == c and l != c)
        fn = sum(1 for p, l in zip(preds, labels) if p != c and l == c)
        f1s.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    acc = sum(1 for p, l in zip(preds, labels) if p == l) / len(labels)
    return acc, sum(f1s) / len(f1s)


def test_worked_example():
    preds, labels = [0, 0, 1, 2], [0, 1, 1, 2]
    assert accuracy(preds, labels) == 0.75
    assert np.allclose(per_class_f1(preds, labels), [2 / 3, 2 / 3, 1.0])
    assert abs(macro_f1(preds, labels) - 0.7777777777777778) < 1e-15


def test_perfect_and_all_wrong():
    assert accuracy([1, 0, 2], [1, 0, 2]) == 1.0 and macro_f1([1, 0, 2], [1, 0, 2]) == 1.0
    assert accuracy([1, 0, 1], [0, 1, 0]) == 0.0 and macro_f1([1, 0, 1], [0, 1, 0]) == 0.0


def test_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        accuracy([0, 1], [0])
    with pytest.raises(ValueError, match="length mismatch"):
        macro_f1([0, 1], [0])


def test_absent_class_not_averaged():
    # class 2 is predicted but never true: it does not enter the mean
    assert macro_f1([0, 2], [0, 1], n_classes=3) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5).flatmap(lambda c: st.tuples(
    st.just(c),
    st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=30),
)))
def test_metrics_match_oracles(case):
    C, pairs = case
    preds, labels = zip(*pairs)
    acc, f1 = oracle_scores(preds, labels)
    assert accuracy(preds, labels) == acc
    assert abs(macro_f1(preds, labels, C) - f1) < 1e-12
    ref = f1_score(labels, preds, labels=sorted(set(labels)), average="macro", zero_division=0)
    assert abs(macro_f1(preds, labels, C) - ref) < 1e-12
    M = confusion_matrix(preds, labels, C)
    assert np.array_equal(M.sum(axis=1), np.bincount(labels, minlength=C))
    assert np.trace(M) / M.sum() == accuracy(preds, labels)
    assert 0.0 <= macro_f1(preds, labels, C) <= 1.0


# ---- mixing


def test_mixing_entropy_values():
    assert mixing_entropy([5, 5], 2) == pytest.approx(1.0, abs=1e-15)
    assert abs(mixing_entropy([7, 3], 2) - 0.881291) < 1e-6
    assert mixing_entropy([10, 0], 2) == 0.0


def _emb(X, batch, labels=None, source="latent"):
    n = len(X)
    labels = np.zeros(n, int) if labels is None else labels
    return EmbeddingSet(X, [str(i) for i in range(n)], batch, labels, source)


def test_separated_clusters_have_zero_mixing():
    X = np.vstack([rand(20, 2, 0), rand(20, 2, 1) + 100])
    assert knn_batch_mixing(_emb(X, np.repeat([0, 1], 20)), k=5) == 0.0


def test_paired_pattern_mixing_is_one():
    # batches 0,0,1,1,0,0,...: every point's two nearest neighbours span both batches
    X = np.arange(40, dtype=float)[:, None] * np.ones((1, 2))
    b = (np.arange(40) // 2) % 2
    assert knn_batch_mixing(_emb(X, b), k=2) == 1.0


def rand(n, d, seed):
    return np.random.default_rng(seed).standard_normal((n, d))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(-10, 10), st.floats(0, 2 * math.pi))
def test_mixing_rigid_motion_invariant(seed, shift, angle):
    X = rand(30, 2, seed)
    b = np.random.default_rng(seed).integers(0, 3, 30)
    b[:3] = [0, 1, 2]
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    a = knn_batch_mixing(_emb(X, b), 5)
    c = knn_batch_mixing(_emb(X @ R.T + shift, b), 5)
    assert abs(a - c) < 1e-12


def test_mixing_usage_errors():
    with pytest.raises(ValueError, match="two batches"):
        knn_batch_mixing(_emb(rand(5, 2, 0), np.zeros(5, int)), 2)
    with pytest.raises(ValueError, match="k must"):
        knn_batch_mixing(_emb(rand(5, 2, 0), np.arange(5) % 2), 5)


def test_class_knn_accuracy():
    X = np.vstack([rand(10, 2, 0), rand(10, 2, 1) + 50])
    labels = np.repeat([0, 1], 10)
    labels[0] = UNLABELED
    assert knn_class_accuracy(_emb(X, np.zeros(20, int), labels), 3) == 1.0


def test_embedding_set_validation():
    with pytest.raises(ValueError, match="equal lengths"):
        EmbeddingSet(np.zeros((3, 2)), ["a"], [0, 0, 0], [0, 0, 0], "image")
    with pytest.raises(ValueError, match="non-finite"):
        EmbeddingSet(np.full((1, 2), np.nan), ["a"], [0], [0], "image")
    with pytest.raises(ValueError, match="source"):
        EmbeddingSet(np.zeros((1, 2)), ["a"], [0], [0], "text")


# ---- export


def test_pca_matches_eigendecomposition_oracle():
    X = rand(50, 5, 3) @ np.diag([5, 3, 2, 1, 0.5])
    Xc = X - X.mean(0)
    w, V = np.linalg.eigh(Xc.T @ Xc)
    V = V[:, np.argsort(w)[::-1][:2]]
    ref = Xc @ V
    got = pca_embedding(X, 2)
    for j in range(2):
        assert min(np.max(np.abs(got[:, j] - ref[:, j])), np.max(np.abs(got[:, j] + ref[:, j]))) < 1e-8
    assert got[:, 0].var() >= got[:, 1].var()


def test_pca_sign_convention():
    X = rand(30, 4, 1)
    V = np.linalg.lstsq(X - X.mean(0), pca_embedding(X, 2), rcond=None)[0]
    for j in range(2):
        assert V[np.argmax(np.abs(V[:, j])), j] > 0
    assert np.array_equal(pca_embedding(X, 2), pca_embedding(X.copy(), 2))


def test_two_d_projection_is_rigid():
    X = rand(25, 2, 2) @ np.diag([3.0, 1.0])
    P = pca_embedding(X, 2)
    d = lambda A: np.linalg.norm(A[:, None] - A[None], axis=-1)
    assert np.max(np.abs(d(X) - d(P))) < 1e-9


def test_export_file(tmp_path):
    X = rand(6, 3, 0)
    emb = EmbeddingSet(X, [f"s{i}" for i in range(6)], np.arange(6) % 2, [0, 1, -1, 0, 1, 2], "image")
    text = export_embeddings(emb, tmp_path / "e.tsv", header="seed=1")
    lines = (tmp_path / "e.tsv").read_text().splitlines()
    assert lines[0] == "# seed=1"
    assert lines[1] == "spot_id\tpc1\tpc2\tbatch\tlabel\tsource"
    first = lines[2].split("\t")
    assert first[0] == "s0" and first[3:] == ["0", "0", "image"]
    assert len(lines) == 8 and text == (tmp_path / "e.tsv").read_text()
    with pytest.raises(ValueError):
        export_embeddings(EmbeddingSet(X[:, :1], emb.spot_ids, emb.batch_ids, emb.labels, "image"))


# ---- fine-tuning


def encoder(dim=4, seed=0, out=6):
    return build_image_encoder(dim, ContrastiveConfig(image_hidden=[16], image_out=out, dropout_rate=0.0), RngStreams(seed))


def test_single_sample_memorised():
    x, y = rand(1, 4, 0), np.array([2])
    clf = FineTunedClassifier(encoder(), n_classes=3, epochs=200, lr=1e-2).fit(x, y)
    assert clf.predict(x)[0] == 2


def test_head_only_leaves_encoder_unchanged():
    enc = encoder()
    before = dumps(enc.state_dict())
    clf = FineTunedClassifier(enc, n_classes=2, mode="head", epochs=5).fit(rand(20, 4, 1), np.arange(20) % 2)
    assert dumps(clf.encoder_.state_dict()) == before
    assert dumps(enc.state_dict()) == before


def test_full_mode_updates_copy_not_original():
    enc = encoder()
    before = dumps(enc.state_dict())
    clf = FineTunedClassifier(enc, n_classes=2, epochs=3).fit(rand(20, 4, 1), np.arange(20) % 2)
    assert dumps(enc.state_dict()) == before
    assert dumps(clf.encoder_.state_dict()) != before


def test_separable_data_fit_perfectly():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 90)
    centres = np.array([[6, 0, 0, 0], [0, 6, 0, 0], [0, 0, 6, 0]], float)
    X = centres[y] + 0.3 * rng.standard_normal((90, 4))
    clf = FineTunedClassifier(encoder(), n_classes=3, epochs=60, lr=1e-2, batch_size=16).fit(X, y)
    assert clf.score(X, y) == 1.0


def test_argmax_ties_go_to_lowest_index():
    clf = FineTunedClassifier(encoder(), n_classes=3, epochs=1).fit(rand(3, 4, 0), [0, 1, 2])
    clf.head_.weight.data[:] = 0.0
    clf.head_.bias.data[:] = [0.0, 1.0, 1.0]
    assert np.all(clf.predict(rand(5, 4, 1)) == 1)


def test_finetune_errors():
    with pytest.raises(ValueError, match="no labeled"):
        FineTunedClassifier(encoder()).fit(np.zeros((0, 4)), np.zeros(0, int))
    with pytest.raises(ValueError, match="mode"):
        FineTunedClassifier(encoder(), mode="last").fit(rand(2, 4, 0), [0, 1])
    with pytest.raises(ValueError, match=r"\[0, 2\)"):
        FineTunedClassifier(encoder(), n_classes=2).fit(rand(2, 4, 0), [0, 2])


def test_eval_config_validation():
    with pytest.raises(ValueError, match="method"):
        EvalConfig(methods=["ours"])
    with pytest.raises(ValueError, match="finetune_mode"):
        EvalConfig(finetune_mode="partial")


# ---- protocol


TINY_GENE = GeneEncoderConfig(n_latent=4, n_hidden=16, epochs=2, batch_size=64)
TINY_CON = ContrastiveConfig(d_proj=16, image_hidden=[16], image_out=8, epochs=2, batch_size=64)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_synthetic(SynthConfig(n_batches=3, spots_per_batch=40, n_genes=30, n_classes=3,
                                          image_feature_dim=8, labeled_fraction=1.0, seed=4))[0]


def test_louo_shape_and_reproducibility(tiny_ds):
    cfg = EvalConfig(n_seeds=2, finetune_epochs=2, methods=["ours-scvi", "ours-scanvi", "clip", "none"])
    a = run_louo(tiny_ds, TINY_GENE, TINY_CON, cfg)
    b = run_louo(tiny_ds, TINY_GENE, TINY_CON, cfg)
    assert len(a) == 3 * 2 * 4
    assert sorted({r.fold for r in a}) == [0, 1, 2]
    assert all(x.equals(y) for x, y in zip(a, b))
    for r in a:
        assert 0 <= r.accuracy <= 1 and 0 <= r.macro_f1 <= 1
        assert r.accuracy == np.trace(r.confusion) / r.confusion.sum()
        assert np.array_equal(r.confusion.sum(axis=1), np.bincount(tiny_ds.labels[tiny_ds.batch_ids == r.fold], minlength=3))


def test_held_out_labels_never_reach_training(tiny_ds, monkeypatch):
    seen = []
    real_gene, real_ft = ev.train_gene_encoder, ev.finetune_classify

    def gene(ds, cfg):
        seen.append(("gene", ds.labels.copy(), ds.batch_ids.copy()))
        return real_gene(ds, cfg)

    def ft(enc, X, y, *a, **k):
        seen.append(("finetune", X.copy()))
        return real_ft(enc, X, y, *a, **k)

    guard_reads = []
    real_read = ev.FoldView.test_labels

    def read(self):
        guard_reads.append(len(seen))
        return real_read(self)

    monkeypatch.setattr(ev, "train_gene_encoder", gene)
    monkeypatch.setattr(ev, "finetune_classify", ft)
    monkeypatch.setattr(ev.FoldView, "test_labels", read)
    run_louo(tiny_ds, TINY_GENE, TINY_CON, EvalConfig(n_seeds=1, finetune_epochs=1, methods=["ours-scanvi"]))
    gene_calls = [s for s in seen if s[0] == "gene"]
    assert len(gene_calls) == 3
    for k, (_, labels, batch) in enumerate(gene_calls):
        assert np.all(labels[batch == k] == UNLABELED)
        assert np.all(labels[batch != k] != UNLABELED)
    for k, (_, X) in enumerate(s for s in seen if s[0] == "finetune"):
        test_rows = tiny_ds.image_features[tiny_ds.batch_ids == k]
        assert not any((X == row).all(axis=1).any() for row in test_rows)
    # each fold reads its held-out labels once, after that fold's training calls
    assert guard_reads == [2, 4, 6]


def test_fold_guard_is_relocked(tiny_ds):
    from stbac.dataio import LabelAccessError, fold_views

    fold = fold_views(tiny_ds)[0]
    ev.evaluate_fold(fold, "none", 0, TINY_GENE, TINY_CON, EvalConfig(n_seeds=1, finetune_epochs=1))
    assert fold.locked and fold.test_label_reads == 1
    with pytest.raises(LabelAccessError):
        fold.test_labels()


def test_results_text(tiny_ds):
    res = run_louo(tiny_ds, TINY_GENE, TINY_CON, EvalConfig(n_seeds=2, finetune_epochs=1, methods=["none", "clip"]))
    text = format_results(res, header="config_sha256=abc")
    lines = text.splitlines()
    assert lines[0] == "# config_sha256=abc"
    assert lines[1] == "fold\tseed\tmethod\tloss_kind\taccuracy\tmacro_f1\tbatch_mixing"
    assert len([l for l in lines if not l.startswith("#")]) == 1 + 12
    summary = [l for l in lines if l.startswith("# none") or l.startswith("# clip")]
    assert len(summary) == 2 and all(l.endswith("\t6") for l in summary)

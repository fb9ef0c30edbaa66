"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion
lines. The two checks that need the real digit-image IDX files (5 and the
full-load half of 8) look for them under $MNIST_DIR or ./data/mnist and
skip with an explicit message when absent; everything else is
self-contained.
"""
import contextlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from localtriplet.cli import main as cli_main
from localtriplet.data import Dataset, load_mnist_idx, make_blobs, split, stratified_subset
from localtriplet.knn import build_index, choose_k, knn_classify, query_knn, take_snapshot
from localtriplet.losses import LossWeights, combined_loss, fixed_margin_loss, local_margin_loss
from localtriplet.mathops import pairwise_sq_dists
from localtriplet.network import (
    EmbeddingNet,
    SoftmaxHead,
    conv2d,
    dense,
    flatten,
    maxpool2,
    mlp,
    mnist_cnn,
    softmax_head_loss,
)
from localtriplet.training import TrainConfig, evaluate_knn, train
from localtriplet.verify import check_optimal_condition, corollary_margin_check, purity_check
from oracles import brute_classify, brute_knn, rel_err


@contextlib.contextmanager
def criterion(name):
    try:
        yield
    except pytest.skip.Exception as err:
        print(f"[ACCEPTANCE] {name}: SKIP ({err})", flush=True)
        raise
    except BaseException:
        print(f"[ACCEPTANCE] {name}: FAIL", flush=True)
        raise
    print(f"[ACCEPTANCE] {name}: PASS", flush=True)


def _mnist_dir():
    candidates = [os.environ.get("MNIST_DIR"), "data/mnist"]
    names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    for cand in candidates:
        if not cand:
            continue
        base = Path(cand)
        found = {}
        for name in names:
            for p in (base / name, base / (name + ".gz")):
                if p.exists():
                    found[name] = p
                    break
        if len(found) == len(names):
            return found
    return None


GRAD_TOL = 1e-4
FD_H = 1e-4


def _fd_check_params(net, x, rng, coords_per_param=3, tol=GRAD_TOL):
    emb, caches = net.forward(x)
    grads = net.backward(caches, np.ones_like(emb))
    for p, g in zip(net.params, grads):
        for i in rng.choice(p.size, size=min(coords_per_param, p.size), replace=False):
            orig = p.flat[i]
            p.flat[i] = orig + FD_H
            up = float(np.sum(net.forward(x, want_cache=False)[0]))
            p.flat[i] = orig - FD_H
            down = float(np.sum(net.forward(x, want_cache=False)[0]))
            p.flat[i] = orig
            assert rel_err(g.flat[i], (up - down) / (2 * FD_H)) <= tol


def test_criterion_1_gradient_suite():
    with criterion("1 gradient-suite"):
        rng = np.random.default_rng(1001)

        # dense
        for _ in range(50):
            net = EmbeddingNet((4,), [dense(3, activation="none")],
                               seed=int(rng.integers(1 << 30)))
            _fd_check_params(net, rng.standard_normal((2, 4)), rng)
        # conv (backprop through the full conv path)
        for _ in range(50):
            net = EmbeddingNet((4, 4, 2), [conv2d(2, activation="none"), flatten()],
                               seed=int(rng.integers(1 << 30)))
            _fd_check_params(net, rng.standard_normal((2, 4, 4, 2)), rng)
        # pool (conv parameters below a pooling layer)
        for _ in range(50):
            net = EmbeddingNet((4, 4, 1),
                               [conv2d(2, activation="none"), maxpool2(), flatten()],
                               seed=int(rng.integers(1 << 30)))
            x = rng.standard_normal((2, 4, 4, 1))
            _fd_check_params(net, x, rng)
        # leaky ReLU (pre-activations kept away from the kink)
        done = 0
        while done < 50:
            net = EmbeddingNet((4,), [dense(3, activation="leaky_relu")],
                               seed=int(rng.integers(1 << 30)))
            x = rng.standard_normal((2, 4))
            w, b = net.params
            if np.min(np.abs(x @ w + b)) < 1e-2:
                continue
            _fd_check_params(net, x, rng)
            done += 1

        # fixed-margin triplet loss
        done = 0
        while done < 50:
            xa, xp, xn = rng.standard_normal((3, 5))
            m = float(rng.uniform(0.0, 2.0))
            arg = np.sum((xa - xp) ** 2) - np.sum((xa - xn) ** 2) + m
            if abs(arg) < 1e-2:
                continue
            res = fixed_margin_loss(xa, xp, xn, m)
            for vec, grad, which in ((xa, res.grad_a, 0), (xp, res.grad_p, 1),
                                     (xn, res.grad_n, 2)):
                for i in range(5):
                    parts = [xa.copy(), xp.copy(), xn.copy()]
                    parts[which][i] += FD_H
                    up = fixed_margin_loss(*parts, m).value
                    parts[which][i] -= 2 * FD_H
                    down = fixed_margin_loss(*parts, m).value
                    assert rel_err(grad[i], (up - down) / (2 * FD_H)) <= GRAD_TOL
            done += 1

        # local-margin triplet loss
        done = 0
        while done < 50:
            xa, xp, xn = rng.standard_normal((3, 5))
            d_pos = float(rng.uniform(0.0, 1.5))
            arg = np.sum((xa - xp) ** 2) - np.sum((xa - xn) ** 2) + 3.0 * d_pos + 1e-3
            if abs(arg) < 1e-2:
                continue
            res = local_margin_loss(xa, xp, xn, d_pos, 3.0, 1e-3)
            for vec, grad, which in ((xa, res.grad_a, 0), (xp, res.grad_p, 1),
                                     (xn, res.grad_n, 2)):
                for i in range(5):
                    parts = [xa.copy(), xp.copy(), xn.copy()]
                    parts[which][i] += FD_H
                    up = local_margin_loss(*parts, d_pos, 3.0, 1e-3).value
                    parts[which][i] -= 2 * FD_H
                    down = local_margin_loss(*parts, d_pos, 3.0, 1e-3).value
                    assert rel_err(grad[i], (up - down) / (2 * FD_H)) <= GRAD_TOL
            done += 1

        # combined batch loss
        w = LossWeights(w_lm=50.0, w_ms=1.0, w_md=1.0, w_ss=0.5, w_sd=1.0)
        done = 0
        while done < 50:
            b, dim = 4, 3
            xa, xp, xn = rng.standard_normal((3, b, dim))
            d_pos = rng.uniform(0.0, 1.0, size=b)
            args = (np.sum((xa - xp) ** 2, 1) - np.sum((xa - xn) ** 2, 1)
                    + 3.0 * d_pos + 1e-3)
            if np.any(np.abs(args) < 1e-2):
                continue
            _, ga, gp, gn, _, _ = combined_loss(xa, xp, xn, w, d_ak_pos=d_pos)
            packed = [xa, xp, xn]
            grads = [ga, gp, gn]
            for which in range(3):
                for i in rng.choice(b * dim, size=4, replace=False):
                    parts = [a.copy() for a in packed]
                    parts[which].flat[i] += FD_H
                    up = combined_loss(*parts, w, d_ak_pos=d_pos)[0]
                    parts[which].flat[i] -= 2 * FD_H
                    down = combined_loss(*parts, w, d_ak_pos=d_pos)[0]
                    assert rel_err(grads[which].flat[i], (up - down) / (2 * FD_H)) <= GRAD_TOL
            done += 1

        # softmax head
        for _ in range(50):
            head = SoftmaxHead(4, 3, seed=int(rng.integers(1 << 30)))
            emb = rng.standard_normal((3, 4))
            labels = rng.integers(0, 3, size=3)
            _, grad_emb, (grad_w, grad_b) = softmax_head_loss(emb, labels, head)
            for i in rng.choice(emb.size, size=3, replace=False):
                e2 = emb.copy()
                e2.flat[i] += FD_H
                up = softmax_head_loss(e2, labels, head)[0]
                e2.flat[i] -= 2 * FD_H
                down = softmax_head_loss(e2, labels, head)[0]
                assert rel_err(grad_emb.flat[i], (up - down) / (2 * FD_H)) <= GRAD_TOL
            for i in rng.choice(head.w.size, size=3, replace=False):
                orig = head.w.flat[i]
                head.w.flat[i] = orig + FD_H
                up = softmax_head_loss(emb, labels, head)[0]
                head.w.flat[i] = orig - FD_H
                down = softmax_head_loss(emb, labels, head)[0]
                head.w.flat[i] = orig
                assert rel_err(grad_w.flat[i], (up - down) / (2 * FD_H)) <= GRAD_TOL


def test_criterion_2_knn_oracle_equivalence():
    with criterion("2 knn-oracle-equivalence"):
        rng = np.random.default_rng(2002)
        for trial in range(200):
            n = int(rng.integers(2, 1001))
            dim = int(rng.integers(1, 33))
            k = int(rng.integers(1, min(50, n) + 1))
            pts = rng.standard_normal((n, dim))
            if trial % 3 == 0:
                pts = np.round(pts, 1)              # force ties
            labels = rng.integers(0, 5, size=n)
            index = build_index(pts, labels)
            for _ in range(2):
                q = pts[int(rng.integers(n))] if rng.random() < 0.3 \
                    else rng.standard_normal(dim)
                got = query_knn(index, q, k)
                want = brute_knn(pts, q, k)
                assert got == want
                pred, post = knn_classify(index, q, k)
                assert pred == brute_classify(pts, labels, q, k)
                assert sum(post.values()) == 1
                assert post == {c: __import__("fractions").Fraction(
                    sum(1 for i, _ in want if labels[i] == c), k)
                    for c in set(int(labels[i]) for i, _ in want)}


def _euclid_worst_hinges(emb, labels, k, c_b, eps, margin_kind, m=None):
    """Per-anchor worst-case hinge in the verifier's Euclidean metric."""
    index = build_index(emb, labels, "euclidean")
    snap = take_snapshot(index, k)
    dist = np.sqrt(pairwise_sq_dists(np.asarray(emb, dtype=np.float64)))
    np.fill_diagonal(dist, np.inf)
    hinges = np.empty(emb.shape[0])
    for a in range(emb.shape[0]):
        same = labels == labels[a]
        row = dist[a]
        maxp = float(np.max(row[same & np.isfinite(row)]))
        minn = float(np.min(row[~same]))
        margin = (c_b * snap.d_ak_pos[a] + eps) if margin_kind == "local" else m
        hinges[a] = max(0.0, maxp - minn + margin)
    return hinges


def test_criterion_3_purity_guarantee():
    with criterion("3 purity-guarantee"):
        ds = make_blobs(4, 300, 8, spacing=0.3, std=0.03, seed=61)
        train_ds, query_ds, _ = split(ds, 2 / 3, 1 / 3, seed=62)
        assert train_ds.n == 800 and query_ds.n == 400
        net = EmbeddingNet((8,), mlp(32, 16), seed=63)
        weights = LossWeights(w_lm=1000.0, w_ms=10.0, w_md=1.0, w_ss=0.0, w_sd=1.0)
        cfg = TrainConfig(method="lm_mining", e_max=250, convergence_eps=0.0,
                          seed=64, lr=5e-3, weights=weights)
        net, reports, _ = train(net, cfg, train_ds)

        # trained until the hinge-active fraction fell below 1%
        assert reports[0].hinge_active_fraction > 0.01
        assert reports[-1].hinge_active_fraction < 0.01

        k = choose_k(train_ds.n)
        emb = net.embed(train_ds.samples).astype(np.float64)
        cond = check_optimal_condition(emb, train_ds.labels, k, c_b=3.0, eps=1e-3)
        assert cond.skipped_anchors == []

        # anchors whose worst-case Euclidean hinge is inactive must not
        # violate the optimal condition beyond eps
        hinges = _euclid_worst_hinges(emb, train_ds.labels, k, 3.0, 1e-3, "local")
        residual_by_anchor = {v.anchor: v.residual for v in cond.violations}
        for a in np.flatnonzero(hinges == 0.0):
            assert residual_by_anchor.get(int(a), 0.0) <= 1e-3

        purity = purity_check(emb, train_ds.labels,
                              net.embed(query_ds.samples).astype(np.float64), k)
        assert purity.n_queries == 400
        non_outliers = purity.n_queries - purity.outlier_count
        assert purity.pure_count / non_outliers >= 0.99
        # guarantee as test: with no violations at all, purity must be total
        if not cond.violations:
            assert purity.pure_count == non_outliers
        # the calibrated run genuinely reaches the optimal condition, so
        # the implication above is exercised non-vacuously
        assert cond.violations == []


def test_criterion_4_fixed_margin_guarantee():
    with criterion("4 fixed-margin-guarantee"):
        m = 5.0
        ds = make_blobs(4, 300, 8, spacing=0.5, std=0.05, seed=71)
        train_ds, query_ds, _ = split(ds, 2 / 3, 1 / 3, seed=72)
        net = EmbeddingNet((8,), mlp(32, 16), seed=73)
        weights = LossWeights(w_lm=1000.0, w_ms=10.0, w_md=1.0, w_ss=0.0,
                              w_sd=1.0, fixed_margin_m=m)
        cfg = TrainConfig(method="mm", e_max=400, convergence_eps=0.0,
                          seed=74, lr=1e-2, weights=weights)
        net, reports, _ = train(net, cfg, train_ds)

        k = choose_k(train_ds.n)
        emb = net.embed(train_ds.samples).astype(np.float64)
        hinges = _euclid_worst_hinges(emb, train_ds.labels, k, 3.0, 1e-3,
                                      "fixed", m=m)
        assert np.all(hinges == 0.0), "all fixed-margin hinges must be inactive"
        sufficient, max_d_ak = corollary_margin_check(emb, train_ds.labels, k, m)
        assert sufficient, f"margin {m} must exceed 3 * max d_ak = {3 * max_d_ak}"

        purity = purity_check(emb, train_ds.labels,
                              net.embed(query_ds.samples).astype(np.float64), k)
        non_outliers = purity.n_queries - purity.outlier_count
        assert purity.pure_count == non_outliers


def _train_mnist_method(method, train_ds, seed, batch_size, epochs):
    net = EmbeddingNet((28, 28, 1), mnist_cnn(), seed=seed, dtype="float32")
    cfg = TrainConfig(method=method, e_max=epochs, convergence_eps=0.0,
                      seed=seed + 1, batch_size=batch_size)
    return train(net, cfg, train_ds)


@pytest.mark.slow
def test_criterion_5_desk_scale_method_ordering():
    with criterion("5 desk-scale-method-ordering"):
        files = _mnist_dir()
        if files is None:
            pytest.skip("MNIST IDX files not found; set MNIST_DIR or place them "
                        "under data/mnist (see README)")
        full = load_mnist_idx(files["train-images-idx3-ubyte"],
                              files["train-labels-idx1-ubyte"])
        test_full = load_mnist_idx(files["t10k-images-idx3-ubyte"],
                                   files["t10k-labels-idx1-ubyte"])
        train_ds = stratified_subset(full, 5000, seed=501)
        test_ds = stratified_subset(test_full, 1000, seed=502)
        k = choose_k(train_ds.n)
        assert k == 71

        accs = {}
        nets = {}
        # hard mining gets a longer budget (still <= 30) so its batch-32
        # degradation has room to develop
        for method, batch, epochs in (("lm", 128, 8), ("lm_mining", 128, 8),
                                      ("mm_hardmin", 32, 24)):
            net, reports, _ = _train_mnist_method(method, train_ds, 503, batch, epochs)
            acc, _, _ = evaluate_knn(net, train_ds, test_ds, k)
            accs[method] = acc
            nets[method] = (net, reports)
            print(f"  [criterion 5] {method}: accuracy {acc:.4f}", flush=True)

        assert accs["lm"] >= 0.90
        assert accs["lm_mining"] >= 0.90
        best = max(accs["lm"], accs["lm_mining"])
        assert accs["mm_hardmin"] <= best - 0.05

        # rerun the cheapest method with the same seed: identical results
        net2, reports2, _ = _train_mnist_method("mm_hardmin", train_ds, 503, 32, 24)
        acc2, _, _ = evaluate_knn(net2, train_ds, test_ds, k)
        assert acc2 == accs["mm_hardmin"]
        assert reports2 == nets["mm_hardmin"][1]
        assert all(np.array_equal(a, b) for a, b in
                   zip(net2.params, nets["mm_hardmin"][0].params))


def test_criterion_6_choose_k_reference_values():
    with criterion("6 choose-k-values"):
        assert choose_k(54000) == 233
        assert choose_k(45000) == 213
        assert choose_k(273) == 17
        # documented discrepancy: the source text lists 15 for n=180, but
        # ceil(sqrt(180)) = 14; the formula's output is asserted
        assert choose_k(180) == 14


def test_criterion_7_cli_determinism(tmp_path):
    with criterion("7 cli-determinism"):
        args = ["--data", "blobs", "--classes", "3", "--per-class", "60",
                "--dim", "6", "--spacing", "12", "--std", "1.0",
                "--data-seed", "701", "--epochs", "3", "--convergence-eps", "0",
                "--seed", "702", "--lr", "0.001", "--method", "lm_mining"]
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli_main(["train", *args, "--out-dir", str(out)]) == 0
            assert cli_main(["eval", "--run-dir", str(out)]) == 0
            outs.append(out)
        a, b = outs
        assert (a / "epochs.jsonl").read_bytes() == (b / "epochs.jsonl").read_bytes()
        assert (a / "eval_report.json").read_bytes() == (b / "eval_report.json").read_bytes()
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_criterion_8_idx_parsing(tmp_path):
    with criterion("8 idx-parsing"):
        rng = np.random.default_rng(801)
        images = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
        labels = np.array([0, 7, 9], dtype=np.uint8)
        ipath = tmp_path / "images-idx3-ubyte"
        lpath = tmp_path / "labels-idx1-ubyte"
        with open(ipath, "wb") as f:
            f.write(struct.pack(">iiii", 0x00000803, 3, 28, 28))
            f.write(images.tobytes())
        with open(lpath, "wb") as f:
            f.write(struct.pack(">ii", 0x00000801, 3))
            f.write(labels.tobytes())

        ds = load_mnist_idx(ipath, lpath)
        assert ds.n == 3
        assert np.array_equal(ds.labels, labels)
        assert np.array_equal(ds.samples, images.reshape(3, -1) / 255.0)

        with pytest.raises(ValueError, match="bad_magic"):
            load_mnist_idx(lpath, lpath)
        with pytest.raises(ValueError, match="bad_magic"):
            load_mnist_idx(ipath, ipath)

        files = _mnist_dir()
        if files is None:
            print("  [criterion 8] full dataset load skipped: files absent",
                  flush=True)
            return
        full = load_mnist_idx(files["train-images-idx3-ubyte"],
                              files["train-labels-idx1-ubyte"])
        test = load_mnist_idx(files["t10k-images-idx3-ubyte"],
                              files["t10k-labels-idx1-ubyte"])
        assert full.n == 60000 and test.n == 10000
        for d in (full, test):
            assert d.labels.min() == 0 and d.labels.max() == 9

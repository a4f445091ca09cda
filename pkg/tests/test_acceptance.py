"""Acceptance criteria, one test per criterion.

Each test carries an ``acceptance`` marker; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtr

from ferpair.cli import evaluate, main
from ferpair.datamodel import (
    AFFECTNET_COUNTS,
    Dataset,
    PairKey,
    all_pairs,
    load_feature_file,
    profile_config,
    split,
    synthesize_dataset,
    write_feature_file,
)
from ferpair.losses import (
    AamParams,
    HeadOutputs,
    SignedMseParams,
    TargetBundle,
    aam_loss,
    combined_loss,
    cosine_logits,
    pearson_loss,
    signed_mse,
    softmax_ce,
)
from ferpair.metrics import ConfusionMatrix, class_metrics, f1_score, pair_report, render_pair_report
from ferpair.sampling import InverseFrequency, PairBalanced, SamplerSpec, draw_epoch
from ferpair.training import RopState, TrainConfig, rop_update, train_general, train_pairwise

from conftest import central_diff, rel_error, two_class_config

GRAD_TOL = 1e-4
N_INSTANCES = 100

# published per-class precision, recall and F1
CLASS_PRF = {
    "Neutral": (0.631, 0.788, 0.701),
    "Happy": (0.869, 0.925, 0.896),
    "Sad": (0.680, 0.420, 0.519),
    "Surprise": (0.486, 0.452, 0.468),
    "Fear": (0.363, 0.115, 0.175),
    "Disgust": (0.248, 0.100, 0.142),
    "Anger": (0.660, 0.481, 0.556),
    "Contempt": (0.074, 0.013, 0.022),
}

MAJORITY = [0, 1]      # Neutral, Happy
MINORITY = [4, 5, 7]   # Fear, Disgust, Contempt


def _signs(rng, shape, low=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


@pytest.mark.acceptance(1, "loss gradients match central differences")
def test_gradient_oracle():
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst = {}

    def record(name, analytic, f, x):
        err = rel_error(analytic, central_diff(f, x))
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(N_INSTANCES):
        z = rng.normal(scale=3, size=8)
        t = int(rng.integers(8))
        record("softmax_ce", softmax_ce(z, t).grad, lambda v: softmax_ce(v, t).value, z)

        x, W = rng.normal(size=8), rng.normal(size=(8, 8))
        out = aam_loss(x, W, t)
        record("aam_x", out.grad["x"], lambda v: aam_loss(v, W, t).value, x)
        record("aam_W", out.grad["W"], lambda M: aam_loss(x, M, t).value, W)

        p, q = _signs(rng, 10), _signs(rng, 10)
        kappa = SignedMseParams(float(rng.uniform(0, 3)))
        record("signed_mse", signed_mse(p, q, kappa).grad, lambda v: signed_mse(v, q, kappa).value, p)

        a, b = rng.normal(size=12), rng.normal(size=12)
        record("pearson", pearson_loss(a, b).grad, lambda v: pearson_loss(v, b).value, a)

        B = 4
        outs = HeadOutputs(rng.normal(size=(B, 8)), _signs(rng, B), _signs(rng, B), _signs(rng, (B, 6)))
        tg = TargetBundle(rng.integers(0, 8, B), _signs(rng, B), _signs(rng, B), _signs(rng, (B, 6)))
        mode = "signed_mse" if rng.random() < 0.5 else "pearson"
        w = tuple(rng.uniform(0.1, 2, 4))
        full = combined_loss(outs, tg, mode, w)
        for head, key in (("expression_logits", "expression"), ("valence", "valence"),
                          ("arousal", "arousal"), ("landmarks", "landmarks")):
            def f(v, head=head):
                return combined_loss(HeadOutputs(**{**vars(outs), head: v}), tg, mode, w).value
            record("combined", full.grad[key], f, getattr(outs, head))

    elapsed = time.perf_counter() - start
    print("worst relative errors:", {k: f"{v:.2e}" for k, v in worst.items()}, f"elapsed {elapsed:.2f}s")
    assert all(v < GRAD_TOL for v in worst.values()), worst
    assert elapsed < 10.0


@pytest.mark.acceptance(2, "angular margin reduces to softmax and grows with m")
def test_aam_reduction_and_monotonicity():
    rng = np.random.default_rng(7)
    grid = [k / 10 for k in range(6)]
    checked = 0
    for _ in range(1000):
        s = float(rng.uniform(1, 64))
        x, W = rng.normal(size=8), rng.normal(size=(8, 8))
        t = int(rng.integers(8))
        cos = cosine_logits(x, W)
        assert abs(aam_loss(x, W, t, AamParams(s, 0.0)).value - softmax_ce(s * cos, t).value) <= 1e-9
        theta = math.acos(cos[t])
        if 0.0 < theta < math.pi - 0.5:
            values = [aam_loss(x, W, t, AamParams(s, m)).value for m in grid]
            assert all(b > a for a, b in zip(values, values[1:])), (theta, values)
            checked += 1
    assert checked > 900


@pytest.mark.acceptance(3, "F1 column and weighted recall identity")
def test_metrics_arithmetic():
    for name, (p, r, f) in CLASS_PRF.items():
        assert abs(f1_score(p, r) - f) <= 0.001, name
    rng = np.random.default_rng(3)
    for _ in range(100):
        counts = rng.integers(0, 200, size=(8, 8))
        counts[rng.random((8, 8)) < 0.2] = 0
        counts[0, 0] += 1
        rep = class_metrics(ConfusionMatrix(counts))
        assert rep.weighted_recall == rep.accuracy


@pytest.mark.acceptance(4, "inverse-frequency uniformity and exact pair balance")
def test_sampler_statistics():
    labels = np.repeat(np.arange(8), AFFECTNET_COUNTS)
    n = labels.size
    data = Dataset([""] * n, np.zeros((n, 1)), labels, np.zeros(n), np.zeros(n))
    idx = draw_epoch(data, SamplerSpec(InverseFrequency(num_samples=100000), 2024))
    assert idx.size == 100000
    observed = np.bincount(labels[idx], minlength=8)
    result = stats.chisquare(observed)
    print("class draws", observed.tolist(), f"p={result.pvalue:.4f}")
    assert result.pvalue > 0.001

    pair = draw_epoch(data, SamplerSpec(PairBalanced(PairKey.parse("fear-contempt")), 5))
    assert pair.size == 7500
    assert np.sum(labels[pair] == 4) == 3750 and np.sum(labels[pair] == 7) == 3750


@pytest.mark.acceptance(5, "plateau schedule 0.01 -> 0.0025 -> 0.000625")
def test_scheduler_contract():
    state = RopState(0.01, patience=5, factor=0.25)
    lrs = []
    for _ in range(12):
        state = rop_update(state, 1.0)
        lrs.append(state.current_lr)
    assert lrs[:5] == [0.01] * 5
    assert lrs[5] == 0.0025
    assert lrs[6:10] == [0.0025] * 4
    assert lrs[10] == 0.000625


@pytest.mark.acceptance(6, "separable two-class data reaches 99% in 10 epochs")
def test_separable_end_to_end():
    # class means sit 4 sigma apart along every coordinate
    data = synthesize_dataset(two_class_config(1000, dim=16, gap=4.0, seed=11))
    assert len(data) == 2000 and data.feature_dim == 16
    train, val = split(data, 0.8, seed=11)
    start = time.perf_counter()
    _, history = train_general(train, val, TrainConfig(epochs=10, seed=0))
    elapsed = time.perf_counter() - start
    best = max(r.val_accuracy for r in history)
    print(f"val accuracy per epoch {[round(r.val_accuracy, 4) for r in history]}, {elapsed:.2f}s")
    assert len(history) == 10
    assert best >= 0.99
    assert elapsed < 30.0


def test_separable_bayes_bound_for_euclidean_gap():
    """With means 4 sigma apart in Euclidean distance the optimum is Phi(2)."""
    dim, gap = 16, 4.0
    mu = np.zeros(dim)
    mu[0] = gap / 2
    from ferpair.datamodel import SynthesisConfig

    data = synthesize_dataset(SynthesisConfig(counts=[5000, 5000], means=np.stack([-mu, mu]),
                                              stddevs=[1.0, 1.0], seed=4))
    train, val = split(data, 0.8, seed=4)
    _, history = train_general(train, val, TrainConfig(epochs=10, seed=0))
    bayes = float(ndtr(gap / 2))
    assert bayes < 0.99
    assert abs(history[-1].val_accuracy - bayes) < 0.015


@pytest.mark.acceptance(7, "imbalance lowers minority recall; pair evaluation beats chance")
def test_imbalance_phenomenon():
    start = time.perf_counter()
    train = synthesize_dataset(profile_config("affectnet-skew", scale=0.1, seed=1))
    test = synthesize_dataset(profile_config("balanced-test", seed=2))
    head, _ = train_general(train, None, TrainConfig(seed=0, sampler="natural"))
    report = evaluate(head, test, pairwise=True, balance_pairs=True, seed=0)
    recall = report.classification.recall
    majority, minority = recall[MAJORITY].mean(), recall[MINORITY].mean()
    pair_acc = {st.key: st.accuracy for st in report.pair_stats}
    elapsed = time.perf_counter() - start
    print(f"majority recall {majority:.3f}, minority recall {minority:.3f}, "
          f"weakest pair {min(pair_acc.values()):.1f}%, {elapsed:.1f}s")
    assert 100 * (majority - minority) >= 15.0
    assert len(pair_acc) == 28  # every class mean differs in this profile
    assert all(acc >= 60.0 for acc in pair_acc.values()), pair_acc
    assert elapsed < 300.0


def _pipeline(root):
    train = root / "train"
    test = root / "test"
    model = root / "model"
    pairs = root / "pairs"
    report = root / "report"
    common = ["--dim", "16", "--separation", "2.0"]
    assert main(["synth", "--profile", "affectnet-skew", "--scale", "0.05", "--seed", "3",
                 "--out", str(train), *common]) == 0
    assert main(["synth", "--profile", "balanced-test", "--scale", "0.2", "--seed", "4",
                 "--out", str(test), *common]) == 0
    assert main(["train", "--features", str(train / "features.tsv"), "--epochs", "8", "--seed", "5",
                 "--out", str(model)]) == 0
    assert main(["pair-train", "--features", str(train / "features.tsv"), "--epochs", "2", "--lr", "0.01",
                 "--seed", "5", "--out", str(pairs)]) == 0
    assert main(["eval", "--checkpoint", str(model / "general.json"), "--features", str(test / "features.tsv"),
                 "--dict", str(pairs / "pair_dict.json"), "--out", str(report)]) == 0
    return report


@pytest.mark.acceptance(8, "synth -> train -> eval is byte-for-byte repeatable")
def test_determinism(tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    for name in ("general_report.tsv", "pair_stats.tsv", "pair_report.tsv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
    assert (tmp_path / "a" / "model" / "general.json").read_bytes() == \
        (tmp_path / "b" / "model" / "general.json").read_bytes()


@pytest.mark.acceptance(9, "feature file round trip and 28-row pair report")
def test_round_trip_and_pair_report(tmp_path):
    cfg = profile_config("skewed-test", dim=12, seed=8, n_landmarks=3)
    data = synthesize_dataset(cfg)
    write_feature_file(data, tmp_path / "f.tsv")
    back = load_feature_file(tmp_path / "f.tsv")
    assert back.equals(data)
    for a, b in zip(back, data):
        assert a.id == b.id and a.expression == b.expression
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.landmarks, b.landmarks)

    train = synthesize_dataset(profile_config("affectnet-skew", scale=0.02, dim=12, seed=9))
    general, _ = train_general(train, None, TrainConfig(epochs=3))
    pairs = train_pairwise(train, all_pairs(), config=TrainConfig.pairwise_defaults(epochs=2, initial_lr=0.01)).pairs
    test = synthesize_dataset(profile_config("balanced-test", scale=0.1, dim=12, seed=10))
    report = evaluate(general, test, pairwise=True, pairs=pairs)
    rows = report.pair_rows
    assert len(rows) == 28 and {r.key for r in rows} == set(all_pairs())
    for r in rows:
        assert r.difference == r.dict_accuracy - r.one_fc_accuracy
    lines = render_pair_report(rows).splitlines()[1:]
    assert len(lines) == 28
    for line in lines:
        _, one, dic, diff = line.split("\t")
        assert abs(float(diff) - (float(dic) - float(one))) < 0.05 + 1e-9
    assert pair_report({r.key: r.one_fc_accuracy for r in rows}, {r.key: r.dict_accuracy for r in rows}) == rows

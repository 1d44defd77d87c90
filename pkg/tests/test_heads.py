import math

import numpy as np
import pytest

from ldva import heads
from ldva import tensorcore as tc
from ldva.tensorcore import ParamSet, Tensor


def _identity_predictor(dim):
    """Predictor that outputs its (non-negative) input unchanged."""
    eye = np.eye(dim)
    return heads.Predictor(w1=Tensor(eye), b1=Tensor(np.zeros(dim)),
                           w2=Tensor(eye), b2=Tensor(np.zeros(dim)))


def _table(vectors):
    return heads.SemanticTable(np.arange(len(vectors)), np.array(vectors, dtype=float))


# -- predictor -------------------------------------------------------------------


def test_predict_zero_weights_give_zero_output():
    pred = heads.Predictor(w1=Tensor(np.zeros((4, 6))), b1=Tensor(np.zeros(4)),
                           w2=Tensor(np.zeros((3, 4))), b2=Tensor(np.zeros(3)))
    out = heads.predict(Tensor(np.random.default_rng(0).random((2, 6))), pred)
    assert np.array_equal(out.data, np.zeros((2, 3)))


def test_predict_matches_hand_forward_pass():
    w1 = np.array([[1.0, 0.0], [0.0, -1.0]])
    w2 = np.array([[2.0, 3.0]])
    pred = heads.Predictor(w1=Tensor(w1), b1=Tensor(np.array([0.0, 0.5])),
                           w2=Tensor(w2), b2=Tensor(np.array([-1.0])))
    pi = np.array([[1.5, 2.0]])
    hidden = np.maximum(w1 @ pi[0] + [0.0, 0.5], 0.0)
    expected = w2 @ hidden - 1.0
    assert np.allclose(heads.predict(Tensor(pi), pred).data[0], expected, atol=1e-12)


def test_predict_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    params = ParamSet()
    pred = heads.init_predictor_params(params, in_dim=4, hidden=3, out_dim=2, rng=rng)
    pi = Tensor(rng.normal(size=(3, 4)))

    def loss_fn():
        return tc.sq_norm(heads.predict(pi, pred))

    report = tc.grad_check(loss_fn, params, h=1e-5, tol=1e-4)
    assert report.passed(), report.failures()


def test_predict_shape_mismatch_rejected():
    pred = _identity_predictor(3)
    with pytest.raises(tc.ShapeError):
        heads.predict(Tensor(np.zeros((1, 5))), pred)


# -- GZSL hinge -------------------------------------------------------------------


def test_gzsl_hinge_correct_class_wins_by_margin():
    v = Tensor(np.array([[1.0, 0.0]]))
    sem = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert heads.gzsl_hinge(v, [0], sem, eta=0.1).item() == 0.0


def test_gzsl_hinge_wrong_class_pays_gap_plus_margin():
    v = Tensor(np.array([[1.0, 0.0]]))
    sem = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert abs(heads.gzsl_hinge(v, [1], sem, eta=0.1).item() - 1.1) < 1e-12


def test_gzsl_hinge_identical_semantics_zero_margin():
    v = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    sem = np.tile(np.array([[0.5, 0.5, 0.0]]), (4, 1))
    out = heads.gzsl_hinge(v, [1, 2], sem, eta=0.0)
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_gzsl_hinge_nonnegative():
    rng = np.random.default_rng(2)
    v = Tensor(rng.normal(size=(5, 4)))
    sem = rng.normal(size=(6, 4))
    out = heads.gzsl_hinge(v, rng.integers(0, 6, size=5), sem, eta=1.0)
    assert np.all(out.data >= 0.0)


def test_loss_gzsl_unknown_label_rejected():
    table = _table([[1.0, 0.0], [0.0, 1.0]])
    pred = _identity_predictor(2)
    with pytest.raises(ValueError, match="unknown class"):
        heads.loss_gzsl(Tensor(np.ones((1, 2))), [7], table, 0.1, pred)


# -- GZSL classification -------------------------------------------------------------


def test_gzsl_classify_zero_calibration_is_plain_argmax():
    pred = _identity_predictor(2)
    table = _table([[0.9, 0.0], [0.8, 0.0], [0.3, 0.0]])
    split = heads.GzslSplit(seen=(0,), unseen=(1, 2))
    pi = np.array([[1.0, 0.0]])
    assert heads.gzsl_classify(pi, pred, table, split)[0] == 0


def test_gzsl_classify_calibration_flips_to_unseen():
    pred = _identity_predictor(2)
    table = _table([[0.9, 0.0], [0.8, 0.0]])
    split = heads.GzslSplit(seen=(0,), unseen=(1,), c_cs=0.2)
    pi = np.array([[1.0, 0.0]])
    assert heads.gzsl_classify(pi, pred, table, split)[0] == 1


def test_gzsl_classify_single_class_degenerate():
    pred = _identity_predictor(2)
    table = _table([[0.4, 0.0]])
    split = heads.GzslSplit(seen=(0,), unseen=())
    assert heads.gzsl_classify(np.array([[1.0, 0.0]]), pred, table, split)[0] == 0


def test_gzsl_classify_tie_breaks_to_lowest_label():
    pred = _identity_predictor(2)
    table = _table([[0.5, 0.0], [0.5, 0.0]])
    split = heads.GzslSplit(seen=(0, 1), unseen=())
    assert heads.gzsl_classify(np.array([[1.0, 0.0]]), pred, table, split)[0] == 0


def test_increasing_calibration_never_moves_prediction_to_seen():
    rng = np.random.default_rng(3)
    pred = _identity_predictor(4)
    table = _table(rng.normal(size=(6, 4)))
    split_base = heads.GzslSplit(seen=(0, 1, 2), unseen=(3, 4, 5))
    pi = np.abs(rng.normal(size=(20, 4)))
    previous_unseen = None
    for c in np.linspace(0.0, 2.0, 9):
        split = heads.GzslSplit(seen=split_base.seen, unseen=split_base.unseen, c_cs=c)
        labels = heads.gzsl_classify(pi, pred, table, split)
        unseen_mask = np.isin(labels, split.unseen)
        if previous_unseen is not None:
            assert np.all(unseen_mask >= previous_unseen)
        previous_unseen = unseen_mask


def test_split_validation():
    with pytest.raises(ValueError, match="overlap"):
        heads.GzslSplit(seen=(1, 2), unseen=(2, 3))
    with pytest.raises(ValueError):
        heads.GzslSplit(seen=(1,), unseen=(2,), c_cs=-0.5)


# -- FSL ------------------------------------------------------------------------------


def test_loss_fsl_uniform_logits_is_log_num_classes():
    pred = heads.Predictor(w1=Tensor(np.zeros((4, 6))), b1=Tensor(np.zeros(4)),
                           w2=Tensor(np.zeros((5, 4))), b2=Tensor(np.zeros(5)))
    out = heads.loss_fsl(Tensor(np.ones((3, 6))), [0, 2, 4], pred)
    assert np.allclose(out.data, math.log(5.0), atol=1e-12)


def test_loss_fsl_hand_softmax_value():
    pred = _identity_predictor(2)
    out = heads.loss_fsl(Tensor(np.array([[2.0, 0.0]])), [0], pred)
    assert abs(out.item() - 0.12692801104297263) < 1e-12


def test_loss_fsl_saturates_to_zero_with_confident_logit():
    pred = _identity_predictor(2)
    out = heads.loss_fsl(Tensor(np.array([[40.0, 0.0]])), [0], pred)
    assert out.item() < 1e-12


def test_fsl_prototypes_single_and_midpoint():
    enc = np.array([[0.0, 2.0], [2.0, 0.0], [5.0, 5.0]])
    labels = [1, 1, 3]
    protos = heads.fsl_prototypes(enc, labels)
    assert np.array_equal(protos[1], [1.0, 1.0])
    assert np.array_equal(protos[3], [5.0, 5.0])


def test_fsl_prototypes_match_hand_average():
    rng = np.random.default_rng(4)
    enc = rng.normal(size=(5, 7))
    protos = heads.fsl_prototypes(enc, [2, 2, 2, 2, 2])
    assert np.allclose(protos[2], enc.mean(axis=0), atol=1e-12)


def test_fsl_prototypes_missing_class_rejected():
    with pytest.raises(ValueError, match="no support samples"):
        heads.fsl_prototypes(np.ones((2, 3)), [0, 0], required=[0, 1])


def test_fsl_classify_nearest_and_ties():
    protos = {1: np.array([1.0, 0.0]), 2: np.array([0.0, 1.0])}
    assert heads.fsl_classify(np.array([0.9, 0.2]), protos) == 1
    assert heads.fsl_classify(np.array([0.0, 1.0]), protos) == 2
    tie = {3: np.array([1.0, 0.0]), 5: np.array([-1.0, 0.0])}
    assert heads.fsl_classify(np.array([0.0, 0.0]), tie) == 3


def test_fsl_classify_agrees_with_exhaustive_scan():
    rng = np.random.default_rng(5)
    protos = {y: rng.normal(size=6) for y in range(50)}
    for _ in range(30):
        x = rng.normal(size=6)
        best, best_d = None, None
        for y in sorted(protos):
            d = float(((protos[y] - x) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = y, d
        assert heads.fsl_classify(x, protos) == best


def test_fsl_classify_batch_matches_scalar():
    rng = np.random.default_rng(6)
    protos = {y: rng.normal(size=4) for y in (3, 8, 11)}
    xs = rng.normal(size=(10, 4))
    batch = heads.fsl_classify_batch(xs, protos)
    assert list(batch) == [heads.fsl_classify(x, protos) for x in xs]


# -- DA --------------------------------------------------------------------------------


def test_pseudo_label_argmax_and_ties():
    assert heads.pseudo_label(np.array([[0.2, 0.5, 0.3]]))[0] == 1
    assert heads.pseudo_label(np.array([[0.4, 0.4, 0.4]]))[0] == 0
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(20, 9))
    expected = [max(range(9), key=lambda j: logits[i, j]) for i in range(20)]
    assert list(heads.pseudo_label(logits)) == expected


def test_loss_da_source_only_matches_loss_fsl_bit_exact():
    rng = np.random.default_rng(8)
    params = ParamSet()
    pred = heads.init_predictor_params(params, in_dim=5, hidden=4, out_dim=3, rng=rng)
    pi = rng.normal(size=(4, 5))
    labels = np.array([0, 2, 1, 0])
    da = heads.loss_da(Tensor(pi), labels, np.ones(4, dtype=bool), pred)
    fsl = heads.loss_fsl(Tensor(pi), labels, pred)
    assert da.data.tobytes() == fsl.data.tobytes()


def test_loss_da_target_pays_log_prob_of_own_argmax():
    pred = _identity_predictor(3)
    pi = np.array([[2.0, 1.0, 0.0]])
    out = heads.loss_da(Tensor(pi), [-1], [False], pred)
    probs = np.exp(pi[0]) / np.exp(pi[0]).sum()
    assert abs(out.item() + math.log(probs[0])) < 1e-12


def test_loss_da_uniform_target_logits_is_log10():
    pred = heads.Predictor(w1=Tensor(np.zeros((4, 6))), b1=Tensor(np.zeros(4)),
                           w2=Tensor(np.zeros((10, 4))), b2=Tensor(np.zeros(10)))
    out = heads.loss_da(Tensor(np.ones((1, 6))), [-1], [False], pred)
    assert abs(out.item() - math.log(10.0)) < 1e-12


def test_loss_da_source_without_label_rejected():
    pred = _identity_predictor(2)
    with pytest.raises(ValueError, match="without a label"):
        heads.loss_da(Tensor(np.ones((1, 2))), [-1], [True], pred)


# -- metrics ------------------------------------------------------------------------------


def test_harmonic_mean_identities():
    assert heads.harmonic_mean(7.0, 7.0) == 7.0
    assert heads.harmonic_mean(0.0, 55.0) == 0.0
    with pytest.raises(ValueError):
        heads.harmonic_mean(0.0, 0.0)
    with pytest.raises(ValueError):
        heads.harmonic_mean(-1.0, 2.0)


@pytest.mark.parametrize("ts,tr,expected", [
    (59.2, 74.6, 66.0),
    (54.6, 87.7, 67.3),
    (41.1, 68.0, 51.2),
    (41.6, 91.3, 57.2),
    (24.5, 72.0, 36.6),
    pytest.param(33.4, 87.5, 48.4, marks=pytest.mark.xfail(
        strict=True,
        reason="2*33.4*87.5/120.9 = 48.3457, which misses the reference 48.4 "
               "by 0.054 > 0.05; the identity only holds for the unrounded "
               "accuracies behind these one-decimal table entries")),
])
def test_harmonic_mean_reproduces_reported_triples(ts, tr, expected):
    assert abs(heads.harmonic_mean(ts, tr) - expected) <= 0.05


def test_class_averaged_accuracy_reports_empty_classes():
    acc, per_class, skipped = heads.class_averaged_accuracy(
        predicted=[1, 1, 2], true=[1, 2, 2], classes=[1, 2, 9])
    assert skipped == [9]
    assert per_class == {1: 1.0, 2: 0.5}
    assert abs(acc - 0.75) < 1e-12


def test_gzsl_metrics_hand_table():
    # 2 seen (0,1) / 2 unseen (2,3); scores crafted so class-averages are known
    table = _table([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])
    split = heads.GzslSplit(seen=(0, 1), unseen=(2, 3))
    scores = np.array([
        [0.9, 0.0, 0.0, 0.0],   # true 0 -> predicted 0 (correct)
        [0.8, 0.1, 0.0, 0.0],   # true 1 -> predicted 0 (wrong)
        [0.0, 0.0, 0.7, 0.0],   # true 2 -> predicted 2 (correct)
        [0.6, 0.0, 0.0, 0.5],   # true 3 -> predicted 0 (wrong)
    ])
    ts, tr, h = heads.gzsl_metrics(scores, [0, 1, 2, 3], table, split, c_cs=0.0)
    assert tr == 0.5 and ts == 0.5
    assert abs(h - 0.5) < 1e-12
    # calibration c=0.65 suppresses seen scores: sample 3 flips to class 3
    ts2, tr2, _ = heads.gzsl_metrics(scores, [0, 1, 2, 3], table, split, c_cs=0.65)
    assert ts2 == 1.0


def test_sweep_calibration_never_below_uncalibrated_h():
    rng = np.random.default_rng(9)
    table = _table(np.eye(5))
    split = heads.GzslSplit(seen=(0, 1, 2), unseen=(3, 4))
    scores = rng.normal(size=(40, 5)) + 0.8 * np.eye(5)[rng.integers(0, 5, 40)]
    labels = scores.argmax(axis=1)  # consistent-ish labels
    _, _, h0 = heads.gzsl_metrics(scores, labels, table, split, c_cs=0.0)
    best = heads.sweep_calibration(scores, labels, table, split)
    assert best.h >= h0


def test_semantic_csv_roundtrip_and_normalization(tmp_path):
    path = tmp_path / "sem.csv"
    path.write_text("3,1.0,0.0,0.0\n1,3.0,4.0,0.0\n")
    table = heads.load_semantics_csv(path)
    assert list(table.labels) == [1, 3]
    assert np.allclose(table.vectors[0], [0.6, 0.8, 0.0], atol=1e-12)
    assert np.allclose(np.linalg.norm(table.vectors, axis=1), 1.0, atol=1e-12)

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcas.alignment import (
    IGNORED,
    AlignmentConfig,
    ConfigError,
    LossBreakdown,
    NonFiniteLossError,
    cmc_loss,
    cmcc_batch,
    cmcc_loss,
    cmpc_from_similarities,
    cmpc_loss,
    crop_polarity,
    label_consistency,
    labels_from_scores,
    make_crops,
    pair_counts,
    patch_contrast_labels,
    positive_coverage,
    total_loss,
)
from pcas.autograd import Tensor, grad_check


# -- brute-force oracles -------------------------------------------------------


def naive_cmpc(v, labels):
    """Pair-by-pair enumeration of the patch contrast for one frame."""
    pos_terms, neg_terms = [], []
    for i, j in itertools.combinations(range(len(labels)), 2):
        if labels[i] == IGNORED or labels[j] == IGNORED:
            continue
        c = float(np.dot(v[i], v[j]) / (np.linalg.norm(v[i]) * np.linalg.norm(v[j])))
        if labels[i] == labels[j]:
            pos_terms.append(1.0 - c)
        else:
            neg_terms.append(c)
    pos = sum(pos_terms) / len(pos_terms) if pos_terms else 0.0
    neg = sum(neg_terms) / len(neg_terms) if neg_terms else 0.0
    return pos + neg


def naive_coverage(box, labels):
    g = labels.shape[0]
    x0, y0, x1, y1 = box
    covered = 0.0
    for r in range(g):
        for c in range(g):
            if labels[r, c] != 1:
                continue
            w = min(x1, (c + 1) / g) - max(x0, c / g)
            h = min(y1, (r + 1) / g) - max(y0, r / g)
            if w > 0 and h > 0:
                covered += w * h
    return covered / ((x1 - x0) * (y1 - y0))


# -- label consistency ----------------------------------------------------------


def test_label_consistency_examples():
    lc = label_consistency([{1}, {1}, {2}, {1, 2}, {2, 3}])
    assert lc.raw[0, 1] == 1.0
    assert lc.raw[0, 2] == 0.0
    assert lc.raw[3, 4] == pytest.approx(1 / 3, abs=1e-4)
    np.testing.assert_array_equal(lc.raw, lc.raw.T)
    np.testing.assert_array_equal(np.diag(lc.raw), 1.0)
    np.testing.assert_allclose(lc.values.sum(axis=1), 1.0, atol=1e-12)


def test_label_consistency_rejects_empty():
    with pytest.raises(ValueError):
        label_consistency([{1}, set()])


# -- CMC -----------------------------------------------------------------------


def test_cmc_identity_case():
    eye = np.eye(2)
    lc = label_consistency([{1}, {2}])
    value = cmc_loss(Tensor(eye), Tensor(eye), Tensor(eye), lc, tau_cmc=1.0).item()
    expected = 6 * -math.log(math.e / (math.e + 1))
    assert expected == pytest.approx(1.87957, abs=1e-5)
    assert value == pytest.approx(expected, abs=1e-6)


def test_cmc_uniform_case():
    tok = np.ones((2, 3))
    lc = label_consistency([{1}, {1}])
    value = cmc_loss(Tensor(tok), Tensor(tok), Tensor(tok), lc, tau_cmc=0.07).item()
    assert value == pytest.approx(6 * math.log(2), abs=1e-9)
    assert value == pytest.approx(4.15888, abs=1e-5)


def test_cmc_needs_two_instances():
    with pytest.raises(ValueError):
        cmc_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), np.ones((1, 1)))


def test_cmc_permutation_invariance():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n, d = 6, 5
        a, vs, vc = (rng.normal(size=(n, d)) for _ in range(3))
        labels = [set(rng.choice(4, size=rng.integers(1, 3), replace=False).tolist()) for _ in range(n)]
        lc = label_consistency(labels)
        perm = rng.permutation(n)
        base = cmc_loss(Tensor(a), Tensor(vs), Tensor(vc), lc).item()
        lc_p = label_consistency([labels[i] for i in perm])
        np.testing.assert_allclose(lc_p.values, lc.values[perm][:, perm], atol=1e-15)
        permuted = cmc_loss(Tensor(a[perm]), Tensor(vs[perm]), Tensor(vc[perm]), lc_p).item()
        assert abs(base - permuted) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_cmc_grad_check(seed):
    rng = np.random.default_rng(seed)
    n, d = 4, 5
    toks = [Tensor(rng.normal(size=(n, d)), requires_grad=True) for _ in range(3)]
    lc = label_consistency([{1}, {1, 2}, {2}, {3}])
    report = grad_check(lambda: cmc_loss(*toks, lc, tau_cmc=0.5), toks, eps=1e-5)
    assert report.max_rel_error < 1e-4


# -- CMPC labels -------------------------------------------------------------------


def test_labels_uniform_high():
    labels = labels_from_scores(np.full(5, 0.9), 0.5, 0.3)
    assert labels.tolist() == [1] * 5
    n_pos, n_neg = pair_counts(labels)
    assert n_neg == 0 and n_pos == 10


def test_labels_three_patch_example():
    labels = labels_from_scores(np.array([0.8, 0.1, 0.1]), 0.5, 0.3)
    assert labels.tolist() == [1, 0, 0]
    assert pair_counts(labels) == (1, 2)


def test_labels_boundary_is_ignored():
    assert labels_from_scores(np.array([0.5, 0.3]), 0.5, 0.3).tolist() == [IGNORED, IGNORED]


def test_single_threshold_variant():
    labels = labels_from_scores(np.array([0.7, 0.2, 0.5]), 0.5, 0.5)
    assert labels.tolist() == [1, 0, IGNORED]


def test_patch_labels_pair_count_invariant():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pcl = patch_contrast_labels(rng.normal(size=(9, 4)), rng.normal(size=4), 0.55, 0.45)
        outside = int((pcl.labels != IGNORED).sum())
        assert pcl.n_pos + pcl.n_neg == outside * (outside - 1) // 2


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
def test_patch_labels_scale_invariant(scale, seed):
    rng = np.random.default_rng(seed)
    v, a = rng.normal(size=(8, 6)), rng.normal(size=6)
    base = patch_contrast_labels(v, a, 0.55, 0.45)
    scaled = patch_contrast_labels(v * scale, a, 0.55, 0.45)
    # exact threshold ties are measure-zero; compare away from the boundary
    scores = (base.similarity + 1) / 2
    away = (np.abs(scores - 0.55) > 1e-9) & (np.abs(scores - 0.45) > 1e-9)
    np.testing.assert_array_equal(base.labels[away], scaled.labels[away])


# -- CMPC loss ---------------------------------------------------------------------


def test_cmpc_perfectly_separated():
    cs = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert cmpc_from_similarities(cs, np.array([1, 1, 0])) == 0.0


def test_cmpc_hand_enumerated():
    cs = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, -0.1], [0.2, -0.1, 1.0]])
    assert cmpc_from_similarities(cs, np.array([1, 1, 0])) == pytest.approx(0.55, abs=1e-12)


def test_cmpc_hand_enumerated_through_tokens():
    # tokens realising cs(1,2)=0.5, cs(1,3)=0.2, cs(2,3)=-0.1 via a Cholesky factor
    gram = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, -0.1], [0.2, -0.1, 1.0]])
    v = np.linalg.cholesky(gram)
    assert cmpc_loss(Tensor(v[None]), np.array([[1, 1, 0]])).item() == pytest.approx(0.55, abs=1e-6)


def test_cmpc_all_same_label_has_no_negative_term():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(5, 4))
    labels = np.ones(5, dtype=int)
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    cs = vn @ vn.T
    iu = np.triu_indices(5, 1)
    assert cmpc_loss(Tensor(v[None]), labels[None]).item() == pytest.approx(np.mean(1 - cs[iu]), abs=1e-12)


def test_cmpc_matches_pair_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = 8
        v = rng.normal(size=(p, 5))
        labels = rng.choice([1, 0, IGNORED], size=p)
        got = cmpc_loss(Tensor(v[None]), labels[None]).item()
        assert abs(got - naive_cmpc(v, labels)) <= 1e-10


def test_cmpc_sums_over_frames():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(3, 6, 4))
    labels = rng.choice([1, 0], size=(3, 6))
    expected = sum(naive_cmpc(v[f], labels[f]) for f in range(3))
    assert cmpc_loss(Tensor(v), labels).item() == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_cmpc_grad_check(seed):
    rng = np.random.default_rng(seed)
    v = Tensor(rng.normal(size=(2, 6, 4)), requires_grad=True)
    labels = np.array([[1, 1, 0, 0, IGNORED, 1], [0, 1, 0, 1, 1, 0]])
    report = grad_check(lambda: cmpc_loss(v, labels), [v], eps=1e-5)
    assert report.max_rel_error < 1e-4


# -- crops -------------------------------------------------------------------------


def test_full_scale_crop_is_identity():
    frame = np.random.default_rng(0).uniform(size=(3, 16, 16))
    boxes, crops = make_crops(frame, 4, (1.0, 1.0), np.random.default_rng(1))
    np.testing.assert_array_equal(boxes, np.tile([0.0, 0.0, 1.0, 1.0], (4, 1)))
    for crop in crops:
        np.testing.assert_allclose(crop, frame, atol=1e-12)


def test_crops_deterministic():
    frame = np.random.default_rng(0).uniform(size=(3, 16, 16))
    b1, c1 = make_crops(frame, 5, (0.3, 0.6), np.random.default_rng(7))
    b2, c2 = make_crops(frame, 5, (0.3, 0.6), np.random.default_rng(7))
    np.testing.assert_array_equal(b1, b2)
    np.testing.assert_array_equal(c1, c2)


def test_crop_areas_within_bounds():
    frame = np.zeros((3, 32, 32))
    boxes, crops = make_crops(frame, 8, (0.3, 0.6), np.random.default_rng(3))
    assert crops.shape == (8, 3, 32, 32)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    assert np.all(areas >= 0.09 - 1e-12) and np.all(areas <= 0.36 + 1e-12)
    assert np.all(boxes >= 0.0) and np.all(boxes <= 1.0)


def test_polarity_examples():
    labels = np.array([[1, 1, 0, 0]] * 4)
    assert crop_polarity((0.0, 0.0, 0.5, 1.0), labels, 0.3)
    assert not crop_polarity((0.5, 0.0, 1.0, 1.0), labels, 0.3)
    # box spanning columns 1..3 (0.25 .. 1.0) on rows 0..3: 25/75 positive = 1/3
    box = (0.375, 0.0, 0.875, 1.0)  # half of column 1 + columns 2,3 partial
    cov = positive_coverage(box, labels)
    assert cov == pytest.approx(naive_coverage(box, labels), abs=1e-12)
    quarter = (0.375, 0.0, 0.875, 1.0)
    assert positive_coverage(quarter, labels) == pytest.approx(0.25, abs=1e-12)
    assert not crop_polarity(quarter, labels, 0.3)


def test_coverage_matches_naive_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        g = int(rng.integers(2, 6))
        labels = rng.choice([1, 0, IGNORED], size=(g, g))
        w, h = rng.uniform(0.05, 1.0, size=2)
        x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        box = (x0, y0, x0 + w, y0 + h)
        assert abs(positive_coverage(box, labels) - naive_coverage(box, labels)) <= 1e-10


# -- CMCC --------------------------------------------------------------------------


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_cmcc_no_negatives_is_zero():
    g = unit([1.0, 2.0])
    assert cmcc_loss(Tensor(g), Tensor(g[None]), None, tau=1.0, eps=0.0).item() == 0.0


def test_cmcc_equal_logits_one_negative():
    g = unit([1.0, 0.0])
    c = unit([1.0, 1.0])
    value = cmcc_loss(Tensor(g), Tensor(c[None]), Tensor(c[None]), tau=1.0, eps=0.0).item()
    assert value == pytest.approx(math.log(2), abs=1e-6)
    assert value == pytest.approx(0.69315, abs=1e-5)


def test_cmcc_equal_logits_two_negatives():
    g = unit([1.0, 0.0])
    c = unit([0.3, 1.0])
    value = cmcc_loss(Tensor(g), Tensor(c[None]), Tensor(np.stack([c, c])), tau=1.0, eps=0.0).item()
    assert value == pytest.approx(math.log(3), abs=1e-6)
    assert value == pytest.approx(1.09861, abs=1e-5)


def test_cmcc_matches_direct_formula():
    rng = np.random.default_rng(6)
    for _ in range(50):
        g = unit(rng.normal(size=4))
        pos = rng.normal(size=(3, 4))
        neg = rng.normal(size=(4, 4))
        tau, eps = 0.2, 1e-3
        zp = np.array([g @ unit(p) for p in pos]) / tau
        zn = np.array([g @ unit(n) for n in neg]) / tau
        direct = -np.mean([np.log(np.exp(z) / (np.exp(z) + np.exp(zn).sum() + eps)) for z in zp])
        got = cmcc_loss(Tensor(g), Tensor(pos), Tensor(neg), tau=tau, eps=eps).item()
        assert got == pytest.approx(direct, rel=1e-10, abs=1e-12)


def test_cmcc_no_positive_anchor_counts():
    g = Tensor(np.ones((2, 3)))
    crops = Tensor(np.random.default_rng(0).normal(size=(2, 4, 3)))
    positive = np.array([[True, False, False, False], [False] * 4])
    loss, stats = cmcc_batch(g, crops, positive, 0.1, 1e-8)
    assert stats.no_positive == 1 and stats.anchors == 2
    single, _ = cmcc_batch(g[0:1], crops[0:1], positive[0:1], 0.1, 1e-8)
    assert loss.item() == pytest.approx(single.item(), abs=1e-15)


def test_cmcc_bad_tau():
    with pytest.raises(ConfigError):
        cmcc_loss(Tensor([1.0, 0.0]), Tensor([[1.0, 0.0]]), None, tau=0.0)


def test_cmcc_monotonicity():
    rng = np.random.default_rng(8)
    for _ in range(30):
        g = unit(rng.normal(size=3))
        tau = 0.5
        # parameterise crops directly by their dot products with g
        basis = np.linalg.qr(np.column_stack([g, rng.normal(size=(3, 2))]))[0]
        g = basis[:, 0]
        ortho = basis[:, 1]

        def crop(d):
            return d * g + math.sqrt(1 - d * d) * ortho

        dp, dn = rng.uniform(-0.8, 0.8, size=2)
        base = cmcc_loss(Tensor(g), Tensor(crop(dp)[None]), Tensor(crop(dn)[None]), tau=tau).item()
        assert base >= 0
        up = cmcc_loss(Tensor(g), Tensor(crop(dp + 0.01)[None]), Tensor(crop(dn)[None]), tau=tau).item()
        assert up < base
        worse = cmcc_loss(Tensor(g), Tensor(crop(dp)[None]), Tensor(crop(dn + 0.01)[None]), tau=tau).item()
        assert worse > base


@pytest.mark.parametrize("seed", range(5))
def test_cmcc_grad_check(seed):
    rng = np.random.default_rng(seed)
    g = Tensor(rng.normal(size=4), requires_grad=True)
    pos = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    neg = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    report = grad_check(lambda: cmcc_loss(g, pos, neg, tau=0.5, eps=1e-8), [g, pos, neg], eps=1e-5)
    assert report.max_rel_error < 1e-4


# -- total loss ----------------------------------------------------------------------


def test_total_loss_breakdown_sums():
    cfg = AlignmentConfig(lam_cmc=0.5, lam_cmpc=2.0)
    terms = {k: Tensor(v) for k, v in dict(cls=0.7, cmc=1.3, cmpc=0.2, cmcc=0.9).items()}
    out = total_loss(terms, cfg)
    assert isinstance(out, LossBreakdown)
    assert abs(sum(out.weighted.values()) - out.total.item()) <= 1e-12


def test_total_loss_classification_only():
    cfg = AlignmentConfig(lam_cmc=0.0, lam_cmpc=0.0, lam_cmcc=0.0)
    terms = {k: Tensor(v) for k, v in dict(cls=0.7, cmc=1.3, cmpc=0.2, cmcc=0.9).items()}
    assert total_loss(terms, cfg).total.item() == 0.7


def test_total_loss_toggles():
    cfg = AlignmentConfig(lam_cmpc=1.0)
    terms = {k: Tensor(v) for k, v in dict(cls=0.7, cmc=1.3, cmpc=0.2, cmcc=0.9).items()}
    out = total_loss(terms, cfg, enabled={"cmc": False, "cmcc": False})
    assert out.total.item() == pytest.approx(0.9)
    assert out.weighted["cmc"] == 0.0


def test_total_loss_rejects_non_finite():
    class Bad:
        def item(self):
            return float("nan")

    with pytest.raises(NonFiniteLossError):
        total_loss({"cls": Bad()}, AlignmentConfig())


def test_alignment_config_validation():
    with pytest.raises(ConfigError):
        AlignmentConfig(theta_pos=0.3, theta_neg=0.5)
    with pytest.raises(ConfigError):
        AlignmentConfig(tau=0.0)
    with pytest.raises(ConfigError):
        AlignmentConfig(rho=1.0)

import numpy as np
import pytest

from blcf.bow import QueryRegion
from blcf.cli import encode_corpus
from blcf.errors import ValidationError
from blcf.evalkit import (
    QueryGroundTruth,
    average_precision,
    evaluate,
    parse_groundtruth,
    write_groundtruth,
)
from blcf.index import build_index
from blcf.weighting import WeightingScheme

from synth import build_planted_corpus, train_models


def oracle_ap(ranked_ids, positives, junk, convention):
    """Independent AP walker built on cumulative sums over the filtered list."""
    kept = [i for i in ranked_ids if i not in junk]
    hits = np.cumsum([1 if i in positives else 0 for i in kept])
    n_pos = len(positives)
    ap = 0.0
    for r0, image_id in enumerate(kept):
        if image_id not in positives:
            continue
        rank = r0 + 1
        p_at = hits[r0] / rank
        if convention == "standard":
            ap += p_at / n_pos
        else:
            p_before = hits[r0 - 1] / (rank - 1) if rank > 1 else 1.0
            ap += (p_before + p_at) / 2.0 / n_pos
    return ap


def as_ranked(ids):
    return [(i, 0.0) for i in ids]


def gt_of(positives, junk=(), query_image="q"):
    return QueryGroundTruth(
        query_id="t",
        query_image_id=query_image,
        bbox=QueryRegion(0, 0, 1, 1),
        positives=set(positives),
        junk=set(junk),
    )


def test_ap_hand_example():
    gt = gt_of({"A", "C"})
    ap = average_precision(as_ranked(["B", "A", "C"]), gt)
    assert ap == pytest.approx(5.0 / 12.0, abs=1e-12)


def test_ap_perfect_ranking():
    gt = gt_of({"A", "B", "C"})
    assert average_precision(as_ranked(["A", "B", "C", "D", "E"]), gt) == pytest.approx(1.0)
    assert average_precision(as_ranked(["A", "B", "C", "D", "E"]), gt, "standard") == pytest.approx(1.0)


def test_ap_junk_prefix_removed():
    gt = gt_of({"A"}, junk={"J1", "J2"})
    assert average_precision(as_ranked(["J1", "J2", "A"]), gt) == pytest.approx(1.0)


def test_ap_junk_insertion_invariance(rng):
    corpus = [f"d{i}" for i in range(30)]
    positives = set(rng.choice(corpus, size=6, replace=False).tolist())
    junk = {"j1", "j2", "j3"}
    base = [c for c in corpus]
    rng.shuffle(base)
    gt = gt_of(positives, junk)
    ap0 = average_precision(as_ranked(base), gt)
    for _ in range(10):
        mixed = list(base)
        for j in junk:
            mixed.insert(int(rng.integers(0, len(mixed) + 1)), j)
        assert average_precision(as_ranked(mixed), gt) == pytest.approx(ap0, abs=1e-12)


def test_ap_monotone_under_positive_promotion(rng):
    for convention in ("trapezoid", "standard"):
        for _ in range(25):
            ids = [f"d{i}" for i in range(20)]
            rng.shuffle(ids)
            positives = set(rng.choice(ids, size=5, replace=False).tolist())
            gt = gt_of(positives)
            ap = average_precision(as_ranked(ids), gt, convention)
            pos_ranks = [r for r, i in enumerate(ids) if i in positives]
            r = pos_ranks[int(rng.integers(0, len(pos_ranks)))]
            if r == 0:
                continue
            swapped = list(ids)
            swapped[r - 1], swapped[r] = swapped[r], swapped[r - 1]
            assert average_precision(as_ranked(swapped), gt, convention) >= ap - 1e-12


def test_ap_extreme_placements():
    corpus = [f"d{i}" for i in range(50)]
    positives = set(corpus[:5])
    gt = gt_of(positives)
    first = corpus[:5] + corpus[5:]
    last = corpus[5:] + corpus[:5]
    ap_first = average_precision(as_ranked(first), gt)
    ap_last = average_precision(as_ranked(last), gt)
    assert ap_first == pytest.approx(1.0)
    # worst possible placement: any random placement scores at least as high
    rng = np.random.default_rng(0)
    for _ in range(50):
        mixed = list(corpus)
        rng.shuffle(mixed)
        assert average_precision(as_ranked(mixed), gt) >= ap_last - 1e-12


def test_ap_matches_oracle_random_instances(rng):
    for trial in range(200):
        n = int(rng.integers(2, 60))
        ids = [f"d{i}" for i in range(n)]
        rng.shuffle(ids)
        n_pos = int(rng.integers(1, max(2, n // 2)))
        positives = set(rng.choice(ids, size=n_pos, replace=False).tolist())
        rest = [i for i in ids if i not in positives]
        junk = set(rng.choice(rest, size=min(len(rest), int(rng.integers(0, 5))), replace=False).tolist())
        # drop a few entries so some positives can be absent from the ranking
        ranked = [i for i in ids if rng.uniform() > 0.1]
        gt = gt_of(positives, junk)
        for convention in ("trapezoid", "standard"):
            got = average_precision(as_ranked(ranked), gt, convention)
            want = oracle_ap(ranked, positives, junk, convention)
            assert got == pytest.approx(want, abs=1e-9)


def test_ap_single_positive_harmonic_expectation(rng):
    # one positive uniformly placed in a 100-doc corpus: E[AP] = H_100 / 100
    n, trials = 100, 1000
    ids = [f"d{i}" for i in range(n)]
    total = 0.0
    for _ in range(trials):
        rng.shuffle(ids)
        gt = gt_of({ids[int(rng.integers(0, n))]})
        total += average_precision(as_ranked(ids), gt, "standard")
    analytic = sum(1.0 / r for r in range(1, n + 1)) / n
    assert abs(total / trials - analytic) < 0.02


def test_ap_no_positives_rejected():
    with pytest.raises(ValidationError, match="no positives"):
        average_precision(as_ranked(["a"]), gt_of(set()))


def test_parse_groundtruth_round_trip(tmp_path):
    gts = [
        QueryGroundTruth(
            query_id=f"q{i}",
            query_image_id=f"img{i:03d}",
            bbox=QueryRegion(10.0 + i, 20.0, 110.0, 220.0),
            positives={f"img{i:03d}", f"p{i}a", f"p{i}b", f"p{i}c"},
            junk={f"j{i}"} if i else set(),
        )
        for i in range(3)
    ]
    write_groundtruth(tmp_path, gts, ok_split=True)
    back = parse_groundtruth(tmp_path)
    assert len(back) == 3
    for orig, parsed in zip(gts, back):
        assert parsed.query_id == orig.query_id
        assert parsed.query_image_id == orig.query_image_id
        assert parsed.positives == orig.positives
        assert parsed.junk == orig.junk
        assert (parsed.bbox.x_min, parsed.bbox.y_min) == (orig.bbox.x_min, orig.bbox.y_min)
        assert (parsed.bbox.x_max, parsed.bbox.y_max) == (orig.bbox.x_max, orig.bbox.y_max)


def test_parse_groundtruth_query_line(tmp_path):
    (tmp_path / "x_query.txt").write_text("img001 10.0 20.0 110.0 220.0\n")
    for kind in ("good", "ok", "junk"):
        (tmp_path / f"x_{kind}.txt").write_text("" if kind == "junk" else "img001\n")
    (gt,) = parse_groundtruth(tmp_path)
    assert gt.query_image_id == "img001"
    assert (gt.bbox.x_min, gt.bbox.y_min, gt.bbox.x_max, gt.bbox.y_max) == (10.0, 20.0, 110.0, 220.0)
    assert gt.junk == set()


def test_parse_groundtruth_strips_query_prefix(tmp_path):
    (tmp_path / "x_query.txt").write_text("oxc1_img001 1.0 2.0 3.0 4.0\n")
    for kind in ("good", "ok", "junk"):
        (tmp_path / f"x_{kind}.txt").write_text("img001\n" if kind == "good" else "")
    (gt,) = parse_groundtruth(tmp_path, strip_query_prefix="oxc1_")
    assert gt.query_image_id == "img001"


def test_parse_groundtruth_missing_companion(tmp_path):
    (tmp_path / "x_query.txt").write_text("img001 1 2 3 4\n")
    (tmp_path / "x_good.txt").write_text("img001\n")
    (tmp_path / "x_ok.txt").write_text("")
    with pytest.raises(ValidationError, match="x_junk.txt"):
        parse_groundtruth(tmp_path)


@pytest.fixture(scope="module")
def separable(tmp_path_factory):
    root = tmp_path_factory.mktemp("separable")
    # positives_per_instance exceeds the AQE depth so a perfect ranking expands
    # using positives only
    corpus = build_planted_corpus(
        root,
        seed=3,
        n_instances=3,
        positives_per_instance=12,
        n_images=48,
        grid=6,
        dim=8,
        n_background_words=10,
        theme_size=4,
        region_cells=3,
        distractor_pool="background",
    )
    pca, vocab = train_models(corpus, iters=10, seed=0)
    return corpus, pca, vocab


def test_evaluate_separable_corpus_perfect_map(separable):
    corpus, pca, vocab = separable
    scheme = WeightingScheme("none")
    idx = build_index(encode_corpus(corpus.metas, pca, vocab, scheme))
    report = evaluate(idx, corpus.gts, scheme, pca, vocab, corpus.metas)
    assert report.map == pytest.approx(1.0)
    assert len(report.per_query) == 3
    assert not report.skipped


def test_evaluate_aqe_keeps_perfect_map(separable):
    corpus, pca, vocab = separable
    scheme = WeightingScheme("saliency_file")
    idx = build_index(encode_corpus(corpus.metas, pca, vocab, scheme))
    report = evaluate(idx, corpus.gts, scheme, pca, vocab, corpus.metas, aqe=True, aqe_n=10)
    assert report.map == pytest.approx(1.0)


def test_evaluate_map_is_mean_of_per_query(separable):
    corpus, pca, vocab = separable
    scheme = WeightingScheme("gaussian")
    idx = build_index(encode_corpus(corpus.metas, pca, vocab, scheme))
    report = evaluate(idx, corpus.gts, scheme, pca, vocab, corpus.metas)
    assert report.map == pytest.approx(float(np.mean([ap for _, ap in report.per_query])))


def test_evaluate_skips_missing_tensor_and_empty_positives(separable, tmp_path):
    corpus, pca, vocab = separable
    scheme = WeightingScheme("none")
    idx = build_index(encode_corpus(corpus.metas, pca, vocab, scheme))
    gts = [g for g in corpus.gts]
    gts.append(
        QueryGroundTruth(
            query_id="missing",
            query_image_id="nonexistent",
            bbox=QueryRegion(0, 0, 10, 10),
            positives={"img0000"},
        )
    )
    gts.append(
        QueryGroundTruth(
            query_id="nopos",
            query_image_id="img0000",
            bbox=QueryRegion(0, 0, 10, 10),
            positives=set(),
        )
    )
    report = evaluate(idx, gts, scheme, pca, vocab, corpus.metas)
    assert len(report.per_query) == 3
    skipped_ids = {q for q, _ in report.skipped}
    assert skipped_ids == {"missing", "nopos"}
    assert report.map == pytest.approx(1.0)


def test_groundtruth_rejects_positive_junk_overlap():
    with pytest.raises(ValidationError, match="both positives and junk"):
        QueryGroundTruth(
            query_id="x",
            query_image_id="a",
            bbox=QueryRegion(0, 0, 1, 1),
            positives={"a", "b"},
            junk={"b"},
        )

import filecmp
import json

import numpy as np
import pytest
from PIL import Image

from blcf import tensorio
from blcf.cli import main
from blcf.evalkit import write_groundtruth

from synth import build_planted_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    return build_planted_corpus(
        root,
        seed=5,
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


@pytest.fixture(scope="module")
def artifacts(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_artifacts")
    manifest = str(corpus.manifest_path)
    assert main(["fit-pca", "--manifest", manifest, "--out", str(out / "pca"), "--seed", "0"]) == 0
    assert (
        main(
            [
                "train-vocab",
                "--manifest",
                manifest,
                "--pca",
                str(out / "pca"),
                "--k",
                str(corpus.n_words),
                "--iters",
                "10",
                "--seed",
                "0",
                "--out",
                str(out / "vocab"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "index",
                "--manifest",
                manifest,
                "--pca",
                str(out / "pca"),
                "--vocab",
                str(out / "vocab"),
                "--weighting",
                "saliency",
                "--out",
                str(out / "corpus.idx"),
            ]
        )
        == 0
    )
    return out


def test_pipeline_eval_reports_high_map(corpus, artifacts, tmp_path):
    gt_dir = tmp_path / "gt"
    write_groundtruth(gt_dir, corpus.gts)
    report_path = tmp_path / "report.json"
    rc = main(
        [
            "eval",
            "--index",
            str(artifacts / "corpus.idx"),
            "--pca",
            str(artifacts / "pca"),
            "--vocab",
            str(artifacts / "vocab"),
            "--manifest",
            str(corpus.manifest_path),
            "--gt",
            str(gt_dir),
            "--report",
            str(report_path),
        ]
    )
    assert rc == 0
    report = json.loads(report_path.read_text())
    assert report["map"] == pytest.approx(1.0)
    assert len(report["per_query"]) == 3
    assert report["config"]["weighting"]["kind"] == "saliency_file"


def test_query_full_bbox_equals_no_bbox(corpus, artifacts, tmp_path):
    base = [
        "query",
        "--index",
        str(artifacts / "corpus.idx"),
        "--pca",
        str(artifacts / "pca"),
        "--vocab",
        str(artifacts / "vocab"),
        "--manifest",
        str(corpus.manifest_path),
        "--image-id",
        "img0000",
        "--top",
        "8",
    ]
    out_a = tmp_path / "a.json"
    out_b = tmp_path / "b.json"
    px = float(corpus.grid * corpus.cell_px)
    assert main(base + ["--out", str(out_a)]) == 0
    assert main(base + ["--bbox", "0", "0", str(px), str(px), "--out", str(out_b)]) == 0
    assert out_a.read_text() == out_b.read_text()
    payload = json.loads(out_a.read_text())
    assert payload["results"][0]["image_id"] == "img0000"
    assert payload["results"][0]["score"] == pytest.approx(1.0, abs=1e-5)


def test_fit_pca_reruns_are_byte_identical(corpus, tmp_path):
    manifest = str(corpus.manifest_path)
    for name in ("one", "two"):
        assert main(["fit-pca", "--manifest", manifest, "--out", str(tmp_path / name), "--seed", "3"]) == 0
    for suffix in (".mean.blcf", ".basis.blcf", ".json"):
        assert filecmp.cmp(tmp_path / ("one" + suffix), tmp_path / ("two" + suffix), shallow=False)


def test_train_vocab_reruns_are_byte_identical(corpus, artifacts, tmp_path):
    manifest = str(corpus.manifest_path)
    for name in ("one", "two"):
        rc = main(
            [
                "train-vocab",
                "--manifest",
                manifest,
                "--pca",
                str(artifacts / "pca"),
                "--k",
                "8",
                "--iters",
                "5",
                "--seed",
                "11",
                "--out",
                str(tmp_path / name),
            ]
        )
        assert rc == 0
    for suffix in (".blcf", ".json"):
        assert filecmp.cmp(tmp_path / ("one" + suffix), tmp_path / ("two" + suffix), shallow=False)


def test_index_reruns_are_byte_identical(corpus, artifacts, tmp_path):
    args = [
        "index",
        "--manifest",
        str(corpus.manifest_path),
        "--pca",
        str(artifacts / "pca"),
        "--vocab",
        str(artifacts / "vocab"),
        "--weighting",
        "gaussian",
    ]
    for name in ("one.idx", "two.idx"):
        assert main(args + ["--out", str(tmp_path / name)]) == 0
    assert filecmp.cmp(tmp_path / "one.idx", tmp_path / "two.idx", shallow=False)


def test_eval_refuses_mismatched_pca_unless_forced(corpus, artifacts, tmp_path):
    manifest = str(corpus.manifest_path)
    # same data, different seed: identical math, different config hash
    assert main(["fit-pca", "--manifest", manifest, "--out", str(tmp_path / "pca2"), "--seed", "9"]) == 0
    gt_dir = tmp_path / "gt"
    write_groundtruth(gt_dir, corpus.gts)
    args = [
        "eval",
        "--index",
        str(artifacts / "corpus.idx"),
        "--pca",
        str(tmp_path / "pca2"),
        "--vocab",
        str(artifacts / "vocab"),
        "--manifest",
        manifest,
        "--gt",
        str(gt_dir),
        "--report",
        str(tmp_path / "report.json"),
    ]
    assert main(args) == 1
    assert main(args + ["--force"]) == 0


def test_fit_pca_rejects_mismatched_descriptor_dims(tmp_path):
    t1 = tmp_path / "a.blcf"
    t2 = tmp_path / "b.blcf"
    tensorio.write_tensor(t1, np.ones((2, 2, 4), dtype=np.float32))
    tensorio.write_tensor(t2, np.ones((2, 2, 6), dtype=np.float32))
    manifest = tmp_path / "m.jsonl"
    tensorio.write_manifest(
        manifest,
        [
            tensorio.ImageMeta("a", 32, 32, str(t1)),
            tensorio.ImageMeta("b", 32, 32, str(t2)),
        ],
    )
    assert main(["fit-pca", "--manifest", str(manifest), "--out", str(tmp_path / "pca")]) == 1


def test_train_vocab_rejects_k_above_sample_count(corpus, artifacts, tmp_path):
    rc = main(
        [
            "train-vocab",
            "--manifest",
            str(corpus.manifest_path),
            "--pca",
            str(artifacts / "pca"),
            "--k",
            "99999",
            "--out",
            str(tmp_path / "vocab"),
        ]
    )
    assert rc == 1


def test_missing_manifest_is_io_error(tmp_path):
    assert main(["fit-pca", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "p")]) == 2


def test_saliency_command_constant_image(tmp_path):
    img_path = tmp_path / "flat.png"
    Image.fromarray(np.full((48, 64, 3), 120, dtype=np.uint8), mode="RGB").save(img_path)
    out_tensor = tmp_path / "flat.sal.blcf"
    assert main(["saliency", "--image", str(img_path), "--out", str(out_tensor)]) == 0
    sal = tensorio.read_tensor(out_tensor)
    assert sal.shape == (48, 64)
    assert np.all(sal == 1.0)
    out_png = tmp_path / "flat.sal.png"
    assert main(["saliency", "--image", str(img_path), "--out", str(out_png)]) == 0
    assert np.all(np.asarray(Image.open(out_png)) == 255)


def test_saliency_command_structured_image(tmp_path):
    img = np.full((64, 96, 3), 25, dtype=np.uint8)
    img[20:44, 40:70] = 230
    img_path = tmp_path / "sq.png"
    Image.fromarray(img, mode="RGB").save(img_path)
    out = tmp_path / "sq.sal.blcf"
    assert main(["saliency", "--image", str(img_path), "--out", str(out)]) == 0
    sal = tensorio.read_tensor(out)
    pi, pj = np.unravel_index(np.argmax(sal), sal.shape)
    assert 20 <= pi < 44 and 40 <= pj < 70

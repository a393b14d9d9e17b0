"""Command-line pipeline: fit-pca, train-vocab, index, query, eval, saliency.

Every artifact records the config hash that produced it; downstream commands
refuse to mix artifacts from different configurations unless forced. All
randomness flows from explicit --seed flags, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys

import numpy as np
from PIL import Image

from . import bow, descriptors, evalkit, index as index_mod, tensorio, vocab as vocab_mod, weighting
from .errors import ConfigMismatchError, ImageDecodeError, PipelineError, TensorFormatError, ValidationError

log = logging.getLogger("blcf")

DEFAULT_SAMPLE_CAP = 500_000


def config_hash(payload: dict) -> str:
    """Stable short digest of a configuration dictionary."""
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _collect_descriptors(metas, sample_cap, rng, pca=None):
    """Gather local descriptors from every manifest tensor, optionally
    post-processing them, then subsample uniformly to `sample_cap`."""
    chunks = []
    dim = None
    for meta in metas:
        fmap = tensorio.read_tensor(meta.tensor_path)
        if fmap.ndim != 3:
            raise ValidationError(f"image {meta.image_id!r}: expected a 3-D feature tensor")
        if dim is None:
            dim = fmap.shape[2]
        elif fmap.shape[2] != dim:
            raise ValidationError(
                f"image {meta.image_id!r}: descriptor dim {fmap.shape[2]} differs from {dim}"
            )
        flat = fmap.reshape(-1, fmap.shape[2]).astype(np.float64)
        if pca is not None:
            flat = descriptors.postprocess_batch(flat, pca)
        chunks.append(flat)
    if not chunks:
        raise ValidationError("manifest lists no images")
    sample = np.concatenate(chunks, axis=0)
    if sample_cap and sample.shape[0] > sample_cap:
        keep = rng.choice(sample.shape[0], size=sample_cap, replace=False)
        keep.sort()
        sample = sample[keep]
    return sample


def _scheme_from_args(args) -> weighting.WeightingScheme:
    return weighting.WeightingScheme(
        kind="saliency_file" if args.weighting == "saliency" else args.weighting,
        sigma_frac=args.sigma_frac,
        bms_step=args.bms_step,
        bms_dilation=args.bms_dilation,
        bms_blur_sigma=args.bms_blur,
        bms_whiten=not args.bms_raw_rgb,
    )


def _scheme_from_params(params: dict) -> weighting.WeightingScheme:
    return weighting.WeightingScheme(
        kind=params["kind"],
        sigma_frac=params.get("sigma_frac", weighting.DEFAULT_SIGMA_FRAC),
        bms_step=params.get("bms_step", weighting.DEFAULT_BMS_STEP),
        bms_dilation=params.get("bms_dilation", weighting.DEFAULT_BMS_DILATION),
        bms_blur_sigma=params.get("bms_blur_sigma"),
        bms_whiten=params.get("bms_whiten", True),
    )


def _add_weighting_flags(parser):
    parser.add_argument(
        "--weighting",
        choices=["none", "gaussian", "l2norm", "saliency", "bms"],
        default="none",
        help="spatial weighting scheme",
    )
    parser.add_argument("--sigma-frac", type=float, default=weighting.DEFAULT_SIGMA_FRAC)
    parser.add_argument("--bms-step", type=int, default=weighting.DEFAULT_BMS_STEP)
    parser.add_argument("--bms-dilation", type=int, default=weighting.DEFAULT_BMS_DILATION)
    parser.add_argument("--bms-blur", type=float, default=None)
    parser.add_argument("--bms-raw-rgb", action="store_true", help="threshold raw RGB channels")


def _check_chain(header: dict, name: str, expected: str | None, force: bool):
    got = header.get(name)
    if expected is None or got is None:
        return
    if got != expected:
        msg = f"index was built with {name}={got}, loaded artifact has {expected}"
        if force:
            log.warning("%s (continuing due to --force)", msg)
        else:
            raise ConfigMismatchError(msg + " (use --force to override)")


def cmd_fit_pca(args) -> int:
    metas = tensorio.load_manifest(args.manifest)
    rng = np.random.default_rng(args.seed)
    sample = _collect_descriptors(metas, args.sample_cap, rng)
    sample = descriptors.l2_normalize_rows(sample)
    out_dim = args.out_dim if args.out_dim > 0 else None
    model = descriptors.fit_pca(sample, out_dim=out_dim, epsilon=args.epsilon)
    digest = config_hash(
        {
            "cmd": "fit-pca",
            "manifest": file_digest(args.manifest),
            "out_dim": model.out_dim,
            "epsilon": args.epsilon,
            "sample_cap": args.sample_cap,
            "seed": args.seed,
        }
    )
    descriptors.save_pca(args.out, model, extra={"config_hash": digest, "seed": args.seed})
    log.info("fit PCA %d -> %d on %d descriptors; saved %s.*", model.in_dim, model.out_dim, sample.shape[0], args.out)
    return 0


def cmd_train_vocab(args) -> int:
    metas = tensorio.load_manifest(args.manifest)
    pca, pca_meta = descriptors.load_pca(args.pca)
    rng = np.random.default_rng(args.seed)
    sample = _collect_descriptors(metas, args.sample_cap, rng, pca=pca)
    vocab = vocab_mod.train_vocabulary(
        sample, K=args.k, max_iters=args.iters, seed=args.seed, mode=args.mode
    )
    for it, obj in enumerate(vocab.objective_history, start=1):
        log.info("k-means iteration %d: objective %.6f", it, obj)
    digest = config_hash(
        {
            "cmd": "train-vocab",
            "manifest": file_digest(args.manifest),
            "pca_hash": pca_meta.get("config_hash"),
            "k": args.k,
            "iters": args.iters,
            "seed": args.seed,
            "mode": args.mode,
            "sample_cap": args.sample_cap,
        }
    )
    vocab_mod.save_vocab(
        args.out,
        vocab,
        extra={"config_hash": digest, "pca_hash": pca_meta.get("config_hash")},
    )
    log.info("trained vocabulary K=%d in %d iterations; saved %s.*", vocab.K, vocab.iterations_run, args.out)
    return 0


def encode_corpus(metas, pca, vocab, scheme, assign_mode="exact"):
    """Encode every manifest image into a sparse vector under one scheme."""
    bows = []
    for meta in metas:
        raw = tensorio.read_tensor(meta.tensor_path)
        if raw.ndim != 3:
            raise ValidationError(f"image {meta.image_id!r}: expected a 3-D feature tensor")
        amap = vocab_mod.assign_map(descriptors.postprocess_map(raw, pca), vocab, mode=assign_mode)
        ctx = weighting.WeightContext(
            grid=amap.shape,
            raw_feature_map=raw.astype(np.float64),
            saliency_path=meta.saliency_path,
            image_path=meta.image_path,
        )
        wmap = weighting.make_weights(scheme, ctx)
        bows.append(bow.encode(amap, wmap, vocab.K, image_id=meta.image_id))
    return bows


def cmd_index(args) -> int:
    metas = tensorio.load_manifest(args.manifest)
    pca, pca_meta = descriptors.load_pca(args.pca)
    vocab, vocab_meta = vocab_mod.load_vocab(args.vocab)
    scheme = _scheme_from_args(args)
    bows = encode_corpus(metas, pca, vocab, scheme, args.assign_mode)
    idx = index_mod.build_index(bows)
    digest = config_hash(
        {
            "cmd": "index",
            "manifest": file_digest(args.manifest),
            "pca_hash": pca_meta.get("config_hash"),
            "vocab_hash": vocab_meta.get("config_hash"),
            "weighting": scheme.params(),
            "assign_mode": args.assign_mode,
        }
    )
    index_mod.save_index(
        args.out,
        idx,
        extra_header={
            "config_hash": digest,
            "pca_hash": pca_meta.get("config_hash"),
            "vocab_hash": vocab_meta.get("config_hash"),
            "weighting": scheme.params(),
            "assign_mode": args.assign_mode,
        },
    )
    nnz = sum(b.nnz for b in bows)
    log.info(
        "indexed %d images, %.1f words/image on average; saved %s",
        len(bows),
        nnz / max(len(bows), 1),
        args.out,
    )
    return 0


def _load_chain(args):
    idx, header = index_mod.load_index(args.index)
    pca, pca_meta = descriptors.load_pca(args.pca)
    vocab, vocab_meta = vocab_mod.load_vocab(args.vocab)
    _check_chain(header, "pca_hash", pca_meta.get("config_hash"), args.force)
    _check_chain(header, "vocab_hash", vocab_meta.get("config_hash"), args.force)
    if args.weighting is not None:
        scheme = _scheme_from_args(args)
        if scheme.params() != header.get("weighting"):
            log.warning(
                "query weighting %s differs from index weighting %s",
                scheme.params(),
                header.get("weighting"),
            )
    elif header.get("weighting"):
        scheme = _scheme_from_params(header["weighting"])
    else:
        scheme = weighting.WeightingScheme(kind="none")
    return idx, header, pca, vocab, scheme


def _write_text(path, text: str):
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)


def cmd_query(args) -> int:
    idx, header, pca, vocab, scheme = _load_chain(args)
    metas = tensorio.load_manifest(args.manifest)
    meta = next((m for m in metas if m.image_id == args.image_id), None)
    if meta is None:
        raise ValidationError(f"image_id {args.image_id!r} not found in manifest")
    raw = tensorio.read_tensor(meta.tensor_path)
    if args.bbox is not None:
        x1, y1, x2, y2 = args.bbox
        region = bow.QueryRegion(x1, y1, x2, y2, meta.width, meta.height)
    else:
        region = bow.QueryRegion(0.0, 0.0, float(meta.width), float(meta.height), meta.width, meta.height)
    qbow = bow.encode_query(
        raw,
        region,
        pca,
        vocab,
        scheme,
        saliency_path=meta.saliency_path,
        image_path=meta.image_path,
        image_id=meta.image_id,
        assign_mode=args.assign_mode,
    )
    ranked = index_mod.query(idx, qbow, top_n=None)
    if args.aqe:
        expanded = index_mod.expand_query(
            qbow, ranked, idx, n=args.aqe_n, include_query=args.aqe_include_query
        )
        ranked = index_mod.query(idx, expanded, top_n=None)
    ranked = ranked[: args.top] if args.top else ranked
    payload = {
        "query": args.image_id,
        "index_config_hash": header.get("config_hash"),
        "results": [{"image_id": i, "score": s} for i, s in ranked],
    }
    _write_text(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_eval(args) -> int:
    idx, header, pca, vocab, scheme = _load_chain(args)
    metas = tensorio.load_manifest(args.manifest)
    gts = evalkit.parse_groundtruth(
        args.gt, style=args.style, strip_query_prefix=args.strip_query_prefix
    )
    report = evalkit.evaluate(
        idx,
        gts,
        scheme,
        pca,
        vocab,
        metas,
        aqe=args.aqe,
        aqe_n=args.aqe_n,
        aqe_include_query=args.aqe_include_query,
        convention=args.ap_convention,
        assign_mode=args.assign_mode,
    )
    report.config_echo["index_config_hash"] = header.get("config_hash")
    _write_text(args.report, report.to_json())
    log.info("mAP %.4f over %d queries (%d skipped)", report.map, len(report.per_query), len(report.skipped))
    return 0


def cmd_saliency(args) -> int:
    image = weighting.load_rgb(args.image)
    sal = weighting.bms_saliency(
        image,
        step=args.bms_step,
        dilation_width=args.bms_dilation,
        blur_sigma=args.bms_blur,
        whiten=not args.bms_raw_rgb,
    )
    if str(args.out).lower().endswith((".png", ".jpg", ".jpeg", ".bmp")):
        Image.fromarray(np.round(sal * 255.0).astype(np.uint8), mode="L").save(args.out)
    else:
        tensorio.write_tensor(args.out, sal)
    log.info("saliency map written to %s", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blcf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-pca", help="fit the whitening PCA on manifest descriptors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--out-dim", type=int, default=0, help="0 keeps the native dimension")
    p.add_argument("--sample-cap", type=int, default=DEFAULT_SAMPLE_CAP)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=descriptors.DEFAULT_EPSILON)
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("train-vocab", help="cluster descriptors into visual words")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pca", required=True, help="PCA path prefix")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--iters", type=int, default=vocab_mod.DEFAULT_MAX_ITERS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["exact", "approximate"], default="exact")
    p.add_argument("--sample-cap", type=int, default=DEFAULT_SAMPLE_CAP)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("index", help="encode the corpus and build the inverted index")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--assign-mode", choices=["exact", "approximate"], default="exact")
    _add_weighting_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank the corpus for one query image")
    p.add_argument("--index", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--bbox", type=float, nargs=4, metavar=("X1", "Y1", "X2", "Y2"))
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--aqe", action="store_true")
    p.add_argument("--aqe-n", type=int, default=10)
    p.add_argument(
        "--aqe-include-query", action=argparse.BooleanOptionalAction, default=True,
        help="sum the query vector into the expansion (default on)",
    )
    p.add_argument("--assign-mode", choices=["exact", "approximate"], default="exact")
    p.add_argument("--force", action="store_true", help="ignore config hash mismatches")
    _add_weighting_flags(p)
    p.set_defaults(weighting=None)  # default: reuse the index's recorded scheme
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="mean average precision over a ground-truth directory")
    p.add_argument("--index", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--gt", required=True, help="ground-truth directory")
    p.add_argument("--style", choices=["oxford"], default="oxford")
    p.add_argument(
        "--strip-query-prefix", default="",
        help="marker to drop from query image ids (oxford uses 'oxc1_')",
    )
    p.add_argument("--aqe", action="store_true")
    p.add_argument("--aqe-n", type=int, default=10)
    p.add_argument("--aqe-include-query", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--ap-convention", choices=list(evalkit.AP_CONVENTIONS), default="trapezoid")
    p.add_argument("--assign-mode", choices=["exact", "approximate"], default="exact")
    p.add_argument("--force", action="store_true")
    _add_weighting_flags(p)
    p.set_defaults(weighting=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="compute a Boolean Map Saliency map for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help=".png/.jpg for an image, anything else for a tensor")
    p.add_argument("--bms-step", type=int, default=weighting.DEFAULT_BMS_STEP)
    p.add_argument("--bms-dilation", type=int, default=weighting.DEFAULT_BMS_DILATION)
    p.add_argument("--bms-blur", type=float, default=None)
    p.add_argument("--bms-raw-rgb", action="store_true")
    p.set_defaults(func=cmd_saliency)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (TensorFormatError, ImageDecodeError) as exc:
        log.error("%s", exc)
        return 2
    except PipelineError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())

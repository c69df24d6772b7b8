"""Command-line entry points: train, stats, candidates, separate, bench, serve.

Exit codes: 0 success, 1 internal failure, 2 usage or input error. Every
command is deterministic given its flags and seeds.

Patch coordinates throughout (flags, session files, candidate JSON) are the
top-left corner of the 8x8 patch, x = column, y = row.
"""

import argparse
import json
import pathlib
import sys
import time

import numpy as np

from . import bench as bench_mod
from . import gmm, imgio
from .errors import InvalidInputError, RefsepError
from .gmm import PATCH_SIZE
from .posterior import build_pair_table, posterior_components, top_candidates
from .separation import ComponentAnnotation, SeparationConfig, separate_gmm_c

SESSION_VERSION = 1


def session_to_obj(image_sha256, prior_id, annotations, cfg: SeparationConfig):
    return {
        "version": SESSION_VERSION,
        "image_sha256": image_sha256,
        "prior_id": prior_id,
        "annotations": [{"x": a.col, "y": a.row, "i": a.i, "j": a.j}
                        for a in annotations],
        "config": {
            "lambda_c": cfg.lambda_c,
            "stride": cfg.stride,
            "beta_schedule": list(cfg.beta_schedule),
            "outer_iters_per_beta": cfg.outer_iters_per_beta,
            "clip_to_physical": cfg.clip_to_physical,
            "seed": cfg.seed,
        },
    }


def session_from_obj(obj):
    """Parse a session file. The annotation means are never stored; they are
    recomputed from (i, j) and the image, so sessions survive float drift."""
    try:
        anns = tuple(ComponentAnnotation(row=int(a["y"]), col=int(a["x"]),
                                         i=int(a["i"]), j=int(a["j"]))
                     for a in obj.get("annotations", []))
        cfg_obj = dict(obj.get("config", {}))
        if "beta_schedule" in cfg_obj:
            cfg_obj["beta_schedule"] = tuple(float(b)
                                             for b in cfg_obj["beta_schedule"])
        cfg = SeparationConfig(**cfg_obj)
        return str(obj["image_sha256"]), obj.get("prior_id"), anns, cfg
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed session file: {exc}") from exc


def _load_corpus_dir(path):
    path = pathlib.Path(path)
    if not path.is_dir():
        raise InvalidInputError(f"corpus directory not readable: {path}")
    files = sorted(p for p in path.iterdir()
                   if p.suffix.lower() in (".png", ".pgm", ".ppm"))
    if not files:
        raise InvalidInputError(f"no images found under {path}")
    return [imgio.load_image(p) for p in files]


def cmd_train(args) -> int:
    corpus = _load_corpus_dir(args.corpus)
    chunks = []
    for img in corpus:
        if min(img.shape) < PATCH_SIZE:
            continue
        _, pats = gmm.extract_patches(img, stride=4)
        chunks.append(pats)
    if not chunks:
        raise InvalidInputError("no image large enough for 8x8 patches")
    pats = np.concatenate(chunks, axis=0)
    rng = np.random.default_rng(args.seed)
    if pats.shape[0] > args.max_patches:
        pats = pats[rng.permutation(pats.shape[0])[:args.max_patches]]
    cfg = gmm.TrainConfig(k=args.k, max_iters=args.iters, seed=args.seed,
                          cov_floor=args.cov_floor)
    prior, trace = gmm.em_fit(pats, cfg)
    gmm.save_model(prior, args.out)
    print(f"trained k={args.k} on {pats.shape[0]} patches, "
          f"{len(trace)} EM iterations, final LL/patch "
          f"{trace[-1] / pats.shape[0]:.4f}")
    print(f"model id {gmm.model_id(prior)} -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    corpus = _load_corpus_dir(args.corpus)
    stats = bench_mod.gradient_stats(corpus)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "overall_fraction": stats["overall_fraction"],
        "fraction_of_images_above_0.3": stats["fraction_of_images_above_0.3"],
        "per_image_fractions": [round(float(f), 6)
                                for f in stats["per_image_fractions"]],
        "n_pixels": stats["n_pixels"],
    }
    (out / "stats.json").write_text(json.dumps(payload, sort_keys=True,
                                               indent=2) + "\n")
    edges = stats["histogram_edges"]
    rows = ["bin_low,bin_high,count"]
    rows += [f"{lo:.2f},{hi:.2f},{n}" for lo, hi, n
             in zip(edges[:-1], edges[1:], stats["histogram"])]
    (out / "histogram.csv").write_text("\n".join(rows) + "\n")
    from . import figures
    figures.render_gradient_hist(stats, out / "gradient_hist.png")
    print(f"gradient magnitude > 0.1 on {stats['overall_fraction']:.4f} "
          f"of {stats['n_pixels']} pixels")
    return 0


def cmd_candidates(args) -> int:
    img = imgio.load_image(args.image)
    h, w = img.shape
    if not (0 <= args.y <= h - PATCH_SIZE and 0 <= args.x <= w - PATCH_SIZE):
        raise InvalidInputError(
            f"point ({args.x}, {args.y}) does not admit an interior 8x8 patch "
            f"of a {w}x{h} image")
    prior = gmm.load_model(args.model)
    table = build_pair_table(prior)
    yp = img[args.y:args.y + PATCH_SIZE, args.x:args.x + PATCH_SIZE].ravel()
    cands = top_candidates(posterior_components(yp, prior, table),
                           min(args.n, prior.k * prior.k))
    payload = json.dumps(cands.to_json_obj(), indent=2) + "\n"
    if args.out:
        pathlib.Path(args.out).write_text(payload)
    else:
        sys.stdout.write(payload)
    if args.contact_sheet:
        _write_contact_sheet(cands, args.contact_sheet)
    return 0


def _write_contact_sheet(cands, path, scale=8):
    thumbs = [imgio.patch_pair_thumbnail(e.x1_mean, e.x2_complement, scale)
              for e in cands.entries]
    th, tw = thumbs[0].shape
    cols = int(np.ceil(np.sqrt(len(thumbs))))
    rows = int(np.ceil(len(thumbs) / cols))
    margin = 2
    sheet = np.ones((rows * (th + margin) + margin,
                     cols * (tw + margin) + margin))
    for k, t in enumerate(thumbs):
        r, c = divmod(k, cols)
        r0 = margin + r * (th + margin)
        c0 = margin + c * (tw + margin)
        sheet[r0:r0 + th, c0:c0 + tw] = t
    imgio.save_image(path, sheet, bits=8)


def cmd_separate(args) -> int:
    raw = pathlib.Path(args.image).read_bytes()
    img = imgio.decode_image(raw)
    prior = gmm.load_model(args.model)

    annotations = ()
    cfg = SeparationConfig()
    if args.session:
        obj = json.loads(pathlib.Path(args.session).read_text())
        sha, prior_id, annotations, cfg = session_from_obj(obj)
        if sha != imgio.bytes_sha256(raw):
            raise InvalidInputError(
                "stale session: image hash does not match the session file")
        if prior_id is not None and prior_id != gmm.model_id(prior):
            raise InvalidInputError(
                "stale session: model id does not match the session file")
    overrides = {}
    if args.lambda_c is not None:
        overrides["lambda_c"] = args.lambda_c
    if args.stride is not None:
        overrides["stride"] = args.stride
    if args.betas is not None:
        overrides["beta_schedule"] = tuple(float(b)
                                           for b in args.betas.split(","))
    overrides["clip_to_physical"] = args.clip
    if overrides:
        import dataclasses
        cfg = dataclasses.replace(cfg, **overrides)

    table = build_pair_table(prior)
    t0 = time.time()
    res = separate_gmm_c(img, annotations, prior, table, cfg)
    elapsed = time.time() - t0
    p1, p2, clipped = imgio.write_layer_pair(args.out_prefix, img, res.x1)
    record = {
        "image_sha256": imgio.bytes_sha256(raw),
        "model_id": gmm.model_id(prior),
        "annotations": [{"x": a.col, "y": a.row, "i": a.i, "j": a.j}
                        for a in annotations],
        "objective_trace": [float(v) for v in res.objective_trace],
        "converged": res.converged,
        "warnings": list(res.warnings),
        "seconds": round(elapsed, 3),
        "outputs": [p1, p2],
        "output_quantization_clipped": clipped,
        "config": session_to_obj("", "", annotations, cfg)["config"],
    }
    result_path = f"{args.out_prefix}_result.json"
    pathlib.Path(result_path).write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n")
    if len(res.objective_trace):
        from . import figures
        figures.render_objective_trace(res.objective_trace,
                                       f"{args.out_prefix}_trace.png")
    print(f"wrote {p1}, {p2}, {result_path} ({elapsed:.1f}s)")
    return 0


def cmd_bench(args) -> int:
    if args.trials < 1:
        raise InvalidInputError("refusing to produce an empty report: "
                                "trials must be >= 1")
    corpus = _load_corpus_dir(args.corpus)
    prior = gmm.load_model(args.model)
    table = build_pair_table(prior)
    methods = tuple(m.strip() for m in args.methods.split(","))
    densities = tuple(int(d) for d in args.densities.split(","))
    report = bench_mod.run_separation_bench(
        corpus, prior, table, densities=densities, methods=methods,
        seed=args.seed, count=args.trials)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.text_table())
    (out / "per_instance.csv").write_text(report.to_csv())
    from . import figures
    figures.render_bench_psnr(report, out / "bench_psnr.png")
    if report.candidate_curve is not None:
        figures.render_candidate_curve(report.candidate_curve,
                                       out / "candidate_curve.png")
    sys.stdout.write(report.text_table())
    return 0


def cmd_serve(args) -> int:
    import os

    import uvicorn

    from .service import create_app

    model = args.model or os.environ.get("REFSEP_MODEL")
    if not model:
        raise InvalidInputError("no model: pass --model or set REFSEP_MODEL")
    port = args.port if args.port is not None else \
        int(os.environ.get("REFSEP_PORT", "8000"))
    app = create_app(model, workers=args.threads)
    uvicorn.run(app, host=args.host, port=port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="refsep",
        description="User-assisted single-image layer separation with a "
                    "GMM patch prior.")
    p.add_argument("--threads", type=int, default=2,
                   help="worker cap for components that pool (serve)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a patch prior on an image corpus")
    t.add_argument("--corpus", required=True,
                   help="directory of PNG/PGM/PPM images")
    t.add_argument("--k", type=int, required=True, help="mixture components")
    t.add_argument("--out", required=True, help="output model path (GMM1)")
    t.add_argument("--iters", type=int, default=100, help="max EM iterations")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--cov-floor", type=float, default=1e-6,
                   help="variance added to every covariance diagonal")
    t.add_argument("--max-patches", type=int, default=200_000,
                   help="seeded subsample cap on training patches (stride 4)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("stats", help="corpus gradient statistics")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_stats)

    c = sub.add_parser("candidates",
                       help="rank patch decomposition candidates at a point")
    c.add_argument("--image", required=True)
    c.add_argument("--x", type=int, required=True, help="patch corner column")
    c.add_argument("--y", type=int, required=True, help="patch corner row")
    c.add_argument("--model", required=True)
    c.add_argument("--n", type=int, default=100)
    c.add_argument("--out", help="JSON output path (default stdout)")
    c.add_argument("--contact-sheet",
                   help="render candidates as an (x1 | x2) thumbnail grid PNG")
    c.set_defaults(func=cmd_candidates)

    d = sub.add_parser("separate", help="run the separation solver headless")
    d.add_argument("--image", required=True)
    d.add_argument("--session",
                   help="annotation session JSON (omit for EPLL-only)")
    d.add_argument("--model", required=True)
    d.add_argument("--lambda-c", type=float, default=None)
    d.add_argument("--stride", type=int, default=None)
    d.add_argument("--betas", default=None,
                   help="comma-separated beta schedule override")
    d.add_argument("--out-prefix", required=True)
    d.add_argument("--clip", action=argparse.BooleanOptionalAction,
                   default=True,
                   help="project layers into the physical range after each "
                        "beta stage (default on for photographs)")
    d.set_defaults(func=cmd_separate)

    b = sub.add_parser("bench", help="paired separation benchmark")
    b.add_argument("--corpus", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--methods", default="GMM-C,GMM-F,EPLL-only")
    b.add_argument("--densities", default="8",
                   help="comma-separated annotation cell sizes")
    b.add_argument("--trials", type=int, default=500,
                   help="number of synthetic instances")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("serve", help="run the annotation HTTP service")
    v.add_argument("--model", help="model path (or REFSEP_MODEL)")
    v.add_argument("--port", type=int, default=None,
                   help="port (or REFSEP_PORT, default 8000)")
    v.add_argument("--host", default="127.0.0.1")
    v.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError, FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RefsepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

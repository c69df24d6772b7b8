"""Quantitative experiment harness: gradient statistics, candidate-accuracy
curves, and the paired annotated-separation benchmark.

All experiments are deterministic given (corpus, seed, config). Per-instance
seeds come from a splittable SeedSequence so results do not depend on
evaluation order.
"""

import dataclasses
import hashlib
import json
import warnings

import numpy as np

from . import canny, gmm, metrics
from .errors import InvalidInputError
from .gmm import PATCH_SIZE
from .posterior import PairTable, posterior_components, top_candidates
from .separation import (ComponentAnnotation, FilterAnnotation, SeparationConfig,
                         separate_gmm_c, separate_gmm_f)

psnr = metrics.psnr

METHODS = ("GMM-C", "GMM-F", "EPLL-only")


@dataclasses.dataclass(frozen=True)
class SynthPair:
    """A ground-truth superposition: y = x1_true + x2_true, crops from two
    different source images."""
    x1_true: np.ndarray
    x2_true: np.ndarray
    y: np.ndarray
    source_ids: tuple
    seed: int


@dataclasses.dataclass(frozen=True)
class AnnotationDensity:
    """One annotation per cell x cell pixel area."""
    cell: int

    def validate(self, shape):
        if not PATCH_SIZE <= self.cell <= min(shape):
            raise InvalidInputError(
                f"density cell {self.cell} outside [{PATCH_SIZE}, {min(shape)}]")

    def target_count(self, shape):
        return (shape[0] // self.cell) * (shape[1] // self.cell)


def gradient_stats(images, threshold: float = 0.1):
    """Fraction of pixels with gradient magnitude above the threshold, plus
    a vertical-gradient histogram (101 bins on [-1, 1])."""
    images = list(images)
    if not images:
        raise InvalidInputError("no images")
    above = total = 0
    per_image = []
    hist = np.zeros(101, dtype=np.int64)
    edges = np.linspace(-1.0, 1.0, 102)
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        mags = metrics.gradient_magnitudes(img)
        n_above = int((mags > threshold).sum())
        above += n_above
        total += mags.size
        per_image.append(n_above / mags.size)
        gy = np.empty_like(img)
        gy[:-1] = img[1:] - img[:-1]
        gy[-1] = img[-1] - img[-2]
        hist += np.histogram(np.clip(gy, -1.0, 1.0), bins=edges)[0]
    per_image = np.asarray(per_image)
    return {
        "overall_fraction": above / total,
        "per_image_fractions": per_image,
        "fraction_of_images_above_0.3": float((per_image > 0.3).mean()),
        "histogram": hist,
        "histogram_edges": edges,
        "n_pixels": total,
    }


def synth_pairs(corpus, count, size, seed):
    """Draw ground-truth pairs by cropping two different corpus images."""
    corpus = [np.asarray(im, dtype=np.float64) for im in corpus]
    # interior crops: keep one pixel off every border
    ok = [k for k, im in enumerate(corpus)
          if im.shape[0] >= size + 2 and im.shape[1] >= size + 2]
    if len(ok) < 2:
        raise InvalidInputError("corpus needs >= 2 images large enough to crop")
    children = np.random.SeedSequence(seed).spawn(count)
    out = []
    for t, child in enumerate(children):
        r = np.random.default_rng(child)
        a, b = r.choice(len(ok), size=2, replace=False)
        crops = []
        for k in (ok[a], ok[b]):
            im = corpus[k]
            rr = int(r.integers(1, im.shape[0] - size))
            cc = int(r.integers(1, im.shape[1] - size))
            crops.append(im[rr:rr + size, cc:cc + size])
        x1, x2 = crops
        out.append(SynthPair(x1_true=x1, x2_true=x2, y=x1 + x2,
                             source_ids=(ok[a], ok[b]), seed=t))
    return out


def annotation_sites(y, density: AnnotationDensity, seed):
    """One site per cell x cell region: the region's strongest edge pixel.

    Regions without edge pixels yield no site, so the realized count can
    fall below the density target on flat imagery. Sites are clamped one
    pixel off the border so derivative stencils fit.
    """
    density.validate(y.shape)
    edge_mask, nms = canny.canny_edges(y)
    h, w = y.shape
    cell = density.cell
    sites = []
    for r0 in range(0, h - cell + 1, cell):
        for c0 in range(0, w - cell + 1, cell):
            sub = edge_mask[r0:r0 + cell, c0:c0 + cell]
            if not sub.any():
                continue
            strength = np.where(sub, nms[r0:r0 + cell, c0:c0 + cell], -1.0)
            flat = int(np.argmax(strength))
            rr, cc = r0 + flat // cell, c0 + flat % cell
            sites.append((min(max(rr, 1), h - 2), min(max(cc, 1), w - 2)))
    return sites


def auto_annotate_filters(pair: SynthPair, density: AnnotationDensity, seed):
    """Label each site with the layer whose ground truth has the larger
    gradient magnitude there."""
    sites = annotation_sites(pair.y, density, seed)
    if not sites:
        warnings.warn("no edges found; returning an empty annotation set")
        return []
    g1 = metrics.gradient_magnitudes(pair.x1_true)
    g2 = metrics.gradient_magnitudes(pair.x2_true)
    return [FilterAnnotation(row=r, col=c, layer=1 if g1[r, c] >= g2[r, c] else 2)
            for r, c in sites]


def _patch_corner(site, shape):
    r = min(max(site[0] - PATCH_SIZE // 2, 0), shape[0] - PATCH_SIZE)
    c = min(max(site[1] - PATCH_SIZE // 2, 0), shape[1] - PATCH_SIZE)
    return r, c


def auto_annotate_components(pair: SynthPair, locations, prior, table,
                             n: int = 100, seed=0):
    """At each location, pick one of the two candidates closest (Euclidean)
    to the true x1 patch among the top-n posterior means."""
    if n < 2:
        raise InvalidInputError("n must be >= 2")
    rng = np.random.default_rng(seed)
    anns = []
    for site in locations:
        r, c = _patch_corner(site, pair.y.shape)
        yp = pair.y[r:r + PATCH_SIZE, c:c + PATCH_SIZE].ravel()
        tp = pair.x1_true[r:r + PATCH_SIZE, c:c + PATCH_SIZE].ravel()
        cands = top_candidates(posterior_components(yp, prior, table),
                               min(n, prior.k * prior.k))
        dist = [float(np.linalg.norm(e.x1_mean - tp)) for e in cands.entries]
        two = np.argsort(dist, kind="stable")[:2]
        pick = cands.entries[int(rng.choice(two))]
        anns.append(ComponentAnnotation(row=r, col=c, i=pick.i, j=pick.j))
    return anns


def candidate_accuracy_curve(corpus, prior, table, ns, trials, seed):
    """Mean best-of-N candidate PSNR over random summed patch pairs."""
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    ns = sorted(set(int(n) for n in ns))
    n_max = min(max(ns), prior.k * prior.k)
    pairs = synth_pairs(corpus, trials, PATCH_SIZE, seed)
    per_trial = np.empty((trials, len(ns)))
    for t, pair in enumerate(pairs):
        post = posterior_components(pair.y.ravel(), prior, table)
        cands = top_candidates(post, n_max)
        scores = np.array([psnr(pair.x1_true.ravel(), e.x1_mean)
                           for e in cands.entries])
        best = np.maximum.accumulate(scores)
        per_trial[t] = [best[min(n, n_max) - 1] for n in ns]
    means = per_trial.mean(axis=0)
    ses = per_trial.std(axis=0, ddof=1) / np.sqrt(trials) if trials > 1 \
        else np.zeros(len(ns))
    return {
        "ns": ns,
        "mean_db": means,
        "se_db": ses,
        "trials": trials,
        "per_trial": per_trial,
    }


@dataclasses.dataclass(frozen=True)
class BenchReport:
    """Machine- and human-readable summary of one benchmark run."""
    methods: dict          # (method, cell) -> {mean, se, n, failures}
    per_instance: dict     # (method, cell) -> list of per-instance PSNRs
    failures: tuple        # (instance, method, message)
    candidate_curve: dict | None
    gradient_summary: dict | None
    config_echo: dict
    corpus_id: str

    def to_json_obj(self):
        table = {}
        for (method, cell), stats in sorted(self.methods.items()):
            table.setdefault(method, {})[str(cell)] = stats
        obj = {
            "bench_report_v1": True,
            "corpus_id": self.corpus_id,
            "config": self.config_echo,
            "methods": table,
            "failures": [list(f) for f in self.failures],
        }
        if self.candidate_curve is not None:
            cc = self.candidate_curve
            obj["candidate_curve"] = {
                "ns": list(cc["ns"]),
                "mean_db": [round(float(v), 6) for v in cc["mean_db"]],
                "se_db": [round(float(v), 6) for v in cc["se_db"]],
                "trials": cc["trials"],
            }
        if self.gradient_summary is not None:
            gs = self.gradient_summary
            obj["gradient_stats"] = {
                "overall_fraction": round(float(gs["overall_fraction"]), 6),
                "fraction_of_images_above_0.3":
                    round(float(gs["fraction_of_images_above_0.3"]), 6),
                "n_pixels": int(gs["n_pixels"]),
            }
        return obj

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, indent=2) + "\n"

    def text_table(self) -> str:
        lines = ["method       cell   mean dB     se      n  failures"]
        for (method, cell), s in sorted(self.methods.items()):
            lines.append(f"{method:12s} {str(cell):>4s}  {s['mean']:8.3f}"
                         f"  {s['se']:6.3f}  {s['n']:5d}  {s['failures']:8d}")
        if self.candidate_curve is not None:
            lines.append("")
            lines.append("candidates    N   mean dB     se")
            cc = self.candidate_curve
            for n, m, se in zip(cc["ns"], cc["mean_db"], cc["se_db"]):
                lines.append(f"{'':12s}{n:5d}  {m:8.3f}  {se:6.3f}")
        if self.gradient_summary is not None:
            lines.append("")
            lines.append(f"gradient magnitude > 0.1: "
                         f"{self.gradient_summary['overall_fraction']:.4f} of pixels")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["method,cell,instance,psnr_db"]
        for (method, cell), vals in sorted(self.per_instance.items()):
            rows.extend(f"{method},{cell},{k},{v:.6f}"
                        for k, v in enumerate(vals))
        return "\n".join(rows) + "\n"


def corpus_digest(corpus) -> str:
    h = hashlib.sha256()
    for im in corpus:
        h.update(hashlib.sha256(
            np.ascontiguousarray(im, dtype=np.float64).tobytes()).digest())
    return h.hexdigest()


def run_separation_bench(corpus, prior, table: PairTable, densities, methods,
                         cfg: SeparationConfig = None, seed: int = 0,
                         count: int = 500, size: int = 40,
                         candidate_ns=None, candidate_trials: int = 0,
                         with_gradient_stats: bool = False) -> BenchReport:
    """Paired comparison of the annotated separation methods.

    Every method sees bit-identical instances; GMM-C and GMM-F annotate at
    the same sites. EPLL-only carries no annotations and is therefore
    density-independent, but is repeated per density so every table row has
    the same instance set.
    """
    bad = set(methods) - set(METHODS)
    if bad:
        raise InvalidInputError(f"unknown methods {sorted(bad)}")
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    cfg = cfg or SeparationConfig()
    corpus = [np.asarray(im, dtype=np.float64) for im in corpus]
    densities = [d if isinstance(d, AnnotationDensity) else AnnotationDensity(d)
                 for d in densities]
    pairs = synth_pairs(corpus, count, size, seed)
    ann_children = np.random.SeedSequence((seed, 1)).spawn(count)

    scratch = {}
    scores = {(m, d.cell): [] for m in methods for d in densities}
    failures = []
    for t, pair in enumerate(pairs):
        rng = np.random.default_rng(ann_children[t])
        pick_seed = int(rng.integers(2 ** 63))
        for density in densities:
            sites = annotation_sites(pair.y, density, pick_seed)
            for method in methods:
                try:
                    if method == "GMM-C":
                        anns = auto_annotate_components(
                            pair, sites, prior, table,
                            n=cfg.n_candidates, seed=pick_seed)
                        res = separate_gmm_c(pair.y, anns, prior, table, cfg,
                                             scratch=scratch)
                    elif method == "GMM-F":
                        fanns = auto_annotate_filters(pair, density, pick_seed)
                        res = separate_gmm_f(pair.y, fanns, prior, table, cfg,
                                             scratch=scratch)
                    else:
                        res = separate_gmm_c(pair.y, [], prior, table, cfg,
                                             scratch=scratch)
                    scores[(method, density.cell)].append(
                        psnr(pair.x1_true, res.x1))
                except Exception as exc:  # recorded, never silently dropped
                    failures.append((t, method, f"{type(exc).__name__}: {exc}"))

    stats = {}
    for key, vals in scores.items():
        arr = np.asarray(vals)
        n = arr.size
        stats[key] = {
            "mean": round(float(arr.mean()), 6) if n else float("nan"),
            "se": round(float(arr.std(ddof=1) / np.sqrt(n)), 6) if n > 1 else 0.0,
            "n": int(n),
            "failures": count - int(n),
        }

    curve = None
    if candidate_trials > 0:
        curve = candidate_accuracy_curve(
            corpus, prior, table, candidate_ns or (1, 3, 10, 30, 100),
            candidate_trials, seed + 1)
    grad = gradient_stats(corpus) if with_gradient_stats else None

    return BenchReport(
        methods=stats, per_instance={k: list(map(float, v))
                                     for k, v in scores.items()},
        failures=tuple(failures), candidate_curve=curve,
        gradient_summary=grad,
        config_echo={
            "seed": seed, "count": count, "size": size,
            "densities": [d.cell for d in densities],
            "methods": sorted(methods),
            "lambda_c": cfg.lambda_c, "lambda_f": cfg.lambda_f,
            "stride": cfg.stride,
            "beta_schedule": list(cfg.beta_schedule),
            "n_candidates": cfg.n_candidates,
        },
        corpus_id=corpus_digest(corpus))

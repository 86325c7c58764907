"""Codebook geometry, latent-variance studies and perturbation bound checks."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ConfigError, NumericalError
from .perturb import PerturbationSpec, apply, delta
from .quantiser import Codebook, nearest_assign, quantise, usage_counts


def _vectors(codebook) -> np.ndarray:
    return codebook.numpy() if isinstance(codebook, Codebook) else np.asarray(codebook)


# ---------------------------------------------------------------- codebook geometry
@dataclass
class CodebookStats:
    r_mean: float
    r_std: float
    r_i: np.ndarray
    r_mean_over_k: float
    usage_histogram: np.ndarray | None = None
    perplexity: float | None = None

    @property
    def half_r_i(self) -> np.ndarray:
        return 0.5 * self.r_i

    def table_entry(self) -> str:
        return f"{self.r_mean:.3f} ± {self.r_std:.3f}"


def nearest_neighbour_distances(vectors: np.ndarray) -> np.ndarray:
    """Distance from each row to its nearest other row, in float64."""
    v = np.asarray(vectors, dtype=np.float64)
    sq = (v * v).sum(1)
    d2 = sq[:, None] - 2.0 * v @ v.T + sq[None, :]
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    # recompute the winning pair directly to avoid cancellation in the expansion
    return np.linalg.norm(v - v[nn], axis=1)


def compute_r(codebook) -> CodebookStats:
    """Per-vector nearest-neighbour distance r_i and the half-distance summary.

    ``r_mean`` sums the K half-distances and divides by K-1;
    ``r_mean_over_k`` divides the same sum by K.
    """
    v = _vectors(codebook)
    K = v.shape[0]
    if K < 2:
        raise ConfigError(f"compute_r needs K >= 2, got {K}")
    r_i = nearest_neighbour_distances(v)
    half = 0.5 * r_i
    return CodebookStats(
        r_mean=float(half.sum() / (K - 1)),
        r_std=float(half.std()),
        r_i=r_i,
        r_mean_over_k=float(half.mean()),
    )


def perplexity(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def encode_batches(model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Bottleneck e for every image, [N,D,h,w]."""
    outs = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            outs.append(model.encode(Tensor(images[s : s + batch_size]))[0].data)
    return np.concatenate(outs)


def codebook_usage(model, images: np.ndarray, batch_size: int = 8) -> tuple[np.ndarray, float]:
    """Assignment counts over ``images`` and the perplexity of that usage."""
    if getattr(model, "codebook", None) is None:
        raise ConfigError("codebook usage needs a model with vq enabled")
    e = encode_batches(model, images, batch_size)
    rows = e.transpose(0, 2, 3, 1).reshape(-1, e.shape[1])
    counts = usage_counts(nearest_assign(rows, model.codebook), model.codebook.K)
    return counts, perplexity(counts)


def codebook_stats(model, images: np.ndarray | None = None) -> CodebookStats:
    stats = compute_r(model.codebook)
    if images is not None:
        stats.usage_histogram, stats.perplexity = codebook_usage(model, images)
    return stats


# ---------------------------------------------------------------- latent variance
@dataclass
class LatentVarianceReport:
    tag: str
    kind: str
    level: float
    variance_matrix: np.ndarray  # images x features
    draws: int
    index_changes: np.ndarray | None = None  # images x positions, code flips across draws

    @property
    def mean_variance(self) -> float:
        return float(self.variance_matrix.mean())


def _latent_fn(model, which: str) -> Callable[[np.ndarray], tuple[np.ndarray, np.ndarray | None]]:
    vq = getattr(model, "codebook", None) is not None
    if which not in ("pre", "post"):
        raise ConfigError(f"latent selector must be 'pre' or 'post', got {which!r}")

    def fn(x):
        with no_grad():
            e = model.encode(Tensor(x))[0]
            if vq:
                q = quantise(e, model.codebook, model.config.beta)
                return (q.z_q.data if which == "post" else e.data), q.indices
            return e.data, None

    return fn


def latent_tag(model, which: str) -> str:
    if getattr(model, "codebook", None) is None:
        return "baseline"
    return f"vq_{which}"


def latent_variance_study(
    model,
    images: np.ndarray,
    spec: PerturbationSpec,
    levels: Sequence[float],
    draws: int = 100,
    which: str = "post",
    batch_size: int = 8,
) -> list[LatentVarianceReport]:
    """Per-image, per-feature variance of the latent across ``draws`` noise realisations.

    Variances use Welford accumulation in float64, so a feature that takes
    the same value in every draw has variance exactly zero.
    """
    if draws < 2:
        raise ConfigError(f"latent variance needs at least 2 draws, got {draws}")
    fn = _latent_fn(model, which)
    tag = latent_tag(model, which)
    reports = []
    for level in levels:
        lspec = spec.with_level(level)
        mean = m2 = first_idx = None
        flips = None
        for d in range(draws):
            chunks, idx_chunks = [], []
            for s in range(0, len(images), batch_size):
                xp = apply(lspec, images[s : s + batch_size], draw=d, offset=s)
                lat, idx = fn(xp)
                chunks.append(lat.reshape(len(xp), -1))
                if idx is not None:
                    idx_chunks.append(idx.reshape(len(xp), -1))
            z = np.concatenate(chunks).astype(np.float64)
            if mean is None:
                mean = z.copy()
                m2 = np.zeros_like(z)
            else:
                dz = z - mean
                mean += dz / (d + 1)
                m2 += dz * (z - mean)
            if idx_chunks:
                idx = np.concatenate(idx_chunks)
                if first_idx is None:
                    first_idx = idx
                    flips = np.zeros(idx.shape, dtype=np.int64)
                else:
                    flips += idx != first_idx
        reports.append(LatentVarianceReport(tag, spec.kind, float(level), m2 / draws, draws, flips))
    return reports


def variance_heatmap_pgm(variance_matrix: np.ndarray, vmax: float | None = None, max_features: int = 256) -> str:
    """Plain-text PGM (P2): rows are images, columns an evenly spaced feature subset."""
    var = np.asarray(variance_matrix, dtype=np.float64)
    cols = np.linspace(0, var.shape[1] - 1, num=min(max_features, var.shape[1])).round().astype(int)
    sub = var[:, cols]
    top = vmax if vmax is not None else float(sub.max())
    scaled = np.zeros_like(sub) if top <= 0 else np.clip(sub / top, 0.0, 1.0)
    pix = np.round(scaled * 255).astype(int)
    lines = ["P2", f"# variance heatmap, white = {top:.6g}", f"{pix.shape[1]} {pix.shape[0]}", "255"]
    lines += [" ".join(map(str, row)) for row in pix]
    return "\n".join(lines) + "\n"


def variance_matrix_csv(report: LatentVarianceReport, header: str = "") -> str:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    n_feat = report.variance_matrix.shape[1]
    w.writerow(["image"] + [f"f{j}" for j in range(n_feat)])
    for i, row in enumerate(report.variance_matrix):
        w.writerow([i] + [f"{v:.6g}" for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------- bound check
def voronoi_margin(e: np.ndarray, vectors: np.ndarray, assigned: np.ndarray) -> np.ndarray:
    """Distance from each row of ``e`` to the boundary of its assigned Voronoi cell."""
    e = np.asarray(e, dtype=np.float64)
    v = np.asarray(vectors, dtype=np.float64)
    lk = v[assigned]
    dk = ((e - lk) ** 2).sum(1)
    margins = np.full(len(e), np.inf)
    for j in range(len(v)):
        dj = ((e - v[j]) ** 2).sum(1)
        sep = np.linalg.norm(v[j] - lk, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            m = (dj - dk) / (2.0 * sep)
        m[assigned == j] = np.inf
        margins = np.minimum(margins, m)
    return np.maximum(margins, 0.0)


def codes_changed(codebook, e: np.ndarray, e_perturbed: np.ndarray) -> np.ndarray:
    """Per-row flag: does the perturbed latent row snap to a different code?"""
    v = _vectors(codebook)
    return nearest_assign(e, v) != nearest_assign(e_perturbed, v)


@dataclass
class BoundRecord:
    sample_id: int
    position: int
    jvp_norm: float
    r_i_assigned: float
    codes_changed: bool
    taylor_residual: float
    shift: float
    offset: float
    margin: float
    regime: str


@dataclass
class BoundCheckReport:
    records: list = field(default_factory=list)
    h: float = 1e-2
    spec: str = ""

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "position", "jvp_norm", "r_i_assigned", "half_r_i", "codes_changed",
                    "taylor_residual", "shift", "offset", "margin", "regime"])
        for r in self.records:
            w.writerow([r.sample_id, r.position, f"{r.jvp_norm:.6g}", f"{r.r_i_assigned:.6g}",
                        f"{0.5 * r.r_i_assigned:.6g}", int(r.codes_changed), f"{r.taylor_residual:.6g}",
                        f"{r.shift:.6g}", f"{r.offset:.6g}", f"{r.margin:.6g}", r.regime])
        return buf.getvalue()

    def summary(self) -> dict:
        regimes = {}
        for r in self.records:
            c = regimes.setdefault(r.regime, [0, 0])
            c[0] += 1
            c[1] += int(r.codes_changed)
        return {k: {"count": n, "changed": ch} for k, (n, ch) in regimes.items()}


def classify_regime(offset: float, shift: float, half_r: float, margin: float) -> str:
    """'half_radius': the half-distance guarantee applies (offset + shift < r_i/2);
    'voronoi': still provably inside the cell (shift < margin);
    'outside': the shift may reach another cell."""
    if offset + shift < half_r:
        return "half_radius"
    if shift < margin:
        return "voronoi"
    return "outside"


def _rows(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    return e.transpose(0, 2, 3, 1).reshape(-1, e.shape[1]) if e.ndim == 4 else e.reshape(-1, e.shape[-1])


def bound_check(
    encoder: Callable[[np.ndarray], np.ndarray],
    codebook,
    x: np.ndarray,
    spec: PerturbationSpec | None = None,
    h: float = 1e-2,
    perturbation: np.ndarray | None = None,
    draw: int = 0,
    sample_offset: int = 0,
) -> BoundCheckReport:
    """Finite-difference surrogate for ||delta(x)^T grad_x e_j|| at every latent vector.

    ``encoder`` maps [N,...] inputs to [N,D,h,w] (or [N,D]) latents.  The
    offset delta(x) comes from ``spec`` or is passed directly as
    ``perturbation``.  Arithmetic stays in float64 where the encoder allows.
    """
    if h <= 0:
        raise ConfigError(f"finite-difference step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    if perturbation is None:
        if spec is None:
            raise ConfigError("bound_check needs a PerturbationSpec or an explicit perturbation")
        dlt = delta(spec, x.astype(np.float32), draw=draw, offset=sample_offset)
    else:
        dlt = np.asarray(perturbation, dtype=np.float64)
    v = _vectors(codebook).astype(np.float64)
    r_i = nearest_neighbour_distances(v)

    e0 = np.asarray(encoder(x), dtype=np.float64)
    eh = np.asarray(encoder(x + h * dlt), dtype=np.float64)
    e1 = np.asarray(encoder(x + dlt), dtype=np.float64)
    for name, arr in (("clean", e0), ("step", eh), ("perturbed", e1)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite encoder output on the {name} input", op="encoder")

    n = e0.shape[0]
    r0, rh, r1 = _rows(e0), _rows(eh), _rows(e1)
    per = len(r0) // n
    jvp = (rh - r0) / h
    jvp_norm = np.linalg.norm(jvp, axis=1)
    diff1 = r1 - r0
    shift = np.linalg.norm(diff1, axis=1)
    residual = np.linalg.norm(diff1 - jvp, axis=1)
    k0 = nearest_assign(r0, v)
    k1 = nearest_assign(r1, v)
    offset = np.linalg.norm(r0 - v[k0], axis=1)
    margin = voronoi_margin(r0, v, k0)

    report = BoundCheckReport(h=h, spec=str(spec) if spec is not None else "explicit")
    for m in range(len(r0)):
        ri = float(r_i[k0[m]])
        report.records.append(
            BoundRecord(
                sample_id=sample_offset + m // per,
                position=m % per,
                jvp_norm=float(jvp_norm[m]),
                r_i_assigned=ri,
                codes_changed=bool(k0[m] != k1[m]),
                taylor_residual=float(residual[m]),
                shift=float(shift[m]),
                offset=float(offset[m]),
                margin=float(margin[m]),
                regime=classify_regime(float(offset[m]), float(shift[m]), 0.5 * ri, float(margin[m])),
            )
        )
    return report


def model_encoder(model) -> Callable[[np.ndarray], np.ndarray]:
    def enc(x):
        return encode_batches(model, np.asarray(x, dtype=np.float32))

    return enc

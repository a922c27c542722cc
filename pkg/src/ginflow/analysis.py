"""Identifiability diagnostics for a trained flow.

* spectrum: per-dimension standard deviation of the latents, sorted, with a
  gap-ratio estimate of how many dimensions carry information;
* latent matching: |Pearson r| between true and estimated latents, optimal
  one-to-one assignment, and a per-pair affine fit ``z = a w + b``;
* sufficient-statistic fit: least squares of ``(z, z^2)`` on ``(w, w^2, 1)``,
  whose quadratic block should vanish and whose linear block should have one
  dominant entry per row;
* L-matrix check: rank and conditioning of the differences of Gaussian
  natural parameters across classes.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy.optimize import linear_sum_assignment

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Thresholds:
    min_abs_r: float = 0.95
    min_gap: float = 5.0
    max_quad_mass: float = 0.1
    min_dominance: float = 10.0


# ---------------------------------------------------------------------------
# spectrum


@dataclass
class SpectrumReport:
    stds: list[float]           # sorted descending
    order: list[int]            # original dimension index of each sorted entry
    informative_count: int
    gap_ratio: float | None
    per_class: list[list[float]] = field(default_factory=list)  # (M, D), sorted like stds
    ground_truth: list[float] | None = None                     # sorted descending


def gap_estimate(sorted_stds) -> tuple[int, float | None]:
    """Informative count = position of the largest ratio between neighbours."""
    s = np.asarray(sorted_stds, dtype=np.float64)
    if s.size == 0 or s[0] <= 0:
        return 0, None
    if s.size == 1:
        return 1, None
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(s[1:] > 0, s[:-1] / np.where(s[1:] > 0, s[1:], 1.0),
                          np.where(s[:-1] > 0, np.inf, np.nan))
    ratios = np.nan_to_num(ratios, nan=-np.inf, posinf=np.inf)
    k = int(np.argmax(ratios))
    return k + 1, float(ratios[k])


def spectrum_of(w, u=None, z=None) -> SpectrumReport:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or len(w) == 0:
        raise ValueError("spectrum needs a non-empty (N, D) array")
    stds = w.std(axis=0)
    order = np.argsort(-stds, kind="stable")
    count, gap = gap_estimate(stds[order])
    per_class = []
    if u is not None:
        u = np.asarray(u)
        for c in np.unique(u):
            per_class.append(w[u == c].std(axis=0)[order].tolist())
    gt = None
    if z is not None:
        gt = np.sort(np.asarray(z).std(axis=0))[::-1].tolist()
    return SpectrumReport(stds[order].tolist(), order.tolist(), count, gap, per_class, gt)


def spectrum(model, dataset) -> SpectrumReport:
    if model.dim != dataset.dim:
        raise ValueError(f"model dim {model.dim} != dataset dim {dataset.dim}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    w, _ = model.forward(dataset.x)
    return spectrum_of(w, dataset.u, dataset.z)


# ---------------------------------------------------------------------------
# latent matching


@dataclass
class RecoveryReport:
    pairs: list[dict]              # true, est, abs_r, a, b, rms
    noise_dims: list[int]
    excluded: list[int]            # zero-variance estimated dims
    abs_corr: list[list[float]]    # (n, d)

    @property
    def min_abs_r(self) -> float:
        return min(p["abs_r"] for p in self.pairs) if self.pairs else 0.0


def abs_pearson(z, w) -> np.ndarray:
    """|corr(z_i, w_j)| as an (n, d) matrix; zero-variance columns give NaN."""
    zc = z - z.mean(axis=0)
    wc = w - w.mean(axis=0)
    zs = np.sqrt((zc * zc).sum(axis=0))
    ws = np.sqrt((wc * wc).sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (zc.T @ wc) / np.outer(zs, ws)
    return np.abs(r)


def best_assignment(score: np.ndarray) -> list[tuple[int, int]]:
    """Injective rows -> columns maximising the total score.

    Exhaustive for up to 4 rows, Hungarian otherwise.
    """
    n, d = score.shape
    if n > d:
        raise ValueError(f"cannot assign {n} true dims to {d} usable estimated dims")
    if n <= 4:
        best, best_cols = -np.inf, None
        for cols in itertools.permutations(range(d), n):
            total = score[np.arange(n), cols].sum()
            if total > best:
                best, best_cols = total, cols
        return list(zip(range(n), best_cols))
    rows, cols = linear_sum_assignment(-score)
    return list(zip(rows.tolist(), cols.tolist()))


def match_latents(z, w) -> RecoveryReport:
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if len(z) != len(w):
        raise ValueError("z and w must be sampled on the same records")
    r = abs_pearson(z, w)
    usable = [j for j in range(w.shape[1]) if w[:, j].std() > 0]
    excluded = [j for j in range(w.shape[1]) if j not in usable]
    sub = np.nan_to_num(r[:, usable], nan=0.0)
    pairs = []
    for i, jj in best_assignment(sub):
        j = usable[jj]
        a, b = np.polyfit(w[:, j], z[:, i], 1)
        resid = z[:, i] - (a * w[:, j] + b)
        pairs.append({"true": i, "est": j, "abs_r": float(sub[i, jj]), "a": float(a),
                      "b": float(b), "rms": float(np.sqrt(np.mean(resid ** 2)))})
    used = {p["est"] for p in pairs}
    noise = [j for j in usable if j not in used]
    return RecoveryReport(pairs, noise, excluded, np.nan_to_num(r, nan=0.0).tolist())


# ---------------------------------------------------------------------------
# sufficient-statistic fit


@dataclass
class AffineStatFit:
    A: list[list[float]]        # (2n, 2d), columns (w_1..w_d, w_1^2..w_d^2)
    c: list[float]              # (2n,)
    fit_rms: float
    quad_mass: list[float]      # per informative row
    dominance: list[float]      # per informative row
    rank_deficient: bool = False

    @property
    def max_quad_mass(self) -> float:
        return max(self.quad_mass)

    @property
    def min_dominance(self) -> float:
        return min(self.dominance)


def affine_stat_fit(z, w) -> AffineStatFit:
    """Least squares fit of ``T(z) = A T'(w) + c`` with ``T(v) = (v, v^2)``.

    The regression is solved on centred features ``(w - m, (w - m)^2)`` to
    avoid the near-collinearity of ``w`` and ``w^2`` when a column has small
    spread around a large mean; the quadratic block is unchanged by this and
    the returned ``A``, ``c`` are mapped back to the raw basis.

    ``quad_mass`` and ``dominance`` use standardised coefficients
    (coefficient * feature std / target std) of the rows for ``z`` itself:
    ``quad_mass = max |A2| / max |A1|`` and ``dominance`` is the largest
    ``|A1|`` entry over the second largest.
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n, d = z.shape[1], w.shape[1]
    n_coef = 2 * n * (2 * d + 1)
    if len(z) < 10 * n_coef:
        raise ValueError(f"need at least {10 * n_coef} samples for {n_coef} coefficients")

    m = w.mean(axis=0)
    wc = w - m
    X = np.hstack([wc, wc * wc, np.ones((len(w), 1))])
    T = np.hstack([z, z * z])
    rank = np.linalg.matrix_rank(X)
    deficient = bool(rank < X.shape[1])
    if deficient:
        warnings.warn(f"design matrix rank {rank} < {X.shape[1]}; using pseudoinverse",
                      RuntimeWarning, stacklevel=2)
    coef, *_ = np.linalg.lstsq(X, T, rcond=None)
    resid = T - X @ coef
    fit_rms = float(np.sqrt(np.mean(resid[:, :n] ** 2)))

    B = coef.T                      # (2n, 2d+1) in the centred basis
    A1c, A2c, cc = B[:, :d], B[:, d:2 * d], B[:, -1]
    A1 = A1c - 2.0 * A2c * m
    A2 = A2c
    c = cc - A1c @ m + A2c @ (m * m)

    feat_sd = X[:, :-1].std(axis=0)
    quad, dom = [], []
    for i in range(n):
        tsd = z[:, i].std()
        scale = feat_sd / tsd if tsd > 0 else feat_sd
        s1 = np.abs(A1c[i] * scale[:d])
        s2 = np.abs(A2c[i] * scale[d:])
        top = s1.max()
        quad.append(float(s2.max() / top) if top > 0 else float("inf"))
        ranked = np.sort(s1)[::-1]
        if d == 1:
            dom.append(float("inf"))
        else:
            dom.append(float(ranked[0] / ranked[1]) if ranked[1] > 0 else float("inf"))
    return AffineStatFit(np.hstack([A1, A2]).tolist(), c.tolist(), fit_rms, quad, dom, deficient)


# ---------------------------------------------------------------------------
# identifiability condition


@dataclass
class LMatrixReport:
    n_classes: int
    n_dims: int
    n_stats: int                 # k
    rank: int
    condition_number: float | None
    required_conditions: int     # n k + 1
    enough_conditions: bool
    full_rank: bool


def natural_params(means, variances) -> np.ndarray:
    """Gaussian natural parameters per class: (mu / var, -1 / (2 var)) per dimension."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    return np.hstack([means / variances, -0.5 / variances])


def check_L_matrix(means, variances, tol: float | None = None) -> LMatrixReport:
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
    if means.shape != variances.shape:
        raise ValueError("means and variances must have the same shape")
    M, n = means.shape
    if M < 2:
        raise ValueError("need at least two classes")
    if not np.all(np.isfinite(variances)) or np.any(variances <= 0):
        raise ValueError("degenerate variances")
    lam = natural_params(means, variances)          # (M, nk)
    L = (lam[1:] - lam[0]).T                        # (nk, M-1)
    sv = np.linalg.svd(L, compute_uv=False)
    if tol is None:
        tol = sv.max(initial=0.0) * max(L.shape) * np.finfo(float).eps
    rank = int(np.sum(sv > tol))
    nk = 2 * n
    cond = float(sv[0] / sv[nk - 1]) if rank == nk and len(sv) >= nk else None
    return LMatrixReport(M, n, 2, rank, cond, nk + 1, M >= nk + 1, rank == nk)


# ---------------------------------------------------------------------------
# full analysis and report files


@dataclass
class Analysis:
    spectrum: SpectrumReport
    recovery: RecoveryReport | None
    stat_fit: AffineStatFit | None
    lmatrix: LMatrixReport | None
    thresholds: Thresholds
    n_informative: int | None

    def verdict(self) -> dict:
        t = self.thresholds
        out = {}
        if self.n_informative is not None:
            gap = self.spectrum.gap_ratio
            out["dimension_discovery"] = bool(
                self.spectrum.informative_count == self.n_informative
                and gap is not None and gap >= t.min_gap)
        if self.recovery is not None:
            out["latent_matching"] = bool(self.recovery.pairs and
                                          self.recovery.min_abs_r >= t.min_abs_r)
        if self.stat_fit is not None:
            out["sufficient_stat_structure"] = bool(
                self.stat_fit.max_quad_mass <= t.max_quad_mass
                and self.stat_fit.min_dominance >= t.min_dominance)
        out["recovery_pass"] = bool(out.get("dimension_discovery", False)
                                    and out.get("latent_matching", False))
        return out

    def to_dict(self) -> dict:
        return _clean({
            "schema_version": REPORT_SCHEMA_VERSION,
            "thresholds": asdict(self.thresholds),
            "n_informative_true": self.n_informative,
            "spectrum": asdict(self.spectrum),
            "recovery": None if self.recovery is None else asdict(self.recovery),
            "sufficient_stat_fit": None if self.stat_fit is None else asdict(self.stat_fit),
            "l_matrix": None if self.lmatrix is None else asdict(self.lmatrix),
            "verdict": self.verdict(),
        })


def analyze(model, dataset, thresholds: Thresholds = Thresholds()) -> tuple[Analysis, np.ndarray]:
    """Run every diagnostic; returns the analysis and the latents ``w``."""
    if model.dim != dataset.dim:
        raise ValueError(f"model dim {model.dim} != dataset dim {dataset.dim}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    w, _ = model.forward(dataset.x)
    spec = spectrum_of(w, dataset.u, dataset.z)
    prov = dataset.provenance or {}
    n_inf = prov.get("spec", {}).get("n_informative")
    recovery = fit = lmat = None
    if dataset.z is not None and n_inf:
        z_inf = dataset.z[:, :n_inf]
        recovery = match_latents(z_inf, w)
        fit = affine_stat_fit(z_inf, w)
    if "cluster_means" in prov:
        lmat = check_L_matrix(prov["cluster_means"], prov["cluster_variances"])
    return Analysis(spec, recovery, fit, lmat, thresholds, n_inf), w


def _clean(obj):
    """Make a structure strict-JSON safe: non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_json(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2) + "\n"


def spectrum_csv(spec: SpectrumReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["rank", "dim", "std", "ground_truth_std"])
    for k, (dim, s) in enumerate(zip(spec.order, spec.stds)):
        gt = "" if spec.ground_truth is None else repr(spec.ground_truth[k])
        writer.writerow([k, dim, repr(s), gt])
    return buf.getvalue()


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
            "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def scatter_svg(xy, labels, title: str = "", size: int = 480, max_points: int = 3000) -> str:
    """Scatter plot of the first ``max_points`` rows, coloured by label."""
    xy = np.asarray(xy, dtype=np.float64)[:max_points]
    labels = np.asarray(labels)[:max_points]
    pad = 30
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pts = pad + (xy - lo) / span * (size - 2 * pad)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<text x="{pad}" y="{pad - 10}" font-size="12">{escape(title)}</text>']
    for (px, py), lab in zip(pts, labels):
        colour = _PALETTE[int(lab) % len(_PALETTE)]
        out.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="1.2" fill="{colour}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(analysis: Analysis, w, u, out_dir, extra: dict | None = None) -> dict[str, Path]:
    """Write report.json, spectrum.csv and scatter.svg into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = analysis.to_dict()
    if extra:
        report.update(_clean(extra))
    top = analysis.spectrum.order[:2] if len(analysis.spectrum.order) >= 2 else [0, 0]
    paths = {
        "report": out / "report.json",
        "spectrum": out / "spectrum.csv",
        "scatter": out / "scatter.svg",
    }
    paths["report"].write_text(report_json(report))
    paths["spectrum"].write_text(spectrum_csv(analysis.spectrum))
    paths["scatter"].write_text(scatter_svg(np.asarray(w)[:, top], u,
                                            f"latent dims {top[0]} and {top[1]}"))
    return paths


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())

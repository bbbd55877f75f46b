"""Synthetic cohort generator with planted tumor/TME latent structure.

Each case draws two independent latent vectors z_T and z_E. Gene subsets are
noisy linear readouts of their latent (tumor genes from z_T, TME genes from
z_E). Slide grids carry the same latents spatially: patches inside a planted
tumor blob hold a z_T-derived signature, patches outside a z_E-derived one,
and the 20x grid is the exact 2x upsampling of the 10x signal field plus
independent fine-scale noise. Labels are deterministic functions of the
latents, so every downstream task is solvable and the tumor/TME split is
recoverable by construction.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from .config import SynthConfig
from .data import Case, Cohort, dense_grid

# Slide signatures are weaker than gene readouts so the slide-only task is
# genuinely harder than the multi-modal one.
_GENE_SIGNAL = 1.0
_SLIDE_SIGNAL = 0.8
_SURV_COEF_NORM = 3.0
_CENSOR_RATE = 0.25
_LATENT_MEAN_BAND = (0.25, 0.6)


def survival_quartile_bins(times) -> np.ndarray:
    """Discretize positive times into four quartile bins.

    Bin boundaries are the 25/50/75 linear-interpolation percentiles of the
    input; values equal to a boundary go to the lower bin.
    """
    t = np.asarray(times, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("times must be a nonempty 1-D vector")
    if np.any(t <= 0):
        raise ValueError("survival times must be positive")
    bounds = np.percentile(t, [25, 50, 75])
    return np.searchsorted(bounds, t, side="left").astype(np.int64)


def _draw_latent(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Standard normal latent, resampled until |mean| falls inside a band.

    The lower edge keeps the sign-based labels away from their decision
    boundary; the upper edge bounds the lever arm any single case exerts on a
    linear probe. Together they make the noise-free cohort exactly separable
    by a closed-form least-squares readout.
    """
    lo, hi = _LATENT_MEAN_BAND
    for _ in range(500):
        z = rng.standard_normal(dim)
        if lo <= abs(z.mean()) <= hi:
            return z
    return z  # pragma: no cover - probability ~ 1e-100


def _plant_tumor_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Elliptical blob covering 10-90% of the grid; half-plane fallback."""
    n = h * w
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for _ in range(50):
        cy = rng.uniform(0, h - 1) if h > 1 else 0.0
        cx = rng.uniform(0, w - 1) if w > 1 else 0.0
        ry = rng.uniform(0.2, 0.6) * max(h, 1)
        rx = rng.uniform(0.2, 0.6) * max(w, 1)
        mask = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        frac = mask.sum() / n
        if 0.1 <= frac <= 0.9:
            return mask
    mask = rows < (h + 1) // 2
    if 0.1 <= mask.sum() / n <= 0.9:
        return mask
    mask = np.zeros((h, w), dtype=bool)
    mask.flat[: max(1, n // 2)] = True
    return mask


def _grade_thresholds(latent_dim: int) -> np.ndarray:
    """Tercile cut points of ||z_T||^2 under its chi-square law.

    Fixed theoretical quantiles keep the grade label a per-case deterministic
    function of the latent instead of a cohort-relative one.
    """
    return stats.chi2.ppf([1.0 / 3.0, 2.0 / 3.0], df=latent_dim)


def generate_cohort(cfg: SynthConfig) -> Cohort:
    """Generate a deterministic synthetic cohort from ``cfg``.

    Case generation uses per-case spawned seeds, so cases are independent of
    each other and of the cohort size ordering.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.n_cases + 1)
    cohort_rng = np.random.Generator(np.random.PCG64(children[0]))

    latent = cfg.latent_dim
    # Cohort-level mixing matrices and survival coefficients. Gene mixing
    # columns are recentered to a fixed common column sum, so the mean of a
    # gene subset is exactly proportional to the mean of its latent: the
    # sign-based class structure stays linearly readable from gene means.
    def gene_mixing(n_genes: int) -> np.ndarray:
        a = cohort_rng.standard_normal((n_genes, latent)) * (_GENE_SIGNAL / np.sqrt(latent))
        return a - a.mean(axis=0, keepdims=True) + _GENE_SIGNAL / np.sqrt(latent)

    a_tumor = gene_mixing(cfg.n_tumor_genes)
    a_tme = gene_mixing(cfg.n_tme_genes)
    m_tumor = cohort_rng.standard_normal((cfg.embed_dim, latent)) * (_SLIDE_SIGNAL / np.sqrt(latent))
    m_tme = cohort_rng.standard_normal((cfg.embed_dim, latent)) * (_SLIDE_SIGNAL / np.sqrt(latent))
    w_surv = cohort_rng.standard_normal(2 * latent)
    w_surv *= _SURV_COEF_NORM / np.linalg.norm(w_surv)

    # Interleave tumor/TME gene ids so the partition is not positional.
    gene_ids = [f"G{i:04d}" for i in range(cfg.n_genes)]
    perm = cohort_rng.permutation(cfg.n_genes)
    tumor_idx = np.sort(perm[: cfg.n_tumor_genes])
    tme_idx = np.sort(perm[cfg.n_tumor_genes :])

    grade_cuts = _grade_thresholds(latent)
    h10, w10 = cfg.grid_h10, cfg.grid_w10
    sigma = cfg.noise_sigma

    cases: list[Case] = []
    observed_times = np.empty(cfg.n_cases)
    censored_flags = np.empty(cfg.n_cases, dtype=bool)
    for i in range(cfg.n_cases):
        rng = np.random.Generator(np.random.PCG64(children[i + 1]))
        z_t = _draw_latent(rng, latent)
        z_e = _draw_latent(rng, latent)

        genes_tumor = a_tumor @ z_t + sigma * rng.standard_normal(cfg.n_tumor_genes)
        genes_tme = a_tme @ z_e + sigma * rng.standard_normal(cfg.n_tme_genes)

        mask = _plant_tumor_mask(rng, h10, w10)
        sig_t = m_tumor @ z_t
        sig_e = m_tme @ z_e
        field10 = np.where(mask[..., None], sig_t, sig_e).astype(np.float32)
        grid10 = field10 + sigma * rng.standard_normal((h10, w10, cfg.embed_dim))
        # 2x spatial upsampling of the same field, with its own fine noise.
        field20 = np.repeat(np.repeat(field10, 2, axis=0), 2, axis=1)
        grid20 = field20 + sigma * rng.standard_normal((2 * h10, 2 * w10, cfg.embed_dim))

        diagnosis = 2 * int(z_t.mean() > 0) + int(z_e.mean() > 0)
        grade = int(np.searchsorted(grade_cuts, z_t @ z_t, side="right"))

        hazard = np.exp(w_surv @ np.concatenate([z_t, z_e]))
        event_time = rng.exponential(1.0 / hazard)
        censored = bool(rng.random() < _CENSOR_RATE)
        if censored:
            time = max(event_time * rng.random(), 1e-9)
        else:
            time = event_time
        observed_times[i] = time
        censored_flags[i] = censored

        cases.append(
            Case(
                case_id=f"case{i:04d}",
                genes_tumor=genes_tumor.astype(np.float32),
                genes_tme=genes_tme.astype(np.float32),
                grid10=dense_grid(grid10.astype(np.float32)),
                grid20=dense_grid(grid20.astype(np.float32)),
                diagnosis=diagnosis,
                grade=grade,
                surv_bin=0,  # filled below from cohort quartiles
                surv_time=float(time),
                censored=censored,
                tumor_mask10=mask,
            )
        )

    bins = survival_quartile_bins(observed_times)
    for case, b in zip(cases, bins):
        case.surv_bin = int(b)

    dims = {
        "h10": h10,
        "w10": w10,
        "h20": 2 * h10,
        "w20": 2 * w10,
        "c": cfg.embed_dim,
        "n_genes": cfg.n_genes,
    }
    return Cohort(cases=cases, gene_ids=gene_ids, tumor_idx=tumor_idx, tme_idx=tme_idx, dims=dims)


def pool_2x2(grid: np.ndarray) -> np.ndarray:
    """Average-pool an (2h, 2w, c) array down to (h, w, c).

    Sums each 2x2 block pairwise so that blocks of four identical float32
    values pool back to that value exactly.
    """
    h2, w2, c = grid.shape
    if h2 % 2 or w2 % 2:
        raise ValueError("grid dims must be even")
    blocks = grid.reshape(h2 // 2, 2, w2 // 2, 2, c)
    return (blocks.sum(axis=3).sum(axis=1)) / 4.0

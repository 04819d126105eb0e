"""Classical LSB steganalysis bank used for the detectability study.

Four detectors, each returning an estimated embedding rate in [0, 1]:
sample-pair analysis and a primary-sets variant (pair-symmetry quadratics
after Dumitrescu et al.), RS analysis (Fridrich's regular/singular group
counts) and the sequential chi-square attack (Westfeld/Pfitzner).  The
suspicion score of an image is the mean of the four estimates averaged
over color channels — detectors built for pixel-domain LSB embedding,
turned here on latent-domain stego images to measure how little they see.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import chi2 as chi2_dist

from .errors import DimensionError

MIN_SIZE = 64


def _check_plane(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise DimensionError(f"detector expects a 2-D plane, got shape {plane.shape}")
    if min(plane.shape) < MIN_SIZE:
        raise DimensionError(
            f"image {plane.shape} too small for block statistics (need >= {MIN_SIZE}x{MIN_SIZE})"
        )
    return plane.astype(np.int64)


def _pair_quadratic(u: np.ndarray, v: np.ndarray) -> float:
    """Estimated rate from the parity asymmetry of sample pairs.

    With q = p/2 the per-sample flip probability, the closed trace-set
    dynamics give 2K q^2 - 2(K - D) q + (W - D) = 0 where K counts
    same-class pairs, W same-class unequal pairs and D = X - Y + W the
    parity asymmetry; the smaller root yields p = 2q.
    """
    u = u.ravel()
    v = v.ravel()
    v_even = (v & 1) == 0
    same_class = (u >> 1) == (v >> 1)
    x = int(np.count_nonzero((v_even & (u < v)) | (~v_even & (u > v))))
    y = int(np.count_nonzero((v_even & (u > v)) | (~v_even & (u < v))))
    w = int(np.count_nonzero(same_class & (u != v)))
    z = int(np.count_nonzero(u == v))
    k = w + z
    d = x - y + w
    if k == 0:
        return 0.0
    a, b, c = 2.0 * k, -2.0 * (k - d), float(w - d)
    disc = b * b - 4 * a * c
    if disc < 0:
        # complex roots only occur under near-total embedding; take the
        # real part, which sits at the q ~ 0.5 saturation point
        q = -b / (2 * a)
    else:
        roots = ((-b - np.sqrt(disc)) / (2 * a), (-b + np.sqrt(disc)) / (2 * a))
        q = min(roots, key=abs)
    return float(np.clip(2.0 * q, 0.0, 1.0))


def sample_pairs(plane: np.ndarray) -> float:
    """Sample-pair analysis over horizontal and vertical neighbors."""
    p = _check_plane(plane)
    u = np.concatenate([p[:, :-1].ravel(), p[:-1, :].ravel()])
    v = np.concatenate([p[:, 1:].ravel(), p[1:, :].ravel()])
    return _pair_quadratic(u, v)


def primary_sets(plane: np.ndarray) -> float:
    """Primary-sets estimator on diagonal and anti-diagonal neighbors."""
    p = _check_plane(plane)
    u = np.concatenate([p[:-1, :-1].ravel(), p[:-1, 1:].ravel()])
    v = np.concatenate([p[1:, 1:].ravel(), p[1:, :-1].ravel()])
    return _pair_quadratic(u, v)


# ---------------------------------------------------------------------------
# RS analysis


_RS_MASK = np.array([0, 1, 1, 0])


def _flip_lsb(g: np.ndarray) -> np.ndarray:
    return g ^ 1


def _flip_shifted(g: np.ndarray) -> np.ndarray:
    # invertible flip on the shifted lattice: 2k <-> 2k-1
    return np.where((g & 1) == 0, g - 1, g + 1)


def _smoothness(groups: np.ndarray) -> np.ndarray:
    return np.abs(np.diff(groups, axis=1)).sum(axis=1)


def _rs_counts(groups: np.ndarray, mask: np.ndarray, shifted: bool) -> tuple[int, int]:
    base = _smoothness(groups)
    flip = _flip_shifted if shifted else _flip_lsb
    flipped = np.where(mask[None, :] == 1, flip(groups), groups)
    after = _smoothness(flipped)
    return int(np.count_nonzero(after > base)), int(np.count_nonzero(after < base))


def rs_analysis(plane: np.ndarray) -> float:
    """Fridrich's RS estimate from regular/singular group count crossings."""
    p = _check_plane(plane)
    flat = p.ravel()
    n_groups = flat.size // 4
    groups = flat[: n_groups * 4].reshape(n_groups, 4)
    all_flipped = _flip_lsb(groups)

    r0, s0 = _rs_counts(groups, _RS_MASK, shifted=False)
    rm0, sm0 = _rs_counts(groups, _RS_MASK, shifted=True)
    r1, s1 = _rs_counts(all_flipped, _RS_MASK, shifted=False)
    rm1, sm1 = _rs_counts(all_flipped, _RS_MASK, shifted=True)

    d0 = r0 - s0
    dm0 = rm0 - sm0
    d1 = r1 - s1
    dm1 = rm1 - sm1

    a = 2.0 * (d1 + d0)
    b = float(dm0 - dm1 - d1 - 3 * d0)
    c = float(d0 - dm0)
    if a == 0:
        z = -c / b if b else 0.0
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            z = -b / (2 * a)  # real part; the crossing degenerates near z=0.5
        else:
            roots = ((-b - np.sqrt(disc)) / (2 * a), (-b + np.sqrt(disc)) / (2 * a))
            z = min(roots, key=abs)
    if z == 0.5:
        return 0.0
    rate = z / (z - 0.5)
    if not np.isfinite(rate):
        return 0.0
    return float(np.clip(rate, 0.0, 1.0))


# ---------------------------------------------------------------------------
# chi-square attack


def chi_square_attack(plane: np.ndarray, block: int = 1024) -> float:
    """Sequential chi-square scan: mean pair-of-values p-value over prefixes.

    Sequential LSB embedding equalizes histogram pairs (2k, 2k+1) from the
    start of the image onward; averaging the p-value over growing prefixes
    approximates the embedded fraction.
    """
    p = _check_plane(plane)
    flat = p.ravel()
    pvalues = []
    counts = np.zeros(256, dtype=np.int64)
    for start in range(0, flat.size, block):
        chunk = flat[start : start + block]
        counts += np.bincount(chunk, minlength=256)
        pairs = counts.reshape(128, 2)
        expected = pairs.sum(axis=1) / 2.0
        keep = expected > 4
        if keep.sum() < 2:
            pvalues.append(0.0)
            continue
        stat = ((pairs[keep, 0] - expected[keep]) ** 2 / expected[keep]).sum()
        dof = int(keep.sum()) - 1
        pvalues.append(float(chi2_dist.sf(stat, dof)))
    return float(np.clip(np.mean(pvalues), 0.0, 1.0)) if pvalues else 0.0


# ---------------------------------------------------------------------------
# fusion


DETECTORS = {
    "sample_pairs": sample_pairs,
    "rs_analysis": rs_analysis,
    "chi_square": chi_square_attack,
    "primary_sets": primary_sets,
}


def detector_report(image: np.ndarray) -> dict[str, float]:
    """Per-detector estimates averaged over channels of an 8-bit RGB image."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.dtype != np.uint8:
        raise DimensionError("steganalysis expects an 8-bit (H,W,C) image")
    out = {}
    for name, fn in DETECTORS.items():
        out[name] = float(np.mean([fn(image[:, :, c]) for c in range(image.shape[2])]))
    return out


def steganalysis_score(image: np.ndarray) -> float:
    """Fused suspicion score in [0, 1]: mean of the detector estimates."""
    report = detector_report(image)
    return float(np.clip(np.mean(list(report.values())), 0.0, 1.0))


def lsb_embed(image: np.ndarray, rate: float, rng: np.random.Generator, sequential: bool = True) -> np.ndarray:
    """Classic LSB-replacement oracle used to validate the detectors.

    Replaces the LSB of a fraction ``rate`` of samples with random bits,
    either sequentially from the top-left (the classic tool behavior) or
    scattered uniformly.
    """
    out = np.array(image, copy=True)
    flat = out.reshape(-1)
    n = int(round(rate * flat.size))
    if sequential:
        idx = np.arange(n)
    else:
        idx = rng.choice(flat.size, size=n, replace=False)
    bits = rng.integers(0, 2, size=n, dtype=flat.dtype)
    flat[idx] = (flat[idx] & ~np.uint8(1)) | bits
    return out

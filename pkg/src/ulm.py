"""Localization-microscopy stages: clutter filter, detection, tracking, rendering, aberration maps."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as spfft
from scipy import ndimage
from scipy.optimize import linear_sum_assignment, minimize_scalar
from skimage.feature import match_template, peak_local_max

from src.beamform import das_beamform
from src.exceptions import DomainError
from src.models import (AberrationFunction, AberrationMap, BeamformedImage, DensityMap, ImageGrid, ProbeGeometry,
                        ScattererSet, Track, TransmitScheme)
from src.simulator import simulate_frame

logger = logging.getLogger(__name__)

Detection = Tuple[float, float, float]

SMOOTHN_TOL = 1e-6
SMOOTHN_MAX_ITER = 200


def svd_clutter_split(stack: Sequence[BeamformedImage],
                      cutoff_rank: int) -> Tuple[List[BeamformedImage], List[BeamformedImage]]:
    """Split a frame stack into its filtered part and the removed leading singular components.

    Raises:
        DomainError: If there are fewer than two frames or the rank is too large
    """
    if len(stack) < 2:
        raise DomainError(f"SVD filtering needs at least two frames, got {len(stack)}")
    grid = stack[0].grid
    casorati = np.stack([img.pixels.reshape(-1) for img in stack], axis=1)
    if not 0 <= cutoff_rank < min(casorati.shape):
        raise DomainError(f"cutoff rank {cutoff_rank} must be in [0, {min(casorati.shape)})")
    u, s, vh = np.linalg.svd(casorati, full_matrices=False)
    removed = (u[:, :cutoff_rank] * s[:cutoff_rank]) @ vh[:cutoff_rank]
    filtered = casorati - removed
    to_images = lambda m: [BeamformedImage(grid=grid, pixels=m[:, k].reshape(grid.shape)) for k in range(m.shape[1])]
    return to_images(filtered), to_images(removed)


def svd_clutter_filter(stack: Sequence[BeamformedImage], cutoff_rank: int) -> List[BeamformedImage]:
    """Zero the first cutoff_rank singular components of the space-time matrix."""
    return svd_clutter_split(stack, cutoff_rank)[0]


def make_psf_template(probe: ProbeGeometry, scheme: TransmitScheme, grid: ImageGrid, half_size: int = 3) -> np.ndarray:
    """Beamformed image of an isolated scatterer at the grid center, (2 h + 1) pixels square."""
    row, col = grid.nz // 2, grid.nx // 2
    x0, z0 = grid.to_position(row, col)
    local = ImageGrid(x0=float(x0) - half_size * grid.dx, z0=float(z0) - half_size * grid.dz, dx=grid.dx,
                      dz=grid.dz, nx=2 * half_size + 1, nz=2 * half_size + 1)
    iq = simulate_frame(ScattererSet(x=[x0], z=[z0], reflectivity=[1.0]), probe, scheme)
    return das_beamform(iq, local, probe, scheme).pixels


def _paraboloid_offset(patch: np.ndarray) -> Tuple[float, float]:
    """Sub-pixel (row, col) offset of a 3x3 neighbourhood's paraboloid vertex."""
    rr, cc = np.mgrid[-1:2, -1:2]
    design = np.stack([np.ones(9), cc.ravel(), rr.ravel(), cc.ravel() ** 2, (cc * rr).ravel(), rr.ravel() ** 2], 1)
    a, b, c, d, e, f = np.linalg.lstsq(design, patch.ravel(), rcond=None)[0]
    hessian = np.array([[2 * d, e], [e, 2 * f]])
    if np.linalg.det(hessian) <= 0 or d >= 0:
        return 0.0, 0.0
    dc, dr = np.linalg.solve(hessian, [-b, -c])
    if abs(dr) > 1 or abs(dc) > 1:
        return 0.0, 0.0
    return float(dr), float(dc)


def detect_microbubbles(image: BeamformedImage, psf_template: np.ndarray, corr_threshold: float = 0.6,
                        min_distance: int = 2) -> List[Detection]:
    """Localize bubbles by normalized correlation with the PSF magnitude.

    Args:
        image: Beamformed (filtered) frame
        psf_template: Complex PSF patch with odd extents
        corr_threshold: Minimum normalized correlation
        min_distance: Minimum peak separation in pixels

    Returns:
        List of (x, z, correlation) in meters
    """
    template = np.abs(np.asarray(psf_template))
    if template.shape[0] > image.grid.nz or template.shape[1] > image.grid.nx:
        raise DomainError(f"template {template.shape} is larger than the image {image.grid.shape}")
    ncc = match_template(image.envelope, template, pad_input=True)
    peaks = peak_local_max(ncc, min_distance=min_distance, threshold_abs=corr_threshold, exclude_border=False)
    padded = np.pad(ncc, 1, mode="edge")
    detections = []
    for row, col in peaks:
        dr, dc = _paraboloid_offset(padded[row:row + 3, col:col + 3])
        x, z = image.grid.to_position(row + dr, col + dc)
        detections.append((float(x), float(z), float(ncc[row, col])))
    return sorted(detections)


def detect_frames(images: Sequence[BeamformedImage], psf_template: np.ndarray, corr_threshold: float = 0.6,
                  workers: int = 1) -> List[List[Detection]]:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda img: detect_microbubbles(img, psf_template, corr_threshold), images))


def assign(previous: np.ndarray, current: np.ndarray, max_dist: float) -> List[Tuple[int, int]]:
    """Minimum-distance matching with pairs farther than max_dist forbidden.

    The largest set of feasible pairs wins; among those the smallest summed
    distance. Chosen pairs beyond the gate are dropped.
    """
    if previous.size == 0 or current.size == 0:
        return []
    cost = np.hypot(previous[:, None, 0] - current[None, :, 0], previous[:, None, 1] - current[None, :, 1])
    feasible = cost <= max_dist
    # Larger than any sum of feasible costs.
    infeasible = 1.0 + min(cost.shape) * float(np.max(cost, initial=0.0, where=feasible))
    rows, cols = linear_sum_assignment(np.where(feasible, cost, infeasible))
    return [(r, c) for r, c in zip(rows, cols) if feasible[r, c]]


def link_tracks(detections: Sequence[Sequence[Detection]], max_link_dist: float = 2.0, min_track_len: int = 16,
                pixel_size: float = 1.0, frame_rate: float = 1.0) -> List[Track]:
    """Link per-frame detections into tracks without gap filling.

    Args:
        detections: Per-frame lists of (x, z, ...) tuples in meters
        max_link_dist: Largest frame-to-frame step, in pixels
        min_track_len: Shortest track kept, in frames
        pixel_size: Meters per pixel
        frame_rate: Stored on the tracks for velocity estimates

    Returns:
        List of Track ordered by start frame then position
    """
    finished: List[List[Tuple[int, float, float]]] = []
    active: List[List[Tuple[int, float, float]]] = []
    for frame, frame_detections in enumerate(detections):
        points = np.array(sorted((float(d[0]), float(d[1])) for d in frame_detections)).reshape(-1, 2)
        last = np.array([t[-1][1:] for t in active]).reshape(-1, 2)
        pairs = assign(last / pixel_size, points / pixel_size, max_link_dist)
        matched_tracks = {r for r, _ in pairs}
        matched_points = {c for _, c in pairs}
        next_active = []
        for r, c in pairs:
            active[r].append((frame, points[c, 0], points[c, 1]))
            next_active.append(active[r])
        finished.extend(t for i, t in enumerate(active) if i not in matched_tracks)
        next_active.extend([(frame, points[c, 0], points[c, 1])] for c in range(len(points)) if c not in matched_points)
        active = next_active
    finished.extend(active)
    kept = sorted((t for t in finished if len(t) >= min_track_len), key=lambda t: (t[0][0], t[0][1], t[0][2]))
    return [
        Track(track_id, [p[0] for p in t], [p[1] for p in t], [p[2] for p in t], frame_rate)
        for track_id, t in enumerate(kept)
    ]


def track_mean_velocity(track: Track) -> Tuple[float, float]:
    return track.mean_velocity


def rasterize_track(track: Track, grid: ImageGrid) -> np.ndarray:
    """Distinct (row, col) pixels crossed by the track polyline, [K x 2]."""
    row, col = grid.to_index(track.x, track.z)
    if len(track) == 1:
        samples_r, samples_c = row, col
    else:
        parts_r, parts_c = [], []
        for k in range(len(track) - 1):
            length = np.hypot(row[k + 1] - row[k], col[k + 1] - col[k])
            steps = max(1, int(np.ceil(length / 0.5)))
            t = np.arange(steps) / steps
            parts_r.append(row[k] + t * (row[k + 1] - row[k]))
            parts_c.append(col[k] + t * (col[k + 1] - col[k]))
        parts_r.append(row[-1:])
        parts_c.append(col[-1:])
        samples_r, samples_c = np.concatenate(parts_r), np.concatenate(parts_c)
    pixels = np.stack([np.round(samples_r), np.round(samples_c)], axis=1).astype(int)
    inside = (pixels[:, 0] >= 0) & (pixels[:, 0] < grid.nz) & (pixels[:, 1] >= 0) & (pixels[:, 1] < grid.nx)
    return np.unique(pixels[inside], axis=0).reshape(-1, 2)


def accumulate_density(tracks: Sequence[Track], base_grid: ImageGrid, factor: int = 10,
                       min_len: int = 25) -> DensityMap:
    """Render tracks of at least min_len frames on a grid refined by `factor`."""
    fine = base_grid.refine(factor)
    counts = np.zeros(fine.shape)
    used = 0
    for track in tracks:
        if len(track) < min_len:
            continue
        pixels = rasterize_track(track, fine)
        np.add.at(counts, (pixels[:, 0], pixels[:, 1]), 1.0)
        used += 1
    logger.info(f"Density map from {used} of {len(tracks)} tracks")
    return DensityMap(grid=fine, counts=counts)


def _laplacian_eigenvalues(shape: Tuple[int, int]) -> np.ndarray:
    lam = np.zeros(shape)
    for axis, n in enumerate(shape):
        index = np.arange(n).reshape([-1 if a == axis else 1 for a in range(len(shape))])
        lam = lam + (-2 + 2 * np.cos(np.pi * index / n))
    return lam


def _smoothness_bounds(shape: Tuple[int, int]) -> Tuple[float, float]:
    dims = max(1, sum(n > 1 for n in shape))
    bound = lambda h: (((1 + np.sqrt(1 + 8 * h ** (2 / dims))) / 4 / h ** (2 / dims)) ** 2 - 1) / 16
    return np.log10(bound(0.99)), np.log10(bound(1e-6))


def smooth_fields(fields: np.ndarray, weights: np.ndarray, smoothness: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """Penalized least-squares smoothing of gridded fields with missing data.

    Solves min ||W^1/2 (yhat - y)||^2 + s ||Laplacian yhat||^2 in the DCT
    basis, iterating on the weights. Fields are [nz x nx x K], weights [nz x nx].
    When smoothness is None it is chosen by generalized cross-validation.

    Returns:
        Tuple of the smoothed fields and the smoothness used
    """
    shape = fields.shape[:2]
    observed = weights > 0
    if not np.any(observed):
        raise DomainError("no observed pixels to smooth")
    lam = _laplacian_eigenvalues(shape)[..., None]
    # nearest observed value as the starting guess
    _, (ri, ci) = ndimage.distance_transform_edt(~observed, return_indices=True)
    y = np.where(observed[..., None], fields, 0.0)
    yhat = fields[ri, ci]
    w = weights[..., None] / weights.max()
    weighted = not np.all(observed)
    relax = 1 + 0.75 * weighted
    auto = smoothness is None
    s = 0.0 if auto else float(smoothness)
    if s < 0:
        raise DomainError(f"smoothness must be non-negative, got {s}")
    n = observed.size
    low, high = _smoothness_bounds(shape)

    dctn = lambda a: spfft.dctn(a, type=2, norm="ortho", axes=(0, 1))
    idctn = lambda a: spfft.idctn(a, type=2, norm="ortho", axes=(0, 1))
    for iteration in range(SMOOTHN_MAX_ITER):
        spectrum = dctn(w * (y - yhat) + yhat)
        if auto:
            def gcv(log_s: float) -> float:
                gamma = 1.0 / (1.0 + 10 ** log_s * lam ** 2)
                trial = idctn(gamma * spectrum)
                rss = np.sum(w * (y - trial) ** 2) / fields.shape[2]
                return rss / observed.sum() / (1 - gamma.sum() / n) ** 2
            result = minimize_scalar(gcv, bounds=(low, high), method="bounded", options={"xatol": 0.1})
            s = 10 ** result.x
        gamma = 1.0 / (1.0 + s * lam ** 2)
        updated = relax * idctn(gamma * spectrum) + (1 - relax) * yhat
        change = np.linalg.norm(updated - yhat) / max(np.linalg.norm(updated), 1e-300)
        yhat = updated
        if change < SMOOTHN_TOL or not weighted:
            break
    if auto and (abs(np.log10(s) - low) < 0.2 or abs(np.log10(s) - high) < 0.2):
        logger.warning(f"GCV smoothness {s:.3g} reached its search bound")
    return yhat, s


def interpolate_aberration_map(samples: Sequence[Tuple[Tuple[float, float], AberrationFunction]], grid: ImageGrid,
                               smoothness: Optional[float] = None) -> AberrationMap:
    """Smooth scattered per-track aberration estimates into a per-pixel map.

    Args:
        samples: ((x, z), estimate) pairs, e.g. at track mean positions
        grid: Coarse map grid
        smoothness: Penalty weight s; chosen by GCV when None

    Returns:
        AberrationMap: Values [nz x nx x Ne] with amplitudes in (0, 1]
    """
    if not samples:
        raise DomainError("aberration map needs at least one sample")
    ne = len(samples[0][1])
    sums = np.zeros(grid.shape + (2 * ne,))
    counts = np.zeros(grid.shape)
    for (x, z), ab in samples:
        if len(ab) != ne:
            raise DomainError("aberration samples differ in element count")
        row, col = grid.to_index(x, z)
        r = int(np.clip(np.round(row), 0, grid.nz - 1))
        c = int(np.clip(np.round(col), 0, grid.nx - 1))
        sums[r, c] += np.concatenate([ab.values.real, ab.values.imag])
        counts[r, c] += 1
    fields = np.where(counts[..., None] > 0, sums / np.maximum(counts, 1)[..., None], 0.0)
    smoothed, s = smooth_fields(fields, counts, smoothness)
    logger.info(f"Aberration map from {len(samples)} samples, smoothness {s:.3g}")
    values = smoothed[..., :ne] + 1j * smoothed[..., ne:]
    magnitude = np.abs(values)
    clamped = np.clip(magnitude, 1e-6, 1.0)
    values = np.where(magnitude > 0, values * clamped / np.where(magnitude > 0, magnitude, 1), 1e-6)
    return AberrationMap(grid=grid, values=values)

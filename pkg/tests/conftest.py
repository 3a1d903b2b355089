"""Shared builders and independent oracles for the test suite.

The oracle functions here deliberately avoid the library's vectorized
code paths: they loop voxel by voxel or integrate numerically, so they
can disagree with the implementation when the implementation is wrong.
"""

import math

import numpy as np
import pytest
from scipy.special import ndtr

from voxeval.grid import GridGeometry, LabelVolume, ProbabilityVolume
from voxeval.metrics import CaseMetrics


def geom(dims=(4, 4, 4), spacing=(1.0, 1.0, 1.0)) -> GridGeometry:
    return GridGeometry(tuple(dims), tuple(spacing))


def label_volume(array, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    arr = np.asarray(array, dtype=np.uint8)
    return LabelVolume(geom(arr.shape, spacing), arr)


def one_hot_volume(labels: LabelVolume) -> ProbabilityVolume:
    channels = np.zeros((4, *labels.geometry.dims), dtype=np.float32)
    for c in range(4):
        channels[c] = labels.voxels == c
    return ProbabilityVolume(labels.geometry, channels)


def probability_volume(channels, spacing=(1.0, 1.0, 1.0)) -> ProbabilityVolume:
    arr = np.asarray(channels, dtype=np.float32)
    return ProbabilityVolume(geom(arr.shape[1:], spacing), arr)


def random_label_array(rng, dims, n_classes=4):
    return rng.integers(0, n_classes, size=dims).astype(np.uint8)


def random_probability_volume(rng, dims, spacing=(1.0, 1.0, 1.0)) -> ProbabilityVolume:
    raw = rng.random(size=(4, *dims)).astype(np.float64) + 1e-3
    channels = (raw / raw.sum(axis=0)).astype(np.float32)
    return probability_volume(channels, spacing)


def make_case_metrics(case_id, algorithm, dsc, confidence, ece, crps) -> CaseMetrics:
    """Synthetic CaseMetrics with every class holding the same value."""
    classes = (1, 2, 3)
    return CaseMetrics(
        case_id=case_id,
        algorithm=algorithm,
        dsc={c: dsc for c in classes},
        c_seg={c: confidence for c in classes},
        cece={c: ece for c in classes},
        crps={c: crps for c in classes},
        mean_dsc=dsc,
        mean_c_seg=confidence,
        mean_cece=ece,
        mean_crps=crps,
        empty_consensus_fg={c: False for c in classes},
        empty_consensus_bg={c: False for c in classes},
        sigma_zero={c: False for c in classes},
    )


# --- oracles --------------------------------------------------------------


def consensus_by_voxel_loop(rater_arrays, class_id):
    """Per-voxel triple-loop tri-partition, independent of the bitset path."""
    dims = rater_arrays[0].shape
    fg = np.zeros(dims, dtype=bool)
    bg = np.zeros(dims, dtype=bool)
    dissensus = np.zeros(dims, dtype=bool)
    for x in range(dims[0]):
        for y in range(dims[1]):
            for z in range(dims[2]):
                votes = [int(r[x, y, z] == class_id) for r in rater_arrays]
                if all(votes):
                    fg[x, y, z] = True
                elif not any(votes):
                    bg[x, y, z] = True
                else:
                    dissensus[x, y, z] = True
    return fg, bg, dissensus


def dsc_by_voxel_loop(prob: ProbabilityVolume, rater_arrays, class_id, threshold=0.5):
    """TP/FP/FN counting loop over the raw rater arrays."""
    dims = prob.geometry.dims
    tp = fp = fn = 0
    for x in range(dims[0]):
        for y in range(dims[1]):
            for z in range(dims[2]):
                votes = [int(r[x, y, z] == class_id) for r in rater_arrays]
                predicted = float(prob.channels[class_id][x, y, z]) >= threshold
                if all(votes):
                    if predicted:
                        tp += 1
                    else:
                        fn += 1
                elif not any(votes):
                    if predicted:
                        fp += 1
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def cece_by_voxel_loop(prob: ProbabilityVolume, labels: LabelVolume, bins, literal=False):
    """Brute-force bin assignment, one voxel at a time."""
    dims = prob.geometry.dims
    table = [[0, 0.0, 0.0] for _ in range(bins)]  # count, conf sum, correct sum
    n = 0
    for x in range(dims[0]):
        for y in range(dims[1]):
            for z in range(dims[2]):
                ps = [float(prob.channels[c][x, y, z]) for c in range(4)]
                conf = max(ps)
                predicted = ps.index(conf)  # first max = lowest class id
                correct = predicted == int(labels.voxels[x, y, z])
                m = min(int(conf * bins), bins - 1)
                table[m][0] += 1
                table[m][1] += conf
                table[m][2] += 1.0 if correct else 0.0
                n += 1
    total = 0.0
    for count, conf_sum, correct_sum in table:
        if count:
            weight = count / (bins if literal else n)
            total += weight * abs(correct_sum / count - conf_sum / count)
    return total


def crps_by_integration(mu: float, sigma: float, y: float) -> float:
    """Trapezoid integration of the squared CDF-vs-step gap.

    Step sigma/1e4 over [mu - 12 sigma, mu + 12 sigma], split at y so the
    integrand is smooth on each segment; outside that window the
    integrand is constant to ~1e-33 and handled analytically.
    """
    if sigma == 0.0:
        return abs(y - mu)
    h = sigma / 1e4
    lo, hi = mu - 12.0 * sigma, mu + 12.0 * sigma

    def cdf(x):
        return ndtr((x - mu) / sigma)

    def seg(a, b, f):
        if b <= a:
            return 0.0
        n = max(2, int(math.ceil((b - a) / h)) + 1)
        x = np.linspace(a, b, n)
        return float(np.trapezoid(f(x), x))

    if y < lo:
        return (lo - y) + seg(lo, hi, lambda x: (1.0 - cdf(x)) ** 2)
    if y > hi:
        return seg(lo, hi, lambda x: cdf(x) ** 2) + (y - hi)
    return seg(lo, y, lambda x: cdf(x) ** 2) + seg(y, hi, lambda x: (1.0 - cdf(x)) ** 2)


def pearson_by_formula(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    num = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    dx = math.sqrt(sum((x - mx) ** 2 for x in xs))
    dy = math.sqrt(sum((y - my) ** 2 for y in ys))
    return num / (dx * dy)


def average_ranks(values):
    """Tie-averaged ranks (1 = smallest) by direct enumeration."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


@pytest.fixture
def rng():
    return np.random.default_rng(20240907)

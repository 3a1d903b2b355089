"""Synthetic multi-rater phantoms with analytically known metric inputs.

Each organ class is a sphere; rater r sees the sphere inflated or
deflated by an integer radius delta, so the dissensus region is an
exactly known shell. Membership is voxel-center (no anti-aliasing), and
every ground-truth quantity is recomputed at generation time by an
exhaustive vectorized scan of the generated label maps; that scan is
the oracle the evaluation modules are checked against.

Prediction models:

* ``perfect``      - one-hot encoding of the unanimity map (voxels where
                     the raters disagree become background);
* ``blurred``      - the one-hot map convolved with a separable Gaussian
                     and renormalized per voxel;
* ``miscalibrated``- the winning channel's probability reduced by delta
                     (the removed mass spread over the other channels),
                     i.e. positive offsets bleed confidence away from
                     the winner while keeping it the argmax for
                     delta < 0.75.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .grid import (
    CLASS_NAMES,
    N_CHANNELS,
    ORGAN_CLASSES,
    GridGeometry,
    LabelVolume,
    ProbabilityVolume,
)
from .nifti import write_nifti


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius < 1:
            raise ValidationError(f"sphere radius must be >= 1, got {self.radius}")


@dataclass(frozen=True)
class PredictionModel:
    kind: str  # perfect | blurred | miscalibrated
    sigma: float = 0.0  # blurred: kernel sigma in voxels
    delta: float = 0.0  # miscalibrated: confidence offset

    def __post_init__(self):
        if self.kind not in ("perfect", "blurred", "miscalibrated"):
            raise ValidationError(f"unknown prediction model {self.kind!r}")
        if self.kind == "blurred" and not self.sigma > 0:
            raise ValidationError(f"blurred model needs sigma > 0, got {self.sigma}")
        if self.kind == "miscalibrated" and not -1.0 < self.delta < 1.0:
            raise ValidationError(f"miscalibrated delta must be in (-1, 1), got {self.delta}")


@dataclass(frozen=True)
class PhantomSpec:
    geometry: GridGeometry
    spheres: dict[int, Sphere]  # organ class id -> sphere
    rater_deltas: tuple[int, ...]
    prediction: PredictionModel = PredictionModel("perfect")
    seed: int = 0

    def __post_init__(self):
        if not self.spheres or any(c not in ORGAN_CLASSES for c in self.spheres):
            raise ValidationError(f"sphere classes must be a subset of {ORGAN_CLASSES}")
        if len(self.rater_deltas) < 2:
            raise ValidationError("need at least 2 rater deltas")
        dmin, dmax = min(self.rater_deltas), max(self.rater_deltas)
        for c, s in self.spheres.items():
            if s.radius + dmin < 1:
                raise ValidationError(f"class {c}: radius {s.radius} with delta {dmin} collapses the sphere")
            for axis in range(3):
                lo = s.center[axis] - (s.radius + dmax)
                hi = s.center[axis] + (s.radius + dmax)
                if lo < 0 or hi > self.geometry.dims[axis] - 1:
                    raise ValidationError(
                        f"class {c}: sphere leaves the grid on axis {axis} after maximal perturbation"
                    )
        classes = sorted(self.spheres)
        for i, a in enumerate(classes):
            for b in classes[i + 1 :]:
                sa, sb = self.spheres[a], self.spheres[b]
                dist = math.dist(sa.center, sb.center)
                if dist <= (sa.radius + dmax) + (sb.radius + dmax):
                    raise ValidationError(
                        f"spheres for classes {a} and {b} overlap after maximal perturbation"
                    )


@dataclass(frozen=True)
class PhantomTruth:
    """Generation-time exhaustive-scan ground truth."""

    rater_volumes_cm3: dict[int, tuple[float, ...]]
    mu_cm3: dict[int, float]
    sigma_cm3: dict[int, float]  # population convention
    region_counts: dict[int, dict[str, int]]  # fg / bg / dissensus voxel counts


@dataclass(frozen=True)
class Phantom:
    spec: PhantomSpec
    raters: tuple[LabelVolume, ...]
    prediction: ProbabilityVolume
    truth: PhantomTruth = field(repr=False)


def _distance_sq(geometry: GridGeometry, center) -> np.ndarray:
    x, y, z = np.ogrid[: geometry.dims[0], : geometry.dims[1], : geometry.dims[2]]
    return (
        (x - center[0]) ** 2.0 + (y - center[1]) ** 2.0 + (z - center[2]) ** 2.0
    )


def _rater_labels(spec: PhantomSpec) -> list[np.ndarray]:
    dist_sq = {c: _distance_sq(spec.geometry, s.center) for c, s in spec.spheres.items()}
    out = []
    for delta in spec.rater_deltas:
        labels = np.zeros(spec.geometry.dims, dtype=np.uint8)
        for c, s in spec.spheres.items():
            labels[dist_sq[c] <= (s.radius + delta) ** 2] = c
        out.append(labels)
    return out


def _unanimity_one_hot(labels: list[np.ndarray]) -> np.ndarray:
    agree = np.ones(labels[0].shape, dtype=bool)
    for l in labels[1:]:
        agree &= l == labels[0]
    unanimous = np.where(agree, labels[0], 0).astype(np.uint8)
    one_hot = np.zeros((N_CHANNELS, *labels[0].shape), dtype=np.float32)
    for c in range(N_CHANNELS):
        one_hot[c] = unanimous == c
    return one_hot


def _apply_model(one_hot: np.ndarray, model: PredictionModel) -> np.ndarray:
    if model.kind == "perfect":
        return one_hot
    if model.kind == "blurred":
        blurred = np.stack([gaussian_filter(ch, model.sigma) for ch in one_hot])
        sums = blurred.sum(axis=0, dtype=np.float64)
        return np.clip(blurred / sums[np.newaxis], 0.0, 1.0).astype(np.float32)
    # miscalibrated: move |delta| of probability mass between the winning
    # channel and the rest (positive delta drains the winner)
    shifted = one_hot.astype(np.float64)
    winner = np.argmax(shifted, axis=0)[np.newaxis]
    w = np.take_along_axis(shifted, winner, axis=0)
    is_winner = np.zeros(shifted.shape, dtype=bool)
    np.put_along_axis(is_winner, winner, True, axis=0)
    if model.delta >= 0:
        take = np.minimum(w, model.delta)
        shifted = np.where(is_winner, shifted - take, shifted + take / (N_CHANNELS - 1))
    else:
        others = 1.0 - w
        give = np.minimum(-model.delta, others)
        scale = np.divide(others - give, others, out=np.ones_like(others), where=others > 0)
        shifted = np.where(is_winner, shifted + give, shifted * scale)
    shifted = np.clip(shifted, 0.0, 1.0)
    sums = shifted.sum(axis=0)
    return (shifted / sums[np.newaxis]).astype(np.float32)


def _scan_truth(spec: PhantomSpec, labels: list[np.ndarray]) -> PhantomTruth:
    vv = spec.geometry.voxel_volume_cm3
    volumes, mu, sigma, counts = {}, {}, {}, {}
    for c in spec.spheres:
        voxel_counts = np.array([int(np.count_nonzero(l == c)) for l in labels])
        volumes[c] = tuple(float(n) * vv for n in voxel_counts)
        mu[c] = float(np.mean(voxel_counts)) * vv
        sigma[c] = float(np.std(voxel_counts)) * vv
        fg = np.logical_and.reduce([l == c for l in labels])
        any_c = np.logical_or.reduce([l == c for l in labels])
        counts[c] = {
            "fg": int(np.count_nonzero(fg)),
            "bg": int(np.count_nonzero(~any_c)),
            "dissensus": int(np.count_nonzero(any_c & ~fg)),
        }
    return PhantomTruth(volumes, mu, sigma, counts)


def generate(spec: PhantomSpec) -> Phantom:
    """Deterministic phantom: rater label maps, a prediction, and truth."""
    labels = _rater_labels(spec)
    one_hot = _unanimity_one_hot(labels)
    channels = _apply_model(one_hot, spec.prediction)
    return Phantom(
        spec=spec,
        raters=tuple(LabelVolume(spec.geometry, l) for l in labels),
        prediction=ProbabilityVolume(spec.geometry, channels),
        truth=_scan_truth(spec, labels),
    )


# --- dataset synthesis for the CLI ---------------------------------------


def parse_model(doc: dict) -> PredictionModel:
    if not isinstance(doc, dict) or "model" not in doc:
        raise ValidationError(f"algorithm entry must be an object with a 'model' key, got {doc!r}")
    return PredictionModel(
        kind=doc["model"],
        sigma=float(doc.get("sigma", 0.0)),
        delta=float(doc.get("delta", 0.0)),
    )


def parse_spec_document(doc: dict) -> dict:
    """Validate the dataset spec JSON and normalize its pieces.

    Schema (classes keyed by organ name)::

        {
          "geometry": {"dims": [48,48,48], "spacing_mm": [1,1,1]},
          "spheres": {"pancreas": {"center": [12,12,12], "radius": 5}, ...},
          "rater_deltas": [-1, 0, 1],
          "algorithms": {"alpha": {"model": "perfect"},
                         "beta": {"model": "blurred", "sigma": 1.0},
                         "gamma": {"model": "miscalibrated", "delta": 0.2}},
          "cases": 4,            // optional, default 1
          "radius_jitter": 1,    // optional integer, default 0
          "groups": ["A","B"],   // optional cycle, default ["A"]
          "seed": 0              // optional
        }
    """
    for key in ("geometry", "spheres", "rater_deltas", "algorithms"):
        if key not in doc:
            raise ValidationError(f"phantom spec missing key {key!r}")
    geometry = GridGeometry(tuple(doc["geometry"]["dims"]), tuple(doc["geometry"]["spacing_mm"]))
    ids_by_name = {CLASS_NAMES[c]: c for c in ORGAN_CLASSES}
    spheres = {}
    for name, s in doc["spheres"].items():
        if name not in ids_by_name:
            raise ValidationError(f"unknown organ class {name!r}; expected one of {sorted(ids_by_name)}")
        spheres[ids_by_name[name]] = Sphere(tuple(s["center"]), float(s["radius"]))
    algorithms = {name: parse_model(m) for name, m in doc["algorithms"].items()}
    if not algorithms:
        raise ValidationError("phantom spec needs at least one algorithm")
    groups = doc.get("groups", ["A"])
    n_cases = int(doc.get("cases", 1))
    if n_cases < 1:
        raise ValidationError(f"cases must be >= 1, got {n_cases}")
    return {
        "geometry": geometry,
        "spheres": spheres,
        "rater_deltas": tuple(int(d) for d in doc["rater_deltas"]),
        "algorithms": algorithms,
        "groups": list(groups),
        "cases": n_cases,
        "radius_jitter": int(doc.get("radius_jitter", 0)),
        "seed": int(doc.get("seed", 0)),
    }


def write_dataset(doc: dict, out_dir) -> Path:
    """Generate a ready-to-evaluate directory: volumes + manifest + truth.

    Per-case sphere radii are jittered with the same seeded PCG64 stream
    scheme the bootstrap uses (SeedSequence((seed, case_index))), so the
    whole directory is reproducible byte-for-byte.
    """
    spec = parse_spec_document(doc)
    out = Path(out_dir)
    volumes = out / "volumes"
    volumes.mkdir(parents=True, exist_ok=True)

    manifest_cases = []
    truth_records = {}
    for i in range(spec["cases"]):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec["seed"], i))))
        spheres = {}
        for c, s in sorted(spec["spheres"].items()):
            jitter = int(rng.integers(-spec["radius_jitter"], spec["radius_jitter"] + 1)) if spec["radius_jitter"] else 0
            spheres[c] = Sphere(s.center, s.radius + jitter)
        case_id = f"case_{i + 1:03d}"
        case_spec = PhantomSpec(
            geometry=spec["geometry"],
            spheres=spheres,
            rater_deltas=spec["rater_deltas"],
            seed=spec["seed"],
        )
        labels = _rater_labels(case_spec)
        one_hot = _unanimity_one_hot(labels)
        truth = _scan_truth(case_spec, labels)

        rater_paths = []
        for r, arr in enumerate(labels, start=1):
            p = volumes / f"{case_id}_rater_{r}.nii.gz"
            write_nifti(LabelVolume(case_spec.geometry, arr), p)
            rater_paths.append(str(p.relative_to(out)))
        pred_paths = {}
        for name, model in sorted(spec["algorithms"].items()):
            channels = _apply_model(one_hot, model)
            p = volumes / f"{case_id}_pred_{name}.nii.gz"
            write_nifti(ProbabilityVolume(case_spec.geometry, channels), p)
            pred_paths[name] = str(p.relative_to(out))

        manifest_cases.append(
            {
                "case_id": case_id,
                "group": spec["groups"][i % len(spec["groups"])],
                "rater_annotations": rater_paths,
                "algorithm_predictions": pred_paths,
            }
        )
        truth_records[case_id] = {
            "rater_volumes_cm3": {str(c): list(v) for c, v in truth.rater_volumes_cm3.items()},
            "mu_cm3": {str(c): v for c, v in truth.mu_cm3.items()},
            "sigma_cm3": {str(c): v for c, v in truth.sigma_cm3.items()},
            "region_counts": {str(c): v for c, v in truth.region_counts.items()},
        }

    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps({"cases": manifest_cases}, indent=2, sort_keys=True) + "\n")
    (out / "truth.json").write_text(json.dumps(truth_records, indent=2, sort_keys=True) + "\n")
    return manifest_path

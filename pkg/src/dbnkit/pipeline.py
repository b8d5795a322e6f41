"""Data ingestion and preprocessing: patch sampling from grayscale images,
the log / center / DC-removal / whitening chain with replayable provenance,
and synthetic generators with attached ground-truth densities."""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Grbm, Rbm, binary_states, brute_force_log_partition
from .numerics import log_sum_exp
from .storage import write_container, read_container
from . import baselines

logger = logging.getLogger(__name__)

IMAGE_MAGIC = b"DBNI"


class PipelineError(ValueError):
    pass


@dataclass
class DataSet:
    """Sample matrix plus the ordered, replayable transform provenance.

    Provenance entries are dicts with a "kind" key and whatever fitted
    parameters the transform needs to be applied again to new data.
    ``true_log_density`` is attached by the synthetic generators and never
    serialized.
    """

    samples: np.ndarray
    provenance: list = field(default_factory=list)
    true_log_density: object = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if not np.isfinite(self.samples).all():
            raise PipelineError("dataset contains non-finite values")

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]


@dataclass
class PatchSource:
    """Grayscale images to draw square patches from."""

    images: tuple
    patch_size: int
    seed: int = 0

    def __post_init__(self):
        self.images = tuple(np.asarray(img, dtype=np.float64) for img in self.images)
        if not self.images:
            raise PipelineError("need at least one image")
        for img in self.images:
            if img.ndim != 2:
                raise PipelineError("images must be 2-D grayscale arrays")
            if min(img.shape) < self.patch_size:
                raise PipelineError("patch does not fit inside an image")


def sample_patches(source, n, rng=None):
    """n patches at uniform random positions, flattened row-major."""
    if rng is None:
        rng = np.random.default_rng(source.seed)
    s = source.patch_size
    out = np.empty((n, s * s))
    img_idx = rng.integers(len(source.images), size=n)
    for i in range(n):
        img = source.images[img_idx[i]]
        r = int(rng.integers(img.shape[0] - s + 1))
        c = int(rng.integers(img.shape[1] - s + 1))
        out[i] = img[r : r + s, c : c + s].ravel()
    return DataSet(out, [{"kind": "patches", "patch_size": s, "n": n}])


def _dc_basis(d):
    """Fixed orthonormal basis of the complement of the constant vector.

    Columns 2..D of the Householder reflection that swaps e_1 with the
    unit constant vector: deterministic and orthonormal by construction.
    """
    u = np.full(d, 1.0 / np.sqrt(d))
    v = u - np.eye(d)[0]
    h = np.eye(d) - 2.0 * np.outer(v, v) / (v @ v)
    return h[:, 1:]


def _apply(entry, data):
    kind = entry["kind"]
    if kind == "patches":
        return data
    if kind == "log":
        if np.any(data <= 0):
            raise PipelineError("log transform needs positive intensities")
        return np.log(data)
    if kind == "center":
        return data - entry["mean"]
    if kind == "dc_project":
        return data @ entry["basis"]
    if kind == "whiten":
        return data @ entry["matrix"]
    raise PipelineError(f"unknown transform {kind!r}")


def preprocess(raw):
    """Log-transform, center, project out the DC component, and whiten.

    The DC direction (the constant vector) is removed by expressing each
    point in a fixed orthonormal basis of its complement, dropping one
    dimension; the remaining coordinates are whitened symmetrically so
    their covariance is the identity on the fitting set.  Every fitted
    parameter lands in the provenance, and replaying the provenance on
    the fitting set reproduces the output bit-exactly.
    """
    data = raw.samples
    if np.any(data <= 0):
        raise PipelineError("log transform needs positive intensities")
    steps = [{"kind": "log"}]
    data = np.log(data)

    mean = data.mean(axis=0)
    steps.append({"kind": "center", "mean": mean})
    data = data - mean

    basis = _dc_basis(data.shape[1])
    steps.append({"kind": "dc_project", "basis": basis})
    data = data @ basis

    cov = data.T @ data / data.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() <= 0 or eigvals.min() / eigvals.max() < 1e-12:
        raise PipelineError("covariance is rank deficient; cannot whiten")
    logger.info("whitening condition number %.3e", eigvals.max() / eigvals.min())
    matrix = eigvecs @ np.diag(1.0 / np.sqrt(eigvals)) @ eigvecs.T
    matrix = 0.5 * (matrix + matrix.T)  # exactly symmetric
    steps.append({"kind": "whiten", "matrix": matrix})
    data = data @ matrix

    return DataSet(data, list(raw.provenance) + steps)


def replay(provenance, data):
    """Apply already-fitted transforms to new data, refitting nothing."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    for entry in provenance:
        data = _apply(entry, data)
    return DataSet(data, list(provenance))


def synthesize(spec, n, rng):
    """IID draws from a named ground-truth density, evaluator attached.

    Supported kinds: "isotropic_mixture" (means, sigma, weights),
    "full_cov_mixture" (covariances, weights, optional means),
    "grbm" and "rbm" (exact sampling of a small model by enumeration).
    """
    kind = spec.get("kind")
    if kind == "isotropic_mixture":
        model = baselines.MoigModel(spec["means"], spec["sigma"], spec["weights"])
        comp = rng.choice(model.n_components, size=n, p=model.weights)
        samples = model.means[comp] + model.sigma * rng.standard_normal(
            (n, model.dim)
        )
        return DataSet(samples, [{"kind": kind}], model.log_density)
    if kind == "full_cov_mixture":
        covs = np.asarray(spec["covariances"], dtype=np.float64)
        weights = np.asarray(spec["weights"], dtype=np.float64)
        means = np.asarray(
            spec.get("means", np.zeros((covs.shape[0], covs.shape[1]))),
            dtype=np.float64,
        )
        chols = [np.linalg.cholesky(c) for c in covs]
        comp = rng.choice(covs.shape[0], size=n, p=weights)
        noise = rng.standard_normal((n, covs.shape[1]))
        samples = means[comp] + np.einsum("nij,nj->ni", np.array(chols)[comp], noise)

        def density(x):
            x = np.atleast_2d(np.asarray(x, dtype=np.float64))
            logs = np.empty((x.shape[0], covs.shape[0]))
            for k, chol in enumerate(chols):
                diff = x - means[k]
                sol = np.linalg.solve(chol, diff.T)
                logs[:, k] = (
                    -0.5 * np.sum(sol ** 2, axis=0)
                    - np.sum(np.log(np.diag(chol)))
                    - 0.5 * covs.shape[1] * np.log(2 * np.pi)
                    + np.log(weights[k])
                )
            return log_sum_exp(logs, axis=1)

        return DataSet(samples, [{"kind": kind}], density)
    if kind == "grbm":
        model = spec["model"]
        if not isinstance(model, Grbm):
            raise PipelineError("grbm generator needs a gaussian layer model")
        log_z = brute_force_log_partition(model)
        hs = binary_states(model.n_hidden)
        logp = model.log_unnorm_hidden(hs) - log_z
        comp = rng.choice(len(hs), size=n, p=np.exp(logp - log_sum_exp(logp)))
        samples = model.sample_visible(hs[comp], rng)
        return DataSet(
            samples, [{"kind": kind}], lambda x: model.log_unnorm_visible(x) - log_z
        )
    if kind == "rbm":
        model = spec["model"]
        if not isinstance(model, Rbm):
            raise PipelineError("rbm generator needs a binary layer model")
        log_z = brute_force_log_partition(model)
        vs = binary_states(model.n_visible)
        logp = model.log_unnorm_visible(vs) - log_z
        comp = rng.choice(len(vs), size=n, p=np.exp(logp - log_sum_exp(logp)))
        samples = vs[comp]
        return DataSet(
            samples, [{"kind": kind}], lambda x: model.log_unnorm_visible(x) - log_z
        )
    raise PipelineError(f"unknown generator spec {kind!r}")


def save_dataset(dataset, path):
    """Header (N, D, provenance JSON) plus row-major float64 payload."""
    arrays = {"samples": dataset.samples}
    meta_prov = []
    for i, entry in enumerate(dataset.provenance):
        stored = {}
        for key, value in entry.items():
            if isinstance(value, np.ndarray):
                name = f"prov{i}_{key}"
                arrays[name] = value
                stored[key] = {"__array__": name}
            else:
                stored[key] = value
        meta_prov.append(stored)
    meta = {
        "n": int(dataset.n_samples),
        "d": int(dataset.dim),
        "provenance": meta_prov,
    }
    write_container(path, "dataset", meta, arrays)


def load_dataset(path):
    _, meta, arrays = read_container(path, expect_kind="dataset")
    provenance = []
    for entry in meta["provenance"]:
        restored = {}
        for key, value in entry.items():
            if isinstance(value, dict) and "__array__" in value:
                restored[key] = arrays[value["__array__"]]
            else:
                restored[key] = value
        provenance.append(restored)
    return DataSet(arrays["samples"], provenance)


def save_images(images, path):
    """Flat binary grayscale stack: header (count, width, height, bit depth)
    then the raw row-major payload of each image."""
    images = [np.asarray(img) for img in images]
    if not images:
        raise PipelineError("nothing to save")
    h, w = images[0].shape
    if any(img.shape != (h, w) for img in images):
        raise PipelineError("all images in one bank must share a shape")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<IIII", len(images), w, h, 64))
        for img in images:
            fh.write(np.ascontiguousarray(img, dtype="<f8").tobytes())


def load_images(path):
    path = Path(path)
    if not path.is_file():
        raise PipelineError(f"no such image bank: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != IMAGE_MAGIC:
            raise PipelineError(f"{path} is not an image bank")
        count, w, h, depth = struct.unpack("<IIII", fh.read(16))
        if depth != 64:
            raise PipelineError("only 64-bit banks are supported")
        images = []
        for _ in range(count):
            data = np.frombuffer(fh.read(w * h * 8), dtype="<f8")
            images.append(data.reshape(h, w).copy())
    return images

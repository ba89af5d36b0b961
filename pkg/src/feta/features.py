"""Private training shortcuts: frequency features and central images.

Frequency features are class-wise means of random Fourier features,

    phi(h) = sqrt(2/K) [cos(Omega h), sin(Omega h)],   Omega ~ N(0, I)^(K/2 x d),

so ``||phi(h)|| = 1`` for every ``h``. Dividing the class sum by the public size
estimate ``n_star`` bounds the L2 sensitivity by ``1 / n_star``.

Central images are Poisson-sampled, L2-clipped class averages normalised by the
expected batch size ``q_t * n_star``, giving sensitivity ``C_t / (q_t * n_star)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .accountant import SgmSpec
from .dataset import LabeledDataset
from .errors import DataError, MissingArtifactError
from .numerics import SeededRng, gaussian_vector, poisson_subsample, stream_id

FEATURE_FORMAT_VERSION = 1

__all__ = [
    "RffProjection",
    "FrequencyFeatureSet",
    "CentralImageSet",
    "FeatureConfig",
    "sample_projection",
    "rff_embed",
    "mean_rff",
    "privatize_freq",
    "central_image_query",
    "extract_features",
    "save_features",
    "load_features",
    "feature_specs",
]


@dataclass(frozen=True, eq=False)
class RffProjection:
    omega: np.ndarray
    seed: int
    K: int
    d: int
    bandwidth: float = 1.0

    @property
    def scale(self) -> float:
        return float(np.sqrt(2.0 / self.K))


def sample_projection(seed: int, K: int, d: int, bandwidth: float = 1.0) -> RffProjection:
    """Draw ``K/2`` standard-normal frequency vectors of dimension ``d``.

    Rows are generated in order, so a larger ``K`` with the same seed extends
    the smaller projection rather than replacing it. ``bandwidth`` divides the
    input before projection, giving the Gaussian kernel
    ``exp(-||x - y||^2 / (2 bandwidth^2))``; it never changes ``omega``.
    """
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if K < 2 or K % 2:
        raise ValueError(f"feature dimension K must be even and >= 2, got {K}")
    if d < 1:
        raise ValueError(f"input dimension must be positive, got {d}")
    omega = SeededRng(seed, "rff").normal((K // 2, d))
    return RffProjection(omega, int(seed), int(K), int(d), float(bandwidth))


def rff_embed(h, proj: RffProjection) -> np.ndarray:
    """Random Fourier embedding of one image ``(d,)`` or a batch ``(n, d)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != proj.d:
        raise ValueError(f"image dimension {h.shape[-1]} != projection dimension {proj.d}")
    z = h @ proj.omega.T
    if proj.bandwidth != 1.0:
        z = z / proj.bandwidth
    return proj.scale * np.concatenate([np.cos(z), np.sin(z)], axis=-1)


def mean_rff(images, proj: RffProjection, n_star: int, chunk: int = 1024) -> np.ndarray:
    """``sum_i phi(h_i) / n_star``; the empty sum is the zero vector."""
    images = np.asarray(images, dtype=np.float64).reshape(-1, proj.d)
    if n_star < 1:
        raise ValueError("n_star must be positive")
    if len(images) > n_star:
        raise ValueError(f"n_star={n_star} smaller than the {len(images)} images summed")
    total = np.zeros(proj.K)
    for start in range(0, len(images), chunk):
        total += rff_embed(images[start:start + chunk], proj).sum(axis=0)
    return total / n_star


def privatize_freq(mu, sigma_f: float, n_star: int, rng: SeededRng) -> np.ndarray:
    """Gaussian mechanism on a mean embedding: per-coordinate std ``sigma_f / n_star``."""
    mu = np.asarray(mu, dtype=np.float64)
    if sigma_f < 0:
        raise ValueError("sigma_f must be nonnegative")
    if sigma_f == 0:
        return mu.copy()
    return mu + gaussian_vector(rng, mu.size, sigma_f / n_star)


def _clip_rows(x: np.ndarray, bound: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    factor = np.minimum(1.0, bound / np.maximum(norms, np.finfo(float).tiny))
    return x * factor


def central_image_query(class_images, q_t: float, C_t: float, sigma_t: float, n_star_class: int,
                        rng: SeededRng, subset: Sequence[int] | None = None) -> np.ndarray:
    """One noisy central image of a class.

    ``subset`` replaces the Poisson draw with explicit indices; it exists for
    sensitivity tests that must pin which records enter the sum.
    """
    class_images = np.asarray(class_images, dtype=np.float64)
    if not 0 < q_t <= 1:
        raise ValueError(f"q_t must lie in (0, 1], got {q_t}")
    if C_t <= 0:
        raise ValueError("C_t must be positive")
    b_star = q_t * n_star_class
    if b_star <= 0:
        raise ValueError("expected batch size q_t * n_star is zero")
    d = class_images.shape[1]
    if subset is None:
        subset = poisson_subsample(rng, len(class_images), q_t)
    batch = class_images[np.asarray(subset, dtype=np.int64)]
    h = _clip_rows(batch, C_t).sum(axis=0) / b_star if len(batch) else np.zeros(d)
    if sigma_t > 0:
        h = h + gaussian_vector(rng, d, sigma_t * C_t / b_star)
    return h


@dataclass
class FeatureConfig:
    """Knobs for one extraction run. ``n_central`` is central images per class."""

    K: int = 1000
    seed: int = 0
    sigma_t: float = 20.0
    sigma_f: float = 26.0
    C_t: float = 8.0
    q_t: float = 0.11
    n_central: int = 50
    n_star: Sequence[int] | None = None
    bandwidth: float = 1.0


@dataclass
class CentralImageSet:
    images: np.ndarray  # (C, N_t, d), un-clamped
    sigma_t: float
    C_t: float
    q_t: float
    b_star: tuple[float, ...]
    shape: tuple[int, int, int] = (0, 0, 1)

    @property
    def n_classes(self) -> int:
        return self.images.shape[0]

    @property
    def n_central(self) -> int:
        return self.images.shape[1]

    def sgm_spec(self) -> SgmSpec | None:
        """Ledger entry; ``None`` when no noise was added (no finite guarantee)."""
        if self.sigma_t == 0:
            return None
        return SgmSpec(self.q_t, self.sigma_t, self.n_central, "spatial")

    def as_dataset(self) -> LabeledDataset:
        """Central images clamped to [0, 1] and labelled by class."""
        c, n, d = self.images.shape
        imgs = np.clip(self.images.reshape(c * n, d), 0.0, 1.0)
        labels = np.repeat(np.arange(c), n)
        return LabeledDataset(imgs, labels, self.shape, c)


@dataclass
class FrequencyFeatureSet:
    mu: np.ndarray  # (C, K)
    seed: int
    sigma_f: float
    n_star: tuple[int, ...]
    bandwidth: float = 1.0

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def K(self) -> int:
        return self.mu.shape[1]

    def concatenated(self) -> np.ndarray:
        return self.mu.reshape(-1)

    def sgm_spec(self) -> SgmSpec | None:
        if self.sigma_f == 0:
            return None
        # classes are disjoint, so the per-class releases compose in parallel
        return SgmSpec(1.0, self.sigma_f, 1, "frequency")


def extract_features(dataset: LabeledDataset, config: FeatureConfig, proj: RffProjection | None = None,
                     spatial: bool = True, frequency: bool = True):
    """Per-class central images and privatised mean embeddings.

    Each class draws from its own random streams keyed by ``(seed, class)``, so
    the result does not depend on the order classes are processed in. A query
    switched off with ``spatial=False`` / ``frequency=False`` is never run and
    its slot in the returned pair is ``None``.

    Returns:
        ``(CentralImageSet | None, FrequencyFeatureSet | None)``
    """
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    dataset.require_coverage()
    C = dataset.n_classes
    counts = dataset.class_counts()
    n_star = tuple(int(n) for n in (config.n_star if config.n_star is not None else counts))
    if len(n_star) != C:
        raise DataError(f"need one size estimate per class, got {len(n_star)} for {C} classes")
    proj = proj or sample_projection(config.seed, config.K, dataset.d, config.bandwidth)
    if proj.d != dataset.d:
        raise DataError(f"projection dimension {proj.d} != image dimension {dataset.d}")
    central = np.zeros((C, config.n_central, dataset.d))
    mu = np.zeros((C, proj.K))
    for c in range(C):
        imgs = dataset.class_images(c)
        if spatial:
            rng_t = SeededRng(config.seed, stream_id("spatial", c))
            for j in range(config.n_central):
                central[c, j] = central_image_query(imgs, config.q_t, config.C_t, config.sigma_t, n_star[c], rng_t)
        if frequency:
            rng_f = SeededRng(config.seed, stream_id("frequency", c))
            mu[c] = privatize_freq(mean_rff(imgs, proj, max(n_star[c], len(imgs))), config.sigma_f, n_star[c], rng_f)
    cset = CentralImageSet(central, config.sigma_t, config.C_t, config.q_t,
                           tuple(config.q_t * n for n in n_star), dataset.shape) if spatial else None
    fset = FrequencyFeatureSet(mu, proj.seed, config.sigma_f, n_star, proj.bandwidth) if frequency else None
    return cset, fset


def feature_specs(central: CentralImageSet | None, freq: FrequencyFeatureSet | None) -> list[SgmSpec]:
    """Ledger entries of the queries that were run with noise."""
    return [x.sgm_spec() for x in (central, freq) if x is not None and x.sgm_spec() is not None]


# ---------------------------------------------------------------------------
# On-disk format: features.json + freq.bin + central.bin (little-endian float32)


def save_features(directory, central: CentralImageSet | None, freq: FrequencyFeatureSet | None,
                  image_shape=None) -> Path:
    """Write ``features.json`` plus the two little-endian float32 blobs.

    A query that was not run is recorded as ``null`` in the manifest and its
    blob is written empty, so the directory always holds the same three files.
    """
    if central is None and freq is None:
        raise ValueError("nothing to save: both feature sets are missing")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    freq_blob = np.ascontiguousarray(freq.mu if freq is not None else np.zeros(0), dtype="<f4")
    central_blob = np.ascontiguousarray(central.images if central is not None else np.zeros(0), dtype="<f4")
    (directory / "freq.bin").write_bytes(freq_blob.tobytes())
    (directory / "central.bin").write_bytes(central_blob.tobytes())
    shape = central.shape if central is not None else tuple(image_shape or (0, 0, 1))
    n_star = freq.n_star if freq is not None else tuple(round(b / central.q_t) for b in central.b_star)
    manifest = {
        "version": FEATURE_FORMAT_VERSION,
        "queries": [name for name, x in (("spatial", central), ("frequency", freq)) if x is not None],
        "image_shape": list(shape),
        "d": int(np.prod(shape)),
        "classes": central.n_classes if central is not None else freq.n_classes,
        "n_star": list(n_star),
        "K": freq.K if freq is not None else None,
        "seed": freq.seed if freq is not None else None,
        "bandwidth": freq.bandwidth if freq is not None else None,
        "sigma_f": freq.sigma_f if freq is not None else None,
        "sigma_t": central.sigma_t if central is not None else None,
        "C_t": central.C_t if central is not None else None,
        "q_t": central.q_t if central is not None else None,
        "N_t": central.n_central if central is not None else None,
        "blobs": {"freq": "freq.bin", "central": "central.bin"},
        "counts": {"freq": int(freq_blob.size), "central": int(central_blob.size)},
    }
    path = directory / "features.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_features(directory) -> tuple[CentralImageSet | None, FrequencyFeatureSet | None]:
    """Inverse of :func:`save_features`; a query absent from the manifest loads as ``None``."""
    directory = Path(directory)
    path = directory / "features.json"
    if not path.exists():
        raise MissingArtifactError(f"no feature manifest at {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None
    if m.get("version") != FEATURE_FORMAT_VERSION:
        raise DataError(f"feature file version {m.get('version')} != supported {FEATURE_FORMAT_VERSION}")
    try:
        C, d, shape = m["classes"], m["d"], tuple(m["image_shape"])
        blobs = {k: directory / v for k, v in m["blobs"].items()}
        for name, blob in blobs.items():
            if not blob.exists():
                raise MissingArtifactError(f"missing feature blob {blob}")
        freq_raw = np.frombuffer(blobs["freq"].read_bytes(), dtype="<f4")
        cent_raw = np.frombuffer(blobs["central"].read_bytes(), dtype="<f4")
        if freq_raw.size != m["counts"]["freq"] or cent_raw.size != m["counts"]["central"]:
            raise DataError("blob length does not match manifest")
        fset = cset = None
        n_star = tuple(int(n) for n in m["n_star"])
        if "frequency" in m["queries"]:
            if freq_raw.size != C * m["K"]:
                raise DataError("frequency blob length does not match manifest")
            fset = FrequencyFeatureSet(freq_raw.reshape(C, m["K"]).astype(np.float64), m["seed"], m["sigma_f"],
                                       n_star, m["bandwidth"])
        if "spatial" in m["queries"]:
            if cent_raw.size != C * m["N_t"] * d:
                raise DataError("central-image blob length does not match manifest")
            cset = CentralImageSet(cent_raw.reshape(C, m["N_t"], d).astype(np.float64), m["sigma_t"], m["C_t"],
                                   m["q_t"], tuple(m["q_t"] * n for n in n_star), shape)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc!r})") from None
    return cset, fset

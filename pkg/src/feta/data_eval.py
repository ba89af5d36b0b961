"""Dataset I/O and desk-scale evaluation metrics.

IDX files follow the classic MNIST layout: a big-endian header
``00 00 <dtype> <ndim>`` followed by ``ndim`` big-endian uint32 sizes and the
raw payload. Images use magic 2051 (``00 00 08 03``), labels 2049 (``00 00 08 01``).
Gzip-compressed files are detected by their own magic and read transparently.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .errors import DataError, MissingArtifactError
from .features import RffProjection, rff_embed
from .numerics import AdamState, Mlp, SeededRng, adam_step, mlp_backward, mlp_forward

__all__ = [
    "LabeledDataset",
    "EvalReport",
    "load_idx",
    "save_idx",
    "downscale",
    "rff_mmd",
    "train_eval_classifier",
    "shannon_entropy",
    "texture_complexity",
    "load_toy_digits",
    "evaluate",
]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


def _read_maybe_gz(path: Path) -> bytes:
    if not path.exists():
        raise MissingArtifactError(f"missing data file {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, expect_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataError(f"{path}: magic {magic} != expected {expect_magic}")
    ndim = raw[3]
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    size = int(np.prod(dims))
    if len(raw) - hdr != size:
        raise DataError(f"{path}: payload has {len(raw) - hdr} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)


def load_idx(image_path, label_path) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled from 0..255 to [0, 1]."""
    image_path, label_path = Path(image_path), Path(label_path)
    imgs = _parse_idx(_read_maybe_gz(image_path), IMAGE_MAGIC, image_path)
    labels = _parse_idx(_read_maybe_gz(label_path), LABEL_MAGIC, label_path)
    if imgs.shape[0] != labels.shape[0]:
        raise DataError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    n, rows, cols = imgs.shape
    return LabeledDataset(imgs.reshape(n, rows * cols) / 255.0, labels.astype(np.int64), (rows, cols, 1))


def save_idx(ds: LabeledDataset, image_path, label_path) -> None:
    """Write IDX files. Pixels become ``floor(255 x + 0.5)`` (round half up)."""
    rows, cols, ch = ds.shape
    if ch != 1:
        raise DataError("IDX export supports single-channel images only")
    q = np.floor(255.0 * np.clip(ds.images, 0, 1) + 0.5).astype(np.uint8)
    n = len(ds)
    Path(image_path).parent.mkdir(parents=True, exist_ok=True)
    Path(image_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + q.tobytes())
    Path(label_path).write_bytes(struct.pack(">II", LABEL_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def downscale(ds: LabeledDataset, factor: int) -> LabeledDataset:
    """Non-overlapping ``factor x factor`` average pooling."""
    rows, cols, ch = ds.shape
    if factor < 1 or rows % factor or cols % factor:
        raise DataError(f"image size {rows}x{cols} not divisible by {factor}")
    if factor == 1:
        return LabeledDataset(ds.images.copy(), ds.labels.copy(), ds.shape, ds.n_classes, ds.n_star)
    x = ds.images.reshape(len(ds), ch, rows // factor, factor, cols // factor, factor).mean(axis=(3, 5))
    shape = (rows // factor, cols // factor, ch)
    return LabeledDataset(np.clip(x.reshape(len(ds), -1), 0, 1), ds.labels.copy(), shape, ds.n_classes, ds.n_star)


def _class_mean_embeddings(ds: LabeledDataset, proj: RffProjection, classes) -> dict:
    out = {}
    for c in classes:
        imgs = ds.class_images(c)
        if len(imgs) == 0:
            raise DataError(f"class {c} has no images")
        out[c] = rff_embed(imgs, proj).mean(axis=0)
    return out


def rff_mmd(synth: LabeledDataset, real: LabeledDataset, proj: RffProjection) -> dict:
    """Per-class and pooled distance between mean RFF embeddings.

    The pooled value weights classes by their share of ``real``.
    """
    if synth.d != real.d:
        raise DataError(f"dimension mismatch: {synth.d} vs {real.d}")
    classes = sorted(set(np.unique(real.labels).tolist()) | set(np.unique(synth.labels).tolist()))
    ms = _class_mean_embeddings(synth, proj, classes)
    mr = _class_mean_embeddings(real, proj, classes)
    per = {int(c): float(np.linalg.norm(ms[c] - mr[c])) for c in classes}
    counts = np.bincount(real.labels, minlength=max(classes) + 1)
    w = np.array([counts[c] for c in classes], dtype=float)
    pooled = float(np.dot(w, [per[c] for c in classes]) / w.sum())
    return {"per_class": per, "pooled": pooled}


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_eval_classifier(synth: LabeledDataset, real_test: LabeledDataset, seed: int, steps: int = 600,
                          hidden=(64,), lr: float = 3e-3, batch_size: int = 64) -> float:
    """Train a small softmax MLP on ``synth`` and return top-1 accuracy on ``real_test``.

    The final weights are used as-is; there is no checkpoint selection.
    """
    need = set(np.unique(real_test.labels).tolist())
    have = set(np.unique(synth.labels).tolist())
    if not need <= have or len(have) < 2:
        raise DataError(f"synthetic data covers classes {sorted(have)}, test needs {sorted(need)}")
    C = max(synth.n_classes, real_test.n_classes)
    rng = SeededRng(seed, "classifier")
    net = Mlp.init([synth.d, *hidden, C], rng.child("init"))
    params = net.params()
    state = AdamState.zeros_like(params)
    onehot = np.eye(C)
    for _ in range(steps):
        idx = rng.integers(0, len(synth), size=min(batch_size, len(synth)))
        x, y = synth.images[idx], synth.labels[idx]
        cur = net.with_params(params)
        p = _softmax(mlp_forward(cur, x))
        g, _ = mlp_backward(cur, x, (p - onehot[y]) / len(idx))
        params, state = adam_step(params, g.params(), state, lr)
    pred = mlp_forward(net.with_params(params), real_test.images).argmax(axis=1)
    return float(np.mean(pred == real_test.labels))


def _gray(ds: LabeledDataset) -> np.ndarray:
    rows, cols, ch = ds.shape
    return ds.images.reshape(len(ds), ch, rows, cols).mean(axis=1)


def _hist_entropy(levels: np.ndarray) -> float:
    counts = np.bincount(levels.ravel(), minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p))) + 0.0


def shannon_entropy(ds: LabeledDataset) -> float:
    """Mean per-image entropy (bits) of the 256-bin grey-level histogram."""
    if len(ds) == 0:
        raise DataError("empty dataset")
    levels = np.floor(255.0 * _gray(ds) + 0.5).astype(np.int64)
    return float(np.mean([_hist_entropy(img) for img in levels]))


_GRAD_MAX = np.sqrt(2.0)


def texture_complexity(ds: LabeledDataset) -> float:
    """Mean entropy (bits) of the 256-bin histogram of gradient magnitudes.

    Gradients are central differences (one-sided at the border) of the grey
    image, binned over the fixed range ``[0, sqrt(2)]``. This is a house metric.
    """
    if len(ds) == 0:
        raise DataError("empty dataset")
    vals = []
    for img in _gray(ds):
        if min(img.shape) < 2:
            vals.append(0.0)
            continue
        gy, gx = np.gradient(img)
        mag = np.hypot(gx, gy)
        levels = np.minimum((mag / _GRAD_MAX * 256).astype(np.int64), 255)
        vals.append(_hist_entropy(levels))
    return float(np.mean(vals))


def load_toy_digits(classes=(0, 1), test_fraction: float = 0.3, seed: int = 0):
    """8x8 handwritten digits bundled with scikit-learn, restricted to ``classes``.

    Pixels (0..16) are scaled to [0, 1] and labels remapped to ``0..len(classes)-1``.
    Returns ``(train, test)`` split per class with a seeded shuffle.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    rng = SeededRng(seed, "toy_split")
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for new, c in enumerate(classes):
        x = raw.data[raw.target == c] / 16.0
        x = x[rng.generator.permutation(len(x))]
        n_test = int(round(test_fraction * len(x)))
        te_x.append(x[:n_test]), te_y.append(np.full(n_test, new))
        tr_x.append(x[n_test:]), tr_y.append(np.full(len(x) - n_test, new))
    C = len(classes)
    train = LabeledDataset(np.concatenate(tr_x), np.concatenate(tr_y), (8, 8, 1), C)
    test = LabeledDataset(np.concatenate(te_x), np.concatenate(te_y), (8, 8, 1), C)
    return train, test


@dataclass
class EvalReport:
    rff_mmd: dict
    accuracy: float | None
    entropy: float
    texture_complexity: float
    n_synthetic: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rff_mmd"] = {"per_class": {str(k): v for k, v in self.rff_mmd["per_class"].items()},
                        "pooled": self.rff_mmd["pooled"]}
        return d


def evaluate(synth: LabeledDataset, real_test: LabeledDataset, proj: RffProjection, seed: int,
             classifier_steps: int = 600) -> EvalReport:
    acc = train_eval_classifier(synth, real_test, seed, steps=classifier_steps)
    return EvalReport(rff_mmd(synth, real_test, proj), acc, shannon_entropy(synth), texture_complexity(synth),
                      len(synth), {"eval_projection_seed": proj.seed, "K": proj.K, "bandwidth": proj.bandwidth})

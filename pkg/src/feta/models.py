"""Generative models: a conditional DDPM-style synthesizer and a one-step generator.

The synthesizer's denoiser sees ``[h_t, time_embedding(t / T), class_embedding[y]]``
and predicts the injected noise. The auxiliary generator maps
``[z, class_embedding[y]]`` to an image through a sigmoid head and is fitted so
that its per-class mean random-Fourier embedding matches a privatised target.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabeledDataset
from .errors import DataError, MissingArtifactError, TrainingDivergenceError
from .features import FrequencyFeatureSet, RffProjection, rff_embed
from .numerics import AdamState, Mlp, SeededRng, adam_step, mlp_backward, mlp_forward

__all__ = [
    "NoiseSchedule",
    "DiffusionModel",
    "Generator",
    "forward_diffuse",
    "diffusion_loss_and_grads",
    "train_diffusion",
    "sample_images",
    "rff_match_loss_and_grad",
    "train_generator",
    "generate_frequency_dataset",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("betas must be a nonempty sequence in (0, 1)")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def linear(cls, T: int = 100, beta_start: float | None = None, beta_end: float | None = None):
        """Linear betas. Defaults rescale the usual 1e-4..0.02 range by ``1000 / T``
        so that ``alpha_bar_T`` stays near zero for short chains; the factor is
        capped at 25 so every beta stays below 1 for very short chains."""
        scale = min(1000.0 / T, 25.0)
        lo = 1e-4 * scale if beta_start is None else beta_start
        hi = 0.02 * scale if beta_end is None else beta_end
        return cls(np.linspace(lo, hi, T))

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[t]`` for ``t = 0..T`` with ``alpha_bar[0] = 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.beta)])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def forward_diffuse(h0, t: int, e, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form ``h_t = sqrt(abar_t) h0 + sqrt(1 - abar_t) e`` (``t`` may be an array)."""
    h0, e = np.asarray(h0, dtype=np.float64), np.asarray(e, dtype=np.float64)
    if h0.shape != e.shape:
        raise ValueError(f"image shape {h0.shape} != noise shape {e.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"diffusion step must lie in 1..{schedule.T}")
    ab = schedule.alpha_bar[t_arr]
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * h0 + np.sqrt(1.0 - ab) * e


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of ``t / T``; returns ``(len(t), dim)``."""
    x = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * np.geomspace(1.0, 64.0, dim // 2)
    ang = x[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DiffusionModel:
    denoiser: Mlp
    class_emb: np.ndarray  # (C, emb_dim)
    schedule: NoiseSchedule
    t_dim: int = 16
    image_shape: tuple[int, int, int] = (0, 0, 1)

    @classmethod
    def init(cls, d: int, n_classes: int, rng: SeededRng, hidden: Sequence[int] = (128, 128),
             t_dim: int = 16, emb_dim: int = 8, schedule: NoiseSchedule | None = None,
             image_shape=(0, 0, 1)) -> "DiffusionModel":
        net = Mlp.init([d + t_dim + emb_dim, *hidden, d], rng.child("denoiser"))
        emb = 0.5 * rng.child("class_emb").normal((n_classes, emb_dim))
        return cls(net, emb, schedule or NoiseSchedule.linear(), t_dim, tuple(image_shape))

    @property
    def d(self) -> int:
        return self.denoiser.layer_dims[-1]

    @property
    def n_classes(self) -> int:
        return self.class_emb.shape[0]

    @property
    def n_params(self) -> int:
        return self.denoiser.n_params + self.class_emb.size

    def params(self) -> list[np.ndarray]:
        return self.denoiser.params() + [self.class_emb]

    def with_params(self, params) -> "DiffusionModel":
        return DiffusionModel(self.denoiser.with_params(params[:-1]), params[-1], self.schedule,
                              self.t_dim, self.image_shape)

    def copy(self) -> "DiffusionModel":
        return self.with_params([p.copy() for p in self.params()])

    def _inputs(self, h_t, t, labels):
        labels = np.asarray(labels, dtype=np.int64)
        return np.concatenate([h_t, time_embedding(t, self.schedule.T, self.t_dim), self.class_emb[labels]], axis=1)

    def predict_noise(self, h_t, t, labels) -> np.ndarray:
        return mlp_forward(self.denoiser, self._inputs(h_t, t, labels))


def _embedding_grads(input_grad, labels, n_classes, per_sample):
    if per_sample:
        out = np.zeros((len(labels), n_classes, input_grad.shape[1]))
        out[np.arange(len(labels)), labels] = input_grad
        return out
    out = np.zeros((n_classes, input_grad.shape[1]))
    np.add.at(out, labels, input_grad)
    return out


def diffusion_loss_and_grads(model: DiffusionModel, h0, labels, rng: SeededRng | None = None,
                             per_sample: bool = False, t=None, noise=None):
    """Noise-prediction loss and its parameter gradients.

    Each example draws ``t ~ U{1..T}`` and ``e ~ N(0, I)`` unless ``t`` / ``noise``
    are supplied. The per-example loss is ``||e - e_theta(h_t, t, y)||^2``.

    Returns:
        ``(losses, grads)``: per-example losses of shape ``(B,)`` and gradients
        of their sum in :meth:`DiffusionModel.params` order. With
        ``per_sample=True`` each gradient array has a leading batch axis.
    """
    h0 = np.atleast_2d(np.asarray(h0, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B = h0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if t is None:
        t = rng.integers(1, model.schedule.T + 1, size=B)
    if noise is None:
        noise = rng.normal(h0.shape)
    t = np.broadcast_to(np.asarray(t), (B,))
    h_t = forward_diffuse(h0, t, noise, model.schedule)
    x = model._inputs(h_t, t, labels)
    pred = mlp_forward(model.denoiser, x)
    resid = pred - noise
    losses = np.sum(resid ** 2, axis=1)
    if not np.all(np.isfinite(losses)):
        raise TrainingDivergenceError("non-finite diffusion loss")
    g, gx = mlp_backward(model.denoiser, x, 2.0 * resid, per_sample=per_sample)
    emb_grad = _embedding_grads(gx[:, -model.class_emb.shape[1]:], labels, model.n_classes, per_sample)
    return losses, g.params() + [emb_grad]


def train_diffusion(model: DiffusionModel, sources: LabeledDataset | Sequence[LabeledDataset], steps: int,
                    batch_size: int | Sequence[int], lr: float, rng: SeededRng, state: AdamState | None = None,
                    stage: str = "warmup"):
    """Ordinary (non-private) Adam training on one or more datasets.

    With several sources, minibatches alternate between them round-robin;
    ``batch_size`` may then give one size per source.

    Returns:
        ``(model, losses, state)`` where ``losses`` holds the mean batch loss per step.
    """
    if isinstance(sources, LabeledDataset):
        sources = [sources]
    sizes = [batch_size] * len(sources) if np.isscalar(batch_size) else list(batch_size)
    pairs = [(s, b) for s, b in zip(sources, sizes) if len(s)]
    params = model.params()
    state = state or AdamState.zeros_like(params)
    trace = []
    if not pairs:
        return model, trace, state
    for step in range(steps):
        ds, bs = pairs[step % len(pairs)]
        idx = rng.integers(0, len(ds), size=min(bs, len(ds)))
        losses, grads = diffusion_loss_and_grads(model.with_params(params), ds.images[idx], ds.labels[idx], rng)
        grads = [g / len(idx) for g in grads]
        try:
            params, state = adam_step(params, grads, state, lr)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(str(exc), stage) from None
        trace.append(float(losses.mean()))
    return model.with_params(params), trace, state


def sample_images(model: DiffusionModel, n: int, label, rng: SeededRng, clip_denoised: bool = True) -> np.ndarray:
    """Ancestral DDPM sampling from pure noise; returns ``(n, d)`` clamped to [0, 1].

    ``label`` is one class id or a length-``n`` array of ids. With
    ``clip_denoised`` each step predicts ``h0``, clamps it to [0, 1] and takes
    the Gaussian posterior mean of ``h_{t-1}`` given ``(h_t, h0)``; without it
    the plain noise-prediction update is used. Both use variance ``beta_t``.
    """
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,))
    sch = model.schedule
    ab = sch.alpha_bar
    x = rng.normal((n, model.d))
    for t in range(sch.T, 0, -1):
        beta = sch.beta[t - 1]
        eps = model.predict_noise(x, np.full(n, t), labels)
        if clip_denoised:
            h0 = np.clip((x - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t]), 0.0, 1.0)
            x = (np.sqrt(ab[t - 1]) * beta * h0 + np.sqrt(1.0 - beta) * (1.0 - ab[t - 1]) * x) / (1.0 - ab[t])
        else:
            x = (x - beta / np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(1.0 - beta)
        if t > 1:
            x = x + np.sqrt(beta * (1.0 - ab[t - 1]) / (1.0 - ab[t])) * rng.normal((n, model.d))
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Auxiliary generator


@dataclass
class Generator:
    net: Mlp
    class_emb: np.ndarray
    z_dim: int
    image_shape: tuple[int, int, int] = (0, 0, 1)

    @classmethod
    def init(cls, d: int, n_classes: int, rng: SeededRng, z_dim: int = 16, hidden: Sequence[int] = (128,),
             emb_dim: int = 8, image_shape=(0, 0, 1)) -> "Generator":
        net = Mlp.init([z_dim + emb_dim, *hidden, d], rng.child("generator"), output="sigmoid")
        emb = rng.child("gen_class_emb").normal((n_classes, emb_dim))
        return cls(net, emb, z_dim, tuple(image_shape))

    @property
    def d(self) -> int:
        return self.net.layer_dims[-1]

    @property
    def n_classes(self) -> int:
        return self.class_emb.shape[0]

    @property
    def n_params(self) -> int:
        return self.net.n_params + self.class_emb.size

    def params(self) -> list[np.ndarray]:
        return self.net.params() + [self.class_emb]

    def with_params(self, params) -> "Generator":
        return Generator(self.net.with_params(params[:-1]), params[-1], self.z_dim, self.image_shape)

    def _inputs(self, z, labels):
        return np.concatenate([z, self.class_emb[np.asarray(labels, dtype=np.int64)]], axis=1)

    def __call__(self, z, labels) -> np.ndarray:
        return mlp_forward(self.net, self._inputs(np.atleast_2d(z), np.atleast_1d(labels)))


_MATCH_TOL = 1e-12


def _rff_vjp(x, v, proj: RffProjection):
    """``J_phi(x)^T v`` row-wise for a batch ``x`` of shape ``(n, d)``."""
    z = x @ proj.omega.T / proj.bandwidth
    k = proj.K // 2
    coef = proj.scale * (-np.sin(z) * v[:, :k] + np.cos(z) * v[:, k:])
    return coef @ proj.omega / proj.bandwidth


def rff_match_loss_and_grad(gen: Generator, z_batch, labels, proj: RffProjection,
                            target: FrequencyFeatureSet):
    """``sum_c || mu_target[c] - mean_{i: y_i = c} phi(G(z_i, c)) ||`` and its gradient.

    Returns:
        ``(loss, grads, missing)`` where ``missing`` lists target classes with
        no sample in the batch (they contribute nothing).
    """
    z_batch = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if target.K != proj.K:
        raise ValueError(f"target dimension {target.K} != projection dimension {proj.K}")
    x = gen._inputs(z_batch, labels)
    imgs = mlp_forward(gen.net, x)
    phi = rff_embed(imgs, proj)
    loss = 0.0
    v = np.zeros_like(phi)
    missing = []
    for c in range(target.n_classes):
        mask = labels == c
        n_c = int(mask.sum())
        if n_c == 0:
            missing.append(c)
            continue
        r = phi[mask].mean(axis=0) - target.mu[c]
        norm = float(np.linalg.norm(r))
        loss += norm
        # below rounding level the minimum is reached and 0 is a valid subgradient
        if norm > _MATCH_TOL:
            v[mask] = r / (norm * n_c)
    if not np.isfinite(loss):
        raise TrainingDivergenceError("non-finite frequency-matching loss", "frequency")
    out_grad = _rff_vjp(imgs, v, proj)
    g, gx = mlp_backward(gen.net, x, out_grad)
    emb_grad = _embedding_grads(gx[:, -gen.class_emb.shape[1]:], labels, gen.n_classes, False)
    return loss, g.params() + [emb_grad], missing


def train_generator(gen: Generator, target: FrequencyFeatureSet, proj: RffProjection, epochs: int,
                    batch_size: int, lr: float, rng: SeededRng, steps_per_epoch: int = 40):
    """Fit the generator to the target embeddings with Adam.

    Batches are class-balanced (label ``i mod C``) so every class is present.

    Returns:
        ``(generator, trace)``; ``trace`` has the loss of every step.
    """
    if epochs < 1:
        raise ValueError("need at least one epoch")
    if batch_size < target.n_classes:
        raise ValueError("batch must hold at least one sample per class")
    labels = np.arange(batch_size) % target.n_classes
    params = gen.params()
    state = AdamState.zeros_like(params)
    trace = []
    for _ in range(epochs * steps_per_epoch):
        z = rng.normal((batch_size, gen.z_dim))
        loss, grads, _ = rff_match_loss_and_grad(gen.with_params(params), z, labels, proj, target)
        try:
            params, state = adam_step(params, grads, state, lr)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(str(exc), "frequency") from None
        trace.append(loss)
    return gen.with_params(params), trace


def generate_frequency_dataset(gen: Generator, n: int, rng: SeededRng,
                               class_probs: Sequence[float] | None = None) -> LabeledDataset:
    """``n`` generated images with labels drawn from ``class_probs`` (uniform by default)."""
    if n < 1:
        raise ValueError("need at least one image")
    C = gen.n_classes
    p = np.full(C, 1.0 / C) if class_probs is None else np.asarray(class_probs, dtype=np.float64)
    if p.shape != (C,) or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("class_probs must be a nonnegative vector with one entry per class")
    labels = rng.generator.choice(C, size=n, p=p / p.sum())
    imgs = gen(rng.normal((n, gen.z_dim)), labels)
    return LabeledDataset(np.clip(imgs, 0.0, 1.0), labels, gen.image_shape if gen.image_shape[0] else (0, 0, 1), C)


# ---------------------------------------------------------------------------
# Checkpoints: b"FETA" | version (1 byte) | header length (<I) | JSON header | <f4 weights

CHECKPOINT_MAGIC = b"FETA"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: DiffusionModel | Generator, seed: int | None = None) -> Path:
    path = Path(path)
    if isinstance(model, DiffusionModel):
        header = {"kind": "diffusion", "layer_dims": model.denoiser.layer_dims,
                  "output": model.denoiser.output, "schedule": model.schedule.to_dict(),
                  "t_dim": model.t_dim}
    else:
        header = {"kind": "generator", "layer_dims": model.net.layer_dims, "output": model.net.output,
                  "z_dim": model.z_dim}
    header.update(classes=model.n_classes, emb_dim=int(model.class_emb.shape[1]),
                  image_shape=list(model.image_shape), seed=seed,
                  layout="W0,b0,...,W_last,b_last,class_emb; row-major")
    raw = json.dumps(header, sort_keys=True).encode()
    weights = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in model.params())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]) + struct.pack("<I", len(raw)) + raw + weights)
    return path


def load_checkpoint(path) -> DiffusionModel | Generator:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no checkpoint at {path}")
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    if blob[4] != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint version {blob[4]} unsupported")
    (n,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9:9 + n])
    flat = np.frombuffer(blob[9 + n:], dtype="<f4").astype(np.float64)
    dims = header["layer_dims"]
    shapes = []
    for a, b in zip(dims[:-1], dims[1:]):
        shapes += [(b, a), (b,)]
    shapes.append((header["classes"], header["emb_dim"]))
    if flat.size != sum(int(np.prod(s)) for s in shapes):
        raise DataError("checkpoint weight payload does not match its header")
    params, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        params.append(flat[pos:pos + size].reshape(s).copy())
        pos += size
    net = Mlp(params[:-1:2], params[1:-1:2], header["output"])
    shape = tuple(header["image_shape"])
    if header["kind"] == "diffusion":
        sch = header["schedule"]
        schedule = NoiseSchedule.linear(sch["T"], sch["beta_start"], sch["beta_end"])
        return DiffusionModel(net, params[-1], schedule, header["t_dim"], shape)
    return Generator(net, params[-1], header["z_dim"], shape)

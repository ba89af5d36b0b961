"""End-to-end curriculum: feature extraction, warm-ups, DP-SGD fine-tuning.

Stages
------
(a) extract the private shortcuts (central images, frequency features);
(b) spatial warm-up: plain training of the synthesizer on clamped central images;
(c) frequency warm-up: fit the auxiliary generator to the frequency features,
    sample ``N_f`` images from it and train the synthesizer on them;
(d) DP-SGD fine-tuning on the sensitive data.

(b) and (c) only see privatised artifacts. They run while the sensitive
dataset handle is sealed, so any attempt to read raw records raises
:class:`~feta.errors.PrivacyBoundaryError`.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .accountant import SgmSpec, budget_ratios, calibrate_sigma_d, ledger_for, to_dp
from .data_eval import EvalReport, evaluate
from .dataset import LabeledDataset
from .dpsgd import DpSgdConfig, finetune, steps_for_epochs
from .errors import ConfigError, FetaError, InfeasibleBudgetError, MissingArtifactError, PrivacyBoundaryError
from .features import (CentralImageSet, FeatureConfig, FrequencyFeatureSet, extract_features,
                       sample_projection)
from .models import (DiffusionModel, Generator, NoiseSchedule, generate_frequency_dataset, sample_images,
                     train_diffusion, train_generator)
from .numerics import SeededRng, stream_id

__all__ = [
    "ORDERS",
    "CurriculumConfig",
    "RunReport",
    "SensitiveData",
    "run_curriculum",
    "allocation_sweep",
    "plan_budget",
    "table6_mnist_specs",
    "format_sweep_table",
    "synthesize",
    "evaluate_model",
    "evaluation_projection",
    "check_features",
    "feature_config",
]

ORDERS = ("spatial_then_frequency", "frequency_then_spatial", "mixed", "spatial_only", "frequency_only", "none")

# share of the target epsilon the feature queries may use before a run is refused
FEATURE_BUDGET_CAP = 0.95


@dataclass
class CurriculumConfig:
    """Every knob of one run. Defaults are the desk-scale toy setting (8x8, 2 classes).

    The two RFF bandwidths divide images before projection. For ``d = 64``
    the defaults are ``sqrt(d) / 4`` (training features) and ``sqrt(d) / 2``
    (evaluation metric); a bandwidth of 1 leaves the kernel so narrow on
    [0, 1] images that every non-duplicate pair looks equally far apart.

    Field names follow the hyper-parameter table of the method: ``spatial_*``
    for central-image warm-up, ``gen_*`` for the auxiliary generator, ``freq_*``
    for diffusion training on generated images, ``finetune_*`` for DP-SGD.
    """

    target_eps: float = 1.0
    delta: float = 1e-5
    seed: int = 0
    order: str = "spatial_then_frequency"

    sigma_t: float = 20.0
    spatial_epochs: int = 300
    spatial_lr: float = 3e-4
    spatial_batch: int = 50
    C_t: float = 4.0
    q_t: float = 1.0
    N_t: int = 5

    sigma_f: float = 10.0
    K: int = 128
    rff_bandwidth: float = 2.0
    gen_epochs: int = 5
    gen_steps_per_epoch: int = 40
    gen_lr: float = 0.01
    gen_batch: int = 100
    freq_epochs: int = 10
    freq_lr: float = 3e-4
    B_f: int = 256
    N_f: int = 6000

    finetune_epochs: float = 10.0
    finetune_lr: float = 3e-3
    clip: float = 1.0
    q_d: float = 0.25
    finetune_optimizer: str = "sgd"

    T: int = 100
    hidden: tuple[int, ...] = (256, 256)
    t_dim: int = 16
    emb_dim: int = 8
    gen_hidden: tuple[int, ...] = (128,)
    z_dim: int = 16

    eval_samples: int = 1000
    eval_K: int = 1000
    eval_bandwidth: float = 4.0
    classifier_steps: int = 600
    n_star: int | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.gen_hidden = tuple(int(h) for h in self.gen_hidden)
        self.validate()

    def validate(self):
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}, got {self.order!r}")
        if not self.target_eps > 0:
            raise ConfigError("target_eps must be positive (use inf for a non-private run)")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.sigma_t < 0 or self.sigma_f < 0:
            raise ConfigError("noise scales must be nonnegative")
        if not 0 < self.q_t <= 1 or not 0 < self.q_d <= 1:
            raise ConfigError("sampling rates must lie in (0, 1]")
        if not (self.rff_bandwidth > 0 and self.eval_bandwidth > 0):
            raise ConfigError("RFF bandwidths must be positive")
        if self.K < 2 or self.K % 2:
            raise ConfigError("K must be even and >= 2")
        if self.finetune_optimizer not in ("sgd", "adam"):
            raise ConfigError("finetune_optimizer must be 'sgd' or 'adam'")
        for name in ("N_t", "N_f", "spatial_batch", "gen_batch", "B_f", "T", "gen_epochs", "gen_steps_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.finetune_epochs < 0 or self.spatial_epochs < 0 or self.freq_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")

    @property
    def uses_spatial(self) -> bool:
        return self.order in ("spatial_then_frequency", "frequency_then_spatial", "mixed", "spatial_only")

    @property
    def uses_frequency(self) -> bool:
        return self.order in ("spatial_then_frequency", "frequency_then_spatial", "mixed", "frequency_only")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"], d["gen_hidden"] = list(self.hidden), list(self.gen_hidden)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "CurriculumConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        doc = dict(doc)
        if isinstance(doc.get("target_eps"), str):
            doc["target_eps"] = float(doc["target_eps"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **kw) -> "CurriculumConfig":
        return dataclasses.replace(self, **kw)


class SensitiveData:
    """Gatekeeper for the raw dataset; reads fail while sealed."""

    def __init__(self, dataset: LabeledDataset):
        self._dataset = dataset
        self._sealed_by: str | None = None

    def open(self) -> LabeledDataset:
        if self._sealed_by is not None:
            raise PrivacyBoundaryError(f"stage '{self._sealed_by}' may only read privatised artifacts")
        return self._dataset

    @contextmanager
    def sealed(self, stage: str):
        prev, self._sealed_by = self._sealed_by, stage
        try:
            yield self
        finally:
            self._sealed_by = prev


@dataclass
class RunReport:
    epsilon: float
    delta: float
    target_eps: float
    sigma_d: float
    t_d: int
    budget_shares: dict | None
    specs: list
    stage_losses: dict
    evaluation: dict | None
    config: dict
    seed: int
    order: str
    notes: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(_jsonable(self.to_dict(include_timing)), indent=2, sort_keys=True) + "\n"

    def recomposed_epsilon(self) -> float:
        if not self.specs:
            return math.inf
        specs = [SgmSpec(s["q"], s["sigma"], s["steps"], s["label"]) for s in self.specs]
        return to_dp(ledger_for(specs), self.delta)[0]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(x, np.integer):
        return int(x)
    return x


def feature_config(cfg: CurriculumConfig, n_star=None) -> FeatureConfig:
    return FeatureConfig(K=cfg.K, seed=cfg.seed, sigma_t=cfg.sigma_t, sigma_f=cfg.sigma_f, C_t=cfg.C_t,
                         q_t=cfg.q_t, n_central=cfg.N_t, n_star=n_star, bandwidth=cfg.rff_bandwidth)


def _stage_specs(cfg: CurriculumConfig) -> list[SgmSpec]:
    specs = []
    if cfg.uses_spatial and cfg.sigma_t > 0:
        specs.append(SgmSpec(cfg.q_t, cfg.sigma_t, cfg.N_t, "spatial"))
    if cfg.uses_frequency and cfg.sigma_f > 0:
        specs.append(SgmSpec(1.0, cfg.sigma_f, 1, "frequency"))
    return specs


def plan_budget(cfg: CurriculumConfig) -> dict:
    """Calibrate DP-SGD noise for a config without touching data.

    Returns a dict with ``sigma_d``, ``t_d``, ``specs`` and, for finite targets,
    ``epsilon`` and ``shares``.

    Raises:
        InfeasibleBudgetError: feature queries need more than 95% of the target
            or a used query has zero noise under a finite target.
    """
    t_d = steps_for_epochs(cfg.finetune_epochs, cfg.q_d)
    if math.isinf(cfg.target_eps):
        return {"sigma_d": 0.0, "t_d": t_d, "specs": [], "epsilon": math.inf, "shares": None}
    if (cfg.uses_spatial and cfg.sigma_t == 0) or (cfg.uses_frequency and cfg.sigma_f == 0):
        raise InfeasibleBudgetError("a finite target needs positive sigma_t / sigma_f for every used query")
    fixed = _stage_specs(cfg)
    if fixed:
        feat_eps = to_dp(ledger_for(fixed), cfg.delta)[0]
        if feat_eps > FEATURE_BUDGET_CAP * cfg.target_eps:
            raise InfeasibleBudgetError(
                f"feature queries cost epsilon={feat_eps:.4f}, over {FEATURE_BUDGET_CAP:.0%} of the target "
                f"{cfg.target_eps}; raise sigma_t / sigma_f")
    if t_d == 0:
        specs = fixed
        sigma_d = 0.0
    else:
        sigma_d = calibrate_sigma_d(cfg.target_eps, cfg.delta, fixed, cfg.q_d, t_d)
        specs = fixed + [SgmSpec(cfg.q_d, sigma_d, t_d, "dpsgd")]
    ledger = ledger_for(specs)
    eps = to_dp(ledger, cfg.delta)[0] if specs else 0.0
    shares = budget_ratios({s.label: s for s in specs}, cfg.delta)["shares"] if specs else None
    return {"sigma_d": sigma_d, "t_d": t_d, "specs": specs, "epsilon": eps, "shares": shares}


def check_features(cfg: CurriculumConfig, features, d: int, n_classes: int):
    """Validate precomputed features against a config; returns the pair the order needs.

    Raises:
        MissingArtifactError: the order needs a query that was not extracted.
        ConfigError: noise scales or shapes disagree with the config.
    """
    central, freq = features
    if cfg.uses_spatial:
        if central is None:
            raise MissingArtifactError(f"order {cfg.order!r} needs central images, none were extracted")
        if (central.sigma_t, central.C_t, central.q_t, central.n_central) != (cfg.sigma_t, cfg.C_t, cfg.q_t, cfg.N_t):
            raise ConfigError("central images were extracted with different sigma_t / C_t / q_t / N_t")
        if central.images.shape[0] != n_classes or central.images.shape[2] != d:
            raise ConfigError("central images do not match the dataset's classes or image size")
    if cfg.uses_frequency:
        if freq is None:
            raise MissingArtifactError(f"order {cfg.order!r} needs frequency features, none were extracted")
        if (freq.sigma_f, freq.K, freq.bandwidth) != (cfg.sigma_f, cfg.K, cfg.rff_bandwidth):
            raise ConfigError("frequency features were extracted with different sigma_f / K / bandwidth")
        if freq.n_classes != n_classes:
            raise ConfigError("frequency features do not match the dataset's classes")
    return (central if cfg.uses_spatial else None), (freq if cfg.uses_frequency else None)


def _spatial_warmup(model: DiffusionModel, central: CentralImageSet, cfg: CurriculumConfig, rng: SeededRng):
    data = central.as_dataset()
    steps = cfg.spatial_epochs * math.ceil(len(data) / cfg.spatial_batch)
    model, trace, _ = train_diffusion(model, data, steps, cfg.spatial_batch, cfg.spatial_lr, rng, stage="spatial")
    return model, trace


def _fit_generator(freq: FrequencyFeatureSet, cfg: CurriculumConfig, d: int, shape, rng: SeededRng):
    proj = sample_projection(freq.seed, freq.K, d, freq.bandwidth)
    gen = Generator.init(d, freq.n_classes, rng.child("init"), z_dim=cfg.z_dim, hidden=cfg.gen_hidden,
                         emb_dim=cfg.emb_dim, image_shape=shape)
    gen, gtrace = train_generator(gen, freq, proj, cfg.gen_epochs, cfg.gen_batch, cfg.gen_lr, rng.child("train"),
                                  steps_per_epoch=cfg.gen_steps_per_epoch)
    synth = generate_frequency_dataset(gen, cfg.N_f, rng.child("sample"))
    return synth, gtrace


def _frequency_warmup(model: DiffusionModel, synth: LabeledDataset, cfg: CurriculumConfig, rng: SeededRng):
    steps = cfg.freq_epochs * math.ceil(len(synth) / cfg.B_f)
    model, trace, _ = train_diffusion(model, synth, steps, cfg.B_f, cfg.freq_lr, rng, stage="frequency")
    return model, trace


def run_curriculum(config: CurriculumConfig, dataset: LabeledDataset | SensitiveData,
                   test: LabeledDataset | None = None, log=None, features=None):
    """Execute one configured curriculum.

    Args:
        config: run configuration; ``config.order`` picks the curriculum.
        dataset: sensitive training data (or an existing :class:`SensitiveData`).
        test: held-out real data for evaluation; skipped when ``None``.
        log: optional text stream receiving DP-SGD JSON-lines records.
        features: optional ``(CentralImageSet | None, FrequencyFeatureSet | None)``
            from an earlier extraction; must match the config's noise scales.

    Returns:
        ``(DiffusionModel, RunReport)``
    """
    handle = dataset if isinstance(dataset, SensitiveData) else SensitiveData(dataset)
    cfg = config
    notes = []
    timings = {}
    losses: dict[str, Any] = {}
    plan = plan_budget(cfg)

    raw = handle.open()
    raw.require_coverage()
    d, C, shape = raw.d, raw.n_classes, raw.shape
    n_star = cfg.n_star or len(raw)
    master = SeededRng(cfg.seed, "pipeline")

    t0 = time.perf_counter()
    central = freq = None
    if features is not None:
        central, freq = check_features(cfg, features, d, C)
    elif cfg.uses_spatial or cfg.uses_frequency:
        central, freq = extract_features(raw, feature_config(cfg), spatial=cfg.uses_spatial,
                                         frequency=cfg.uses_frequency)
    timings["extract"] = time.perf_counter() - t0
    del raw

    model = DiffusionModel.init(d, C, master.child("model"), hidden=cfg.hidden, t_dim=cfg.t_dim,
                                emb_dim=cfg.emb_dim, schedule=NoiseSchedule.linear(cfg.T), image_shape=shape)

    def spatial_stage(m):
        t = time.perf_counter()
        with handle.sealed("spatial warm-up"):
            m, tr = _spatial_warmup(m, central, cfg, master.child("spatial"))
        losses["spatial"] = tr
        timings["spatial"] = time.perf_counter() - t
        return m

    def frequency_stage(m, synth):
        t = time.perf_counter()
        with handle.sealed("frequency warm-up"):
            m, tr = _frequency_warmup(m, synth, cfg, master.child("frequency"))
        losses["frequency"] = tr
        timings["frequency"] = time.perf_counter() - t
        return m

    synth_f = None
    if cfg.uses_frequency:
        t = time.perf_counter()
        with handle.sealed("auxiliary generator"):
            synth_f, gtrace = _fit_generator(freq, cfg, d, shape, master.child("generator"))
        losses["generator"] = gtrace
        timings["generator"] = time.perf_counter() - t

    if cfg.order == "spatial_then_frequency":
        model = frequency_stage(spatial_stage(model), synth_f)
    elif cfg.order == "frequency_then_spatial":
        model = spatial_stage(frequency_stage(model, synth_f))
    elif cfg.order == "spatial_only":
        model = spatial_stage(model)
    elif cfg.order == "frequency_only":
        model = frequency_stage(model, synth_f)
    elif cfg.order == "mixed":
        t = time.perf_counter()
        with handle.sealed("mixed warm-up"):
            sdata = central.as_dataset()
            steps = 2 * max(cfg.spatial_epochs * math.ceil(len(sdata) / cfg.spatial_batch),
                            cfg.freq_epochs * math.ceil(len(synth_f) / cfg.B_f))
            model, tr, _ = train_diffusion(model, [sdata, synth_f], steps, [cfg.spatial_batch, cfg.B_f],
                                           cfg.spatial_lr, master.child("mixed"), stage="mixed")
        losses["mixed"] = tr
        timings["mixed"] = time.perf_counter() - t
        notes.append("mixed: spatial and frequency minibatches alternate 1:1")

    t = time.perf_counter()
    fixed = [s for s in plan["specs"] if s.label != "dpsgd"]
    dp_cfg = DpSgdConfig(clip=cfg.clip, sigma_d=plan["sigma_d"], q_d=cfg.q_d, steps=plan["t_d"],
                         lr=cfg.finetune_lr, n_star=n_star, optimizer=cfg.finetune_optimizer, delta=cfg.delta)
    ledger = ledger_for(fixed)
    model, ledger, dtrace = finetune(model, handle.open(), dp_cfg, master.child("dpsgd"), ledger,
                                     target_eps=None if math.isinf(cfg.target_eps) else cfg.target_eps, log=log)
    losses["dpsgd"] = [r["loss"] for r in dtrace]
    timings["dpsgd"] = time.perf_counter() - t

    if math.isinf(cfg.target_eps):
        eps, shares = math.inf, None
        specs = []
    else:
        specs = list(ledger.entries)
        eps = to_dp(ledger, cfg.delta)[0]
        shares = budget_ratios({s.label: s for s in specs}, cfg.delta)["shares"]
        if eps > cfg.target_eps:
            raise InfeasibleBudgetError(f"realised epsilon {eps} exceeds target {cfg.target_eps}")

    evaluation = None
    if test is not None:
        t = time.perf_counter()
        evaluation = evaluate_model(model, test, cfg).to_dict()
        timings["evaluation"] = time.perf_counter() - t
    report = RunReport(eps, cfg.delta, cfg.target_eps, plan["sigma_d"], plan["t_d"], shares,
                       [s.to_dict() for s in specs], losses, evaluation, cfg.to_dict(), cfg.seed, cfg.order,
                       notes, timings)
    return model, report


def synthesize(model: DiffusionModel, n: int, seed: int, stream: str = "synthesis") -> LabeledDataset:
    """``n`` class-balanced samples (label ``i mod C``)."""
    labels = np.arange(n) % model.n_classes
    imgs = sample_images(model, n, labels, SeededRng(seed, stream))
    return LabeledDataset(imgs, labels, model.image_shape if model.image_shape[0] else (0, 0, 1), model.n_classes)


def evaluation_projection(cfg: CurriculumConfig, d: int):
    # independent of the training projection so the metric is not the training target
    return sample_projection(stream_id("eval-projection", cfg.seed), cfg.eval_K, d, cfg.eval_bandwidth)


def evaluate_model(model: DiffusionModel, test: LabeledDataset, cfg: CurriculumConfig) -> EvalReport:
    synth = synthesize(model, cfg.eval_samples, cfg.seed)
    return evaluate(synth, test, evaluation_projection(cfg, test.d), cfg.seed, cfg.classifier_steps)


# ---------------------------------------------------------------------------
# Allocation sweeps


def table6_mnist_specs(sigma_t: float = 20.0, sigma_f: float = 26.6, sigma_d: float | None = None,
                       target_eps: float = 1.0, delta: float = 1e-5, n_classes: int = 10) -> dict:
    """Mechanisms of the published MNIST setting at epsilon = 1.

    Sampling rates and counts follow the hyper-parameter table: ``q_t = 0.11``,
    50 central images split over ``n_classes`` classes (so ``50 / n_classes``
    compositions, classes being disjoint), one full-data frequency release,
    and ``round(150 / 0.074)`` DP-SGD steps at ``q_d = 0.074``. ``sigma_d`` is
    calibrated to ``target_eps`` when not given.
    """
    q_t, n_central, q_d, epochs = 0.11, 50, 0.074, 150
    t_d = steps_for_epochs(epochs, q_d)
    fixed = [SgmSpec(q_t, sigma_t, n_central // n_classes, "spatial"), SgmSpec(1.0, sigma_f, 1, "frequency")]
    if sigma_d is None:
        sigma_d = calibrate_sigma_d(target_eps, delta, fixed, q_d, t_d)
    specs = fixed + [SgmSpec(q_d, sigma_d, t_d, "dpsgd")]
    ratios = budget_ratios({s.label: s for s in specs}, delta)
    return {"specs": specs, "sigma_d": sigma_d, "t_d": t_d, **ratios}


def _sweep_cell(args):
    base, st, sf, dataset, test, train = args
    cfg = base.replace(sigma_t=st, sigma_f=sf, seed=stream_id("sweep", base.seed, int(st * 1000), int(sf * 1000)) % (1 << 32))
    cell = {"sigma_t": st, "sigma_f": sf}
    try:
        plan = plan_budget(cfg)
        cell.update(sigma_d=plan["sigma_d"], t_d=plan["t_d"], epsilon=plan["epsilon"], shares=plan["shares"])
        if train:
            _, report = run_curriculum(cfg, dataset, test)
            cell["report"] = report.to_dict()
            cell["epsilon"] = report.epsilon
    except (FetaError, ValueError) as exc:
        cell["error"] = f"{type(exc).__name__}: {exc}"
    return cell


def allocation_sweep(base: CurriculumConfig, sigma_t_grid: Sequence[float], sigma_f_grid: Sequence[float],
                     dataset: LabeledDataset | None = None, test: LabeledDataset | None = None,
                     train: bool = True, workers: int | None = None) -> list[dict]:
    """One run per ``(sigma_t, sigma_f)`` cell at the base config's target epsilon.

    Infeasible cells carry an ``error`` entry instead of failing the sweep.
    Each cell has its own seed derived from the master seed and its
    coordinates. ``workers`` defaults to ``$FETA_THREADS`` (or 1).
    """
    if train and dataset is None:
        raise ValueError("training sweeps need a dataset")
    workers = workers or int(os.environ.get("FETA_THREADS", "1"))
    jobs = [(base, st, sf, dataset, test, train) for st in sigma_t_grid for sf in sigma_f_grid]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_cell, jobs))
    return [_sweep_cell(j) for j in jobs]


def format_sweep_table(cells: list[dict], value: str = "shares") -> str:
    """Plain-text grid: sigma_t rows by sigma_f columns.

    ``value`` is ``"shares"`` (spatial / frequency / DP-SGD percentages),
    ``"sigma_d"``, ``"accuracy"`` or ``"rff_mmd"``.
    """
    sts = sorted({c["sigma_t"] for c in cells})
    sfs = sorted({c["sigma_f"] for c in cells})
    by = {(c["sigma_t"], c["sigma_f"]): c for c in cells}

    def fmt(c):
        if c is None or "error" in c:
            return "infeasible"
        if value == "shares":
            s = c.get("shares") or {}
            return " / ".join(f"{100 * s.get(k, 0.0):.2f}" for k in ("spatial", "frequency", "dpsgd"))
        if value == "sigma_d":
            return f"{c['sigma_d']:.2f}"
        ev = (c.get("report") or {}).get("evaluation") or {}
        if value == "accuracy":
            return f"{ev['accuracy']:.3f}" if ev else "-"
        if value == "rff_mmd":
            return f"{ev['rff_mmd']['pooled']:.4f}" if ev else "-"
        raise ValueError(f"unknown table value {value!r}")

    header = ["sigma_t \\ sigma_f"] + [f"{sf:g}" for sf in sfs]
    rows = [[f"{st:g}"] + [fmt(by.get((st, sf))) for sf in sfs] for st in sts]
    widths = [max(len(r[j]) for r in rows + [header]) for j in range(len(header))]
    return "\n".join("  ".join(x.rjust(w) for x, w in zip(r, widths)) for r in [header] + rows)

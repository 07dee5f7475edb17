"""Adam, the five training regimes, evaluation and inference helpers."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .ctc import Charset, best_path_decode, ctc_loss
from .data import (AugmentConfig, Dataset, NormStats, ParagraphSample, augment, load_image,
                   load_manifest, make_batch, preprocess, sample_rng)
from .metrics import EvalReport
from .model import ModelConfig, Recognizer, build_model, transfer_weights

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    skipped_steps: int = 0


class Adam:
    """Bias-corrected Adam. Steps with a non-finite gradient are skipped."""

    def __init__(self, params: Sequence[ad.Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = OptimizerState([np.zeros_like(p.data) for p in self.params],
                                    [np.zeros_like(p.data) for p in self.params])

    def hyperparameters(self) -> dict:
        return {"optimizer": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "clip_norm": self.clip_norm}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if not all(np.isfinite(g).all() for g in grads):
            self.state.skipped_steps += 1
            logger.warning("non-finite gradient at step %d: update skipped", self.state.step + 1)
            return False
        if self.clip_norm is not None:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)
        return True


def adam_step(params: Sequence[ad.Tensor], grads: Sequence[np.ndarray], state: Adam) -> bool:
    """Functional form: load ``grads`` into ``params`` and take one step of ``state``."""
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=p.dtype)
    return state.step()


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Regime:
    name: str
    model_kind: str
    level: str  # "line" or "paragraph"
    init_from: str | None  # regime whose checkpoint must seed this one


REGIMES = {
    "pool-line-r": Regime("pool-line-r", "pool_line_r", "line", None),
    "span-line-ra": Regime("span-line-ra", "span", "line", None),
    "span-scratch": Regime("span-scratch", "span", "paragraph", None),
    "span-pt-r": Regime("span-pt-r", "span", "paragraph", "pool-line-r"),
    "span-pt-ra": Regime("span-pt-ra", "span", "paragraph", "span-line-ra"),
}
_ALIASES = {"span-line-r&a": "span-line-ra", "span-pt-r&a": "span-pt-ra"}
DEFAULT_BATCH = {"line": 16, "paragraph": 4}


def get_regime(name: str) -> Regime:
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in REGIMES:
        raise ValueError(f"unknown regime {name!r}; valid regimes: {', '.join(REGIMES)}")
    return REGIMES[key]


@dataclass
class TrainRunConfig:
    regime: str
    data: str
    out_dir: str
    val_data: str | None = None
    init: str | None = None
    encoder_only: bool = False
    batch_size: int | None = None
    max_steps: int = 1000
    max_wall_time: float | None = None
    max_cpu_time: float | None = None  # process CPU seconds, all threads
    seed: int = 0
    lr: float = 1e-4
    eval_every: int = 100
    augment: bool = True
    clip_norm: float | None = None
    charset: str | None = None  # pin the symbol set instead of inferring it from the data
    model: dict = field(default_factory=dict)  # ModelConfig overrides, charset size excluded

    def __post_init__(self):
        reg = get_regime(self.regime)
        self.regime = reg.name
        if reg.init_from and not self.init:
            raise ValueError(f"regime {reg.name} requires an init checkpoint "
                             f"(trained with {reg.init_from})")
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH[reg.level]
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")


@dataclass
class TrainResult:
    last: Path
    best: Path
    metrics: Path
    losses: list[float]
    val_cers: list[tuple[int, float]]
    transfer: object | None = None


class MetricsLog:
    """CSV rows: step, ctc_loss, val_cer, wall_time_s."""

    FIELDS = ("step", "ctc_loss", "val_cer", "wall_time_s")

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.FIELDS)

    def row(self, step, loss=None, val_cer=None, wall=0.0):
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        self._writer.writerow([step, fmt(loss), fmt(val_cer), f"{wall:.3f}"])
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _dataset_for(path, charset: Charset | None, stats: NormStats | None) -> Dataset:
    return Dataset.from_manifest(path, charset=charset, stats=stats)


def train(config: TrainRunConfig) -> TrainResult:
    """Run one regime end to end.

    The data order comes from its own RNG stream seeded by ``config.seed``,
    so two regimes with the same seed and data see identical batches. The
    loss recorded for step k is computed before the k-th update.
    """
    reg = get_regime(config.regime)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    init_ckpt = Checkpoint.load(config.init) if config.init else None
    charset = Charset(tuple(config.charset)) if config.charset is not None else None
    if init_ckpt is not None:
        if charset is not None and charset != init_ckpt.charset:
            raise ValueError("the pinned charset differs from the init checkpoint's charset")
        charset = init_ckpt.charset
    if charset is not None:
        # fails loudly on any symbol the pretrained decoder cannot emit
        load_manifest(config.data, charset)
    elif config.val_data:
        texts = [t for _, t in load_manifest(config.data)] + [t for _, t in load_manifest(config.val_data)]
        charset = Charset.from_texts(texts)
    train_set = _dataset_for(config.data, charset, None)
    charset = train_set.charset
    stats = train_set.stats
    val_set = _dataset_for(config.val_data, charset, stats) if config.val_data else None

    model_cfg = ModelConfig(charset_size=len(charset), **config.model)
    model = build_model(reg.model_kind, model_cfg, seed=config.seed)
    report = None
    if init_ckpt is not None:
        if init_ckpt.config.charset_size != len(charset):
            raise ValueError("init checkpoint charset does not match the training data")
        report = transfer_weights(init_ckpt, model, encoder_only=config.encoder_only,
                                  target_charset=charset.symbols)
        logger.info("transferred %d parameters, %d fresh", len(report.copied), len(report.fresh))
    model.reseed_dropout([config.seed, 3])

    opt = Adam(model.parameters(), lr=config.lr, clip_norm=config.clip_norm)
    meta = {"regime": reg.name, "seed": config.seed, **opt.hyperparameters()}
    order_rng = np.random.default_rng([config.seed, 2])
    fill = stats.fill_values()
    aug_cfg = AugmentConfig()

    log = MetricsLog(out / "metrics.csv")
    last_path, best_path = out / "last.ckpt", out / "best.ckpt"
    losses: list[float] = []
    val_cers: list[tuple[int, float]] = []
    best_cer = float("inf")
    start = time.monotonic()
    cpu_start = time.process_time()

    def checkpoint(step):
        return Checkpoint.from_model(model, charset, stats, {**meta, "step": step})

    def validate(step):
        nonlocal best_cer
        if val_set is None:
            return None
        rep = evaluate_model(model, val_set)
        model.train()
        val_cers.append((step, rep.cer))
        if rep.cer < best_cer:
            best_cer = rep.cer
            checkpoint(step).save(best_path)
        return rep.cer

    def out_of_budget() -> bool:
        if config.max_wall_time is not None and time.monotonic() - start > config.max_wall_time:
            logger.info("wall-time budget reached at step %d", step)
            return True
        if config.max_cpu_time is not None and time.process_time() - cpu_start > config.max_cpu_time:
            logger.info("CPU-time budget reached at step %d", step)
            return True
        return False

    step = 0
    epoch = 0
    stopped = False
    while step < config.max_steps and not stopped:
        perm = order_rng.permutation(len(train_set))
        for b in range(0, len(perm), config.batch_size):
            if step >= config.max_steps:
                break
            if out_of_budget():
                stopped = True
                break
            idx = perm[b : b + config.batch_size]
            samples = [train_set[int(i)] for i in idx]
            if config.augment:
                samples = [augment(s, sample_rng(config.seed, epoch * len(train_set) + int(i)),
                                   stats, aug_cfg) for s, i in zip(samples, idx)]
            batch = make_batch(samples, charset, fill)
            model.train()
            lattice = model(batch.images)
            loss = ctc_loss(lattice.log_probs(), batch.labels, batch.valid_lengths)
            value = float(loss.data)
            losses.append(value)
            if loss.requires_grad:
                loss.backward()
                opt.step()
            opt.zero_grad()
            step += 1
            val_cer = None
            if config.eval_every and step % config.eval_every == 0:
                val_cer = validate(step)
            log.row(step, value, val_cer, time.monotonic() - start)
            if len(losses) > 1 and value >= losses[0] and step % 50 == 0:
                logger.info("step %d: loss %.4f has not decreased yet", step, value)
        epoch += 1
    if val_set is not None and (not val_cers or val_cers[-1][0] != step):
        log.row(step, None, validate(step), time.monotonic() - start)
    log.close()
    checkpoint(step).save(last_path)
    if val_set is None or not best_path.exists():
        checkpoint(step).save(best_path)
    return TrainResult(last_path, best_path, out / "metrics.csv", losses, val_cers, report)


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def predict_lattice(model: Recognizer, image: np.ndarray):
    """Eval-mode forward of one preprocessed (3, H, W) image."""
    model.eval()
    with ad.no_grad():
        return model(image[None].astype(model.parameters()[0].dtype))


def recognize(model: Recognizer, image: np.ndarray, charset: Charset) -> str:
    return best_path_decode(predict_lattice(model, image), charset)[0]


def evaluate_model(model: Recognizer, dataset: Dataset | Sequence[ParagraphSample],
                   charset: Charset | None = None) -> EvalReport:
    charset = charset or dataset.charset
    report = EvalReport()
    for sample in dataset:
        report.add(sample.transcription, recognize(model, sample.image, charset), sample.source_id)
    return report


def evaluate(checkpoint, manifest) -> EvalReport:
    """Best-path decode every manifest image with ``checkpoint`` and score it."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    records = load_manifest(manifest)
    if not records:
        logger.warning("manifest %s is empty; nothing to evaluate", manifest)
        return EvalReport()
    bad = sorted({ch for _, t in records for ch in ckpt.charset.unknown(t)})
    if bad:
        raise ValueError(f"manifest contains characters the checkpoint cannot emit: {bad}")
    model = ckpt.build()
    report = EvalReport()
    for path, text in records:
        image = preprocess(load_image(path), ckpt.stats)
        report.add(text, recognize(model, image, ckpt.charset), path.name)
    return report

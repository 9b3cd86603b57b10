"""Mini-batch Adam training with dev-BLEU model selection and ensembles."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .corpus import Example, FeatureSpec, Scenario, Vocabulary, build_vocab, make_example
from .diffcore import ParamStore
from .model import Model, ModelConfig, init_params, loss, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> AdamState:
        st = cls(**hyper)
        for name, t in params.items():
            st.m[name] = np.zeros_like(t.data)
            st.v[name] = np.zeros_like(t.data)
        return st


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update of every tensor in ``params``."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDiverged(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


@dataclass
class TrainConfig:
    batch_size: int = 100
    max_epochs: float = 30.0
    max_iters: int | None = None
    eval_every: int = 100
    patience: int = 5
    clip_norm: float = 5.0
    lr: float = 1e-3
    seed: int = 0
    min_count: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)
    timings: list[float] = field(default_factory=list)

    def append(self, entry: dict, wall_time: float) -> None:
        self.entries.append(entry)
        self.timings.append(wall_time)

    @property
    def best(self) -> dict | None:
        return max(self.entries, key=lambda e: e["dev_sbleu"], default=None)

    def dumps(self) -> str:
        """Deterministic serialization; wall-clock times are kept separate in ``timings``."""
        return json.dumps({"entries": self.entries}, indent=1, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")


@dataclass
class TrainResult:
    best: Model
    last: Model
    log: TrainLog
    iterations: int


def batch_loss_and_grads(examples: list[Example], params: ParamStore, cfg: ModelConfig) -> tuple[float, float, float]:
    """Mean loss over ``examples`` with gradients left in ``params``.

    Examples are processed in the given order so the reduction is fixed.
    """
    params.zero_grad()
    scale = 1.0 / len(examples)
    tot = nll = G = 0.0
    for ex in examples:
        L, parts = loss(ex, params, cfg)
        if not math.isfinite(L.item()):
            raise TrainingDiverged("loss became non-finite")
        dc.backward(dc.scale(L, scale))
        tot += L.item() * scale
        nll += parts.nll * scale
        G += parts.G * scale
    return tot, nll, G


def evaluate_model(model: Model, dev: list[Scenario], max_length: int | None = None) -> dict:
    # imported lazily: inference depends on training-free modules only
    from .evaluation import cbleu, sbleu, selection_f1
    from .inference import DecodeConfig, decode_corpus, selected_records

    cfg = DecodeConfig(max_length=max_length or default_max_length(dev))
    results = decode_corpus([model], dev, cfg)
    hyps = [r.words for r in results]
    refs = [list(s.tokens) for s in dev]
    report = {"dev_sbleu": sbleu(hyps, refs).score, "dev_cbleu": cbleu(hyps, refs).score}
    if any(s.gold_selection is not None for s in dev):
        preds = [selected_records(r.trace) for r in results]
        report["dev_f1"] = selection_f1(preds, [s.gold_selection for s in dev]).f1
    else:
        report["dev_f1"] = None
    return report


def default_max_length(scenarios: list[Scenario]) -> int:
    return 2 * max(len(s.tokens) for s in scenarios) + 1


def train(
    corpus: list[Scenario],
    dev: list[Scenario],
    model_cfg: dict | ModelConfig,
    cfg: TrainConfig,
    *,
    vocab: Vocabulary | None = None,
    feature_spec: FeatureSpec | None = None,
    init_seed: int | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train one model.

    ``model_cfg`` is either a full :class:`ModelConfig` or a dict of its
    size/ablation fields; feature and vocabulary sizes are then filled in
    from the corpus.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    if not dev:
        raise ValueError("empty dev corpus")
    vocab = vocab or build_vocab(corpus, cfg.min_count)
    feature_spec = feature_spec or FeatureSpec.from_corpus(corpus)
    if isinstance(model_cfg, dict):
        model_cfg = ModelConfig(feature_size=feature_spec.width, vocab_size=len(vocab), **model_cfg)
    params = init_params(model_cfg, cfg.seed if init_seed is None else init_seed)
    model = Model(model_cfg, params, vocab, feature_spec)
    examples = [make_example(s, feature_spec, vocab) for s in corpus]

    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.for_params(params, lr=cfg.lr)
    batch = min(cfg.batch_size, len(examples))
    iters_per_epoch = len(examples) / batch
    max_iters = int(math.ceil(cfg.max_epochs * iters_per_epoch))
    if cfg.max_iters is not None:
        max_iters = min(max_iters, cfg.max_iters)
    max_len = default_max_length(corpus)

    trainlog = TrainLog()
    best_model, best_score, stale = model.copy(), -math.inf, 0
    last_good = model.copy()
    start = time.perf_counter()
    window: list[tuple[float, float, float]] = []
    it = 0
    try:
        while it < max_iters:
            idx = rng.choice(len(examples), size=batch, replace=False)
            tot, nll, G = batch_loss_and_grads([examples[i] for i in idx], params, model_cfg)
            grads = params.grads()
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, adam)
            it += 1
            window.append((tot, nll, G))
            if it % cfg.eval_every == 0 or it == max_iters:
                report = evaluate_model(model, dev, max_len)
                w = np.asarray(window)
                entry = {
                    "iteration": it,
                    "epoch": it / iters_per_epoch,
                    "train_loss": float(w[:, 0].mean()),
                    "train_nll": float(w[:, 1].mean()),
                    "train_G": float(w[:, 2].mean()),
                    **report,
                }
                window = []
                trainlog.append(entry, time.perf_counter() - start)
                log.info("iter %d loss %.4f dev sBLEU %.2f", it, entry["train_loss"], entry["dev_sbleu"])
                last_good = model.copy()
                if entry["dev_sbleu"] > best_score:
                    best_score, stale, best_model = entry["dev_sbleu"], 0, model.copy()
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
    except TrainingDiverged:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(last_good, Path(out_dir) / "last_good.json")
        raise
    return TrainResult(best_model, model, trainlog, it)


def ensemble_train(
    corpus: list[Scenario],
    dev: list[Scenario],
    model_cfg: dict | ModelConfig,
    cfg: TrainConfig,
    k: int = 5,
    **kwargs,
) -> list[TrainResult]:
    """Train ``k`` models whose seeds are ``cfg.seed + i``."""
    if k < 1:
        raise ValueError("ensemble size must be >= 1")
    results = []
    for i in range(k):
        sub = TrainConfig(**{**asdict(cfg), "seed": cfg.seed + i})
        results.append(train(corpus, dev, model_cfg, sub, **kwargs))
    return results

"""Greedy and beam decoding, the k-NN beam filter, and record selection.

Decoding works against a *step function* ``step(state, prev_word) ->
(probs, new_state, info)`` so that toy distributions and model ensembles go
through exactly the same search code.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import model as mdl
from .corpus import EOS_ID, START_ID, FeatureSpec, Scenario, Vocabulary, featurize_scenario
from .evaluation import sbleu
from .model import AlignmentTrace, Model

log = logging.getLogger(__name__)

DECODE_MODES = ("greedy", "beam", "knn")


@dataclass(frozen=True)
class DecodeConfig:
    max_length: int = 100
    beam_width: int = 1
    neighbors: int = 1
    mode: str = "greedy"

    def __post_init__(self):
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.neighbors < 1:
            raise ValueError("neighbor count must be >= 1")
        if self.mode not in DECODE_MODES:
            raise ValueError(f"decode mode must be one of {DECODE_MODES}")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    state: Any = field(default=None, compare=False, repr=False)
    infos: tuple = field(default=(), compare=False, repr=False)
    finished: bool = False

    @property
    def content(self) -> tuple[int, ...]:
        """Tokens without the terminating EOS."""
        return self.tokens[:-1] if self.finished else self.tokens


StepFn = Callable[[Any, int], tuple[np.ndarray, Any, Any]]


def _logp(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(probs)


def greedy_search(step: StepFn, state, max_length: int, eos: int = EOS_ID, start: int = START_ID) -> Hypothesis:
    tokens: list[int] = []
    infos = []
    lp = 0.0
    prev = start
    for _ in range(max_length):
        probs, state, info = step(state, prev)
        logp = _logp(probs)
        k = int(np.argmax(logp))
        tokens.append(k)
        infos.append(info)
        lp += float(logp[k])
        prev = k
        if k == eos:
            return Hypothesis(tuple(tokens), lp, state, tuple(infos), True)
    return Hypothesis(tuple(tokens), lp, state, tuple(infos), False)


def _rank(h: Hypothesis):
    return (-h.logprob, h.tokens)


def beam_search(
    step: StepFn, state, width: int, max_length: int, eos: int = EOS_ID, start: int = START_ID
) -> list[Hypothesis]:
    """Beam search without length normalization.

    Finished hypotheses stay in the candidate pool and compete with
    extensions; ties rank by token sequence.  Returns up to ``width``
    hypotheses, best first.
    """
    beam = [Hypothesis((), 0.0, state)]
    for _ in range(max_length):
        pool: list[Hypothesis] = []
        for h in beam:
            if h.finished:
                pool.append(h)
                continue
            probs, new_state, info = step(h.state, h.tokens[-1] if h.tokens else start)
            logp = _logp(probs)
            for k in np.argsort(-logp, kind="stable")[:width]:
                k = int(k)
                pool.append(Hypothesis(h.tokens + (k,), h.logprob + float(logp[k]), new_state, h.infos + (info,), k == eos))
        pool.sort(key=_rank)
        beam = pool[:width]
        if all(h.finished for h in beam):
            break
    return beam


# ------------------------------------------------------------ model scoring


@dataclass
class StepInfo:
    beta: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    z: np.ndarray
    s: np.ndarray
    c: np.ndarray


def _check_compatible(models: Sequence[Model]) -> None:
    if not models:
        raise ValueError("no models")
    first = models[0]
    for m in models[1:]:
        if m.vocab.digest() != first.vocab.digest():
            raise ValueError("ensemble members use different vocabularies")
        if m.feature_spec != first.feature_spec:
            raise ValueError("ensemble members use different feature specs")


class EnsembleScorer:
    """Arithmetic mean of the members' next-word distributions.

    Alignment quantities reported per step are member averages.
    """

    def __init__(self, models: Sequence[Model]):
        _check_compatible(models)
        self.models = list(models)

    @property
    def vocab(self) -> Vocabulary:
        return self.models[0].vocab

    @property
    def feature_spec(self) -> FeatureSpec:
        return self.models[0].feature_spec

    def start(self, features: np.ndarray):
        state = []
        for m in self.models:
            ctx = mdl.prepare(features, m.params, m.config)
            s, c = mdl.initial_state(m.config)
            state.append((ctx, s, c))
        return tuple(state)

    def preselection(self, state) -> np.ndarray | None:
        ps = [ctx.p.data for ctx, _, _ in state if ctx.p is not None]
        return np.mean(ps, axis=0) if ps else None

    def step(self, state, prev_word: int):
        probs, new_state, parts = [], [], []
        for m, (ctx, s, c) in zip(self.models, state):
            st = mdl.step(ctx, prev_word, s, c, m.params, m.config)
            probs.append(st.out.probs)
            new_state.append((ctx, st.out.s, st.out.c))
            a = st.align
            parts.append((a.beta.data, a.w.data, a.alpha.data, a.z.data, st.out.s.data, st.out.c.data))
        if len(probs) == 1:
            avg = probs[0]
            info = StepInfo(*parts[0])
        else:
            avg = np.mean(probs, axis=0)
            info = StepInfo(*(np.mean([p[i] for p in parts], axis=0) for i in range(6)))
        return avg, tuple(new_state), info


def _trace(p: np.ndarray | None, infos: Sequence[StepInfo]) -> AlignmentTrace:
    tr = AlignmentTrace(p)
    for i in infos:
        tr.beta.append(i.beta)
        tr.w.append(i.w)
        tr.alpha.append(i.alpha)
        tr.z.append(i.z)
        tr.s.append(i.s)
        tr.c.append(i.c)
    return tr


@dataclass
class DecodeResult:
    tokens: list[int]
    words: list[str]
    logprob: float
    trace: AlignmentTrace
    truncated: bool
    candidates: list[Hypothesis] = field(default_factory=list, repr=False)


def _as_models(models) -> list[Model]:
    return [models] if isinstance(models, Model) else list(models)


def _result(h: Hypothesis, p, vocab: Vocabulary, candidates=()) -> DecodeResult:
    content = list(h.content)
    return DecodeResult(content, vocab.decode(content, strip=False), h.logprob, _trace(p, h.infos), not h.finished, list(candidates))


def greedy_decode(features: np.ndarray, models, cfg: DecodeConfig) -> DecodeResult:
    scorer = EnsembleScorer(_as_models(models))
    st = scorer.start(features)
    h = greedy_search(scorer.step, st, cfg.max_length)
    return _result(h, scorer.preselection(st), scorer.vocab)


def beam_decode(features: np.ndarray, models, width: int, cfg: DecodeConfig) -> list[Hypothesis]:
    scorer = EnsembleScorer(_as_models(models))
    return beam_search(scorer.step, scorer.start(features), width, cfg.max_length)


# ------------------------------------------------------------- k-NN filter


def database_vector(features: np.ndarray) -> np.ndarray:
    return np.asarray(features, dtype=np.float64).mean(axis=0)


class NeighborIndex:
    """Training databases (mean record vectors) with their descriptions."""

    def __init__(self, vectors: np.ndarray, descriptions: Sequence[Sequence[str]]):
        if len(vectors) == 0:
            raise ValueError("empty training corpus")
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.descriptions = [list(d) for d in descriptions]
        norms = np.linalg.norm(self.vectors, axis=1)
        self._unit = np.divide(self.vectors, norms[:, None], out=np.zeros_like(self.vectors), where=norms[:, None] > 0)

    @classmethod
    def from_corpus(cls, corpus: Sequence[Scenario], spec: FeatureSpec) -> NeighborIndex:
        vecs = [database_vector(featurize_scenario(s, spec)) for s in corpus]
        return cls(np.stack(vecs) if vecs else np.zeros((0, spec.width)), [s.tokens for s in corpus])

    def nearest(self, vector: np.ndarray, k: int) -> list[int]:
        """Indices of the ``k`` most cosine-similar databases; ties go to the lower index."""
        norm = np.linalg.norm(vector)
        if norm == 0:
            raise ValueError("zero-norm database vector")
        sims = self._unit @ (vector / norm)
        order = np.lexsort((np.arange(len(sims)), -sims))
        return [int(i) for i in order[:k]]


def knn_beam_filter(
    features: np.ndarray, candidates: Sequence[Hypothesis], index: NeighborIndex, k: int, vocab: Vocabulary
) -> Hypothesis:
    """Pick the candidate with the best BLEU against the descriptions of the k nearest training databases."""
    if not candidates:
        raise ValueError("no candidates")
    if len(candidates) == 1:
        return candidates[0]
    try:
        neighbors = index.nearest(database_vector(features), k)
    except ValueError:
        log.warning("zero-norm database vector; falling back to the highest log-probability candidate")
        return max(candidates, key=lambda h: h.logprob)
    refs = [index.descriptions[i] for i in neighbors]
    best, best_key = None, None
    for h in candidates:
        words = vocab.decode(h.content, strip=False)
        key = (sbleu([words], [refs]).score, h.logprob)
        if best_key is None or key > best_key:
            best, best_key = h, key
    return best


# ------------------------------------------------------------ entry points


def selected_records(trace: AlignmentTrace) -> set[int]:
    """Record with the largest refined weight at each step; ties go to the lowest index."""
    if len(trace) == 0:
        raise ValueError("empty alignment trace")
    return {int(np.argmax(a)) for a in trace.alpha}


def decode(features: np.ndarray, models, cfg: DecodeConfig, index: NeighborIndex | None = None) -> DecodeResult:
    models = _as_models(models)
    if cfg.mode == "greedy":
        return greedy_decode(features, models, cfg)
    scorer = EnsembleScorer(models)
    st = scorer.start(features)
    beam = beam_search(scorer.step, st, cfg.beam_width, cfg.max_length)
    if cfg.mode == "beam":
        chosen = beam[0]
    else:
        if index is None:
            raise ValueError("knn decoding needs a training-corpus neighbor index")
        chosen = knn_beam_filter(features, beam, index, cfg.neighbors, scorer.vocab)
    return _result(chosen, scorer.preselection(st), scorer.vocab, beam)


def decode_scenario(scenario: Scenario, models, cfg: DecodeConfig, index: NeighborIndex | None = None) -> DecodeResult:
    models = _as_models(models)
    return decode(featurize_scenario(scenario, models[0].feature_spec), models, cfg, index)


def conditional_decode(
    scenario: Scenario, subset: Sequence[int], models, cfg: DecodeConfig, index: NeighborIndex | None = None
) -> DecodeResult:
    """Decode from a record subset (dataset order kept); trace columns follow the subset."""
    if not subset:
        raise ValueError("empty record subset")
    return decode_scenario(scenario.subset(subset), models, cfg, index)


def _decode_one(args):
    scenario, models, cfg, index, gold = args
    if gold:
        if scenario.gold_selection is None:
            raise ValueError("gold selection unavailable for a scenario")
        return conditional_decode(scenario, sorted(scenario.gold_selection), models, cfg, index)
    return decode_scenario(scenario, models, cfg, index)


def decode_corpus(
    models,
    scenarios: Sequence[Scenario],
    cfg: DecodeConfig,
    index: NeighborIndex | None = None,
    gold_selection: bool = False,
    workers: int = 1,
) -> list[DecodeResult]:
    """Decode every scenario; output order always matches input order."""
    models = _as_models(models)
    jobs = [(s, models, cfg, index, gold_selection) for s in scenarios]
    if workers <= 1 or len(jobs) < 2:
        return [_decode_one(j) for j in jobs]
    from multiprocessing import get_context

    with get_context("spawn").Pool(workers) as pool:
        return pool.map(_decode_one, jobs)

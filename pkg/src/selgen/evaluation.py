"""Corpus BLEU (exact and numerically lenient), selection F-1, embedding
neighbors, and alignment heat-map export.

BLEU here is classic corpus-level BLEU-4: n-gram matches and candidate
n-gram totals are pooled over the corpus, no smoothing, and a brevity
penalty against the closest reference length (shorter on ties).  Any order
with zero matches, or with no candidate n-grams at all, makes the score 0.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Vocabulary

log = logging.getLogger(__name__)

MAX_ORDER = 4


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    matches: list[int]
    totals: list[int]
    brevity_penalty: float
    candidate_length: int
    reference_length: int


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def _normalize_refs(references) -> list[list[list[str]]]:
    """Accept one reference per candidate or a list of references per candidate."""
    out = []
    for item in references:
        item = list(item)
        if item and isinstance(item[0], str):
            out.append([item])
        else:
            out.append([list(r) for r in item])
    return out


def _closest_ref_len(c: int, ref_lens: list[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def _report(matches, totals, c_len, r_len) -> BleuReport:
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if c_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(score, precisions, list(matches), list(totals), bp, c_len, r_len)


def _check_inputs(candidates, references) -> list[list[list[str]]]:
    if len(candidates) == 0:
        raise ValueError("empty candidate list")
    refs = _normalize_refs(references)
    if len(refs) != len(candidates):
        raise ValueError(f"{len(candidates)} candidates but {len(refs)} reference entries")
    if any(not r for r in refs):
        raise ValueError("candidate without references")
    return refs


def sbleu(candidates: Sequence[Sequence[str]], references) -> BleuReport:
    """Standard corpus BLEU-4 with clipped counts (max count over references)."""
    refs = _check_inputs(candidates, references)
    matches, totals = [0] * MAX_ORDER, [0] * MAX_ORDER
    c_len = r_len = 0
    for cand, rs in zip(candidates, refs):
        cand = list(cand)
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), [len(r) for r in rs])
        for n in range(1, MAX_ORDER + 1):
            cc = Counter(_ngrams(cand, n))
            best: Counter = Counter()
            for r in rs:
                best |= Counter(_ngrams(r, n))
            matches[n - 1] += sum(min(c, best[g]) for g, c in cc.items())
            totals[n - 1] += max(0, len(cand) - n + 1)
    return _report(matches, totals, c_len, r_len)


def _as_int(tok: str) -> int | None:
    s = tok[1:] if tok[:1] in "+-" else tok
    if s.isdigit() and s.isascii():
        return int(tok)
    return None


def token_match(a: str, b: str, slack: int) -> bool:
    if a == b:
        return True
    if slack <= 0:
        return False
    x, y = _as_int(a), _as_int(b)
    return x is not None and y is not None and abs(x - y) <= slack


def _greedy_matches(cand_ngrams, ref_ngrams, slack: int) -> list[bool]:
    """Left-to-right matching; each reference n-gram can be consumed once."""
    used = [False] * len(ref_ngrams)
    flags = []
    for g in cand_ngrams:
        hit = False
        for i, r in enumerate(ref_ngrams):
            if not used[i] and all(token_match(a, b, slack) for a, b in zip(g, r)):
                used[i] = True
                hit = True
                break
        flags.append(hit)
    return flags


def cbleu(candidates: Sequence[Sequence[str]], references, slack: int = 5) -> BleuReport:
    """BLEU-4 where integer tokens within ``slack`` of each other count as equal.

    Matching is positional within an n-gram.  With several references, each
    distinct candidate n-gram is credited with its best per-reference match
    count, which reduces to the usual clipping when ``slack == 0``.
    """
    refs = _check_inputs(candidates, references)
    matches, totals = [0] * MAX_ORDER, [0] * MAX_ORDER
    c_len = r_len = 0
    for cand, rs in zip(candidates, refs):
        cand = list(cand)
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), [len(r) for r in rs])
        for n in range(1, MAX_ORDER + 1):
            cg = _ngrams(cand, n)
            best: Counter = Counter()
            for r in rs:
                per: Counter = Counter()
                for g, hit in zip(cg, _greedy_matches(cg, _ngrams(r, n), slack)):
                    if hit:
                        per[g] += 1
                best |= per
            matches[n - 1] += sum(best.values())
            totals[n - 1] += len(cg)
    return _report(matches, totals, c_len, r_len)


# ------------------------------------------------------------------ F-1


@dataclass
class SelectionReport:
    precision: float
    recall: float
    f1: float
    true_positives: int
    predicted: int
    gold: int
    per_scenario: list[tuple[int, int, int]] = field(default_factory=list)
    skipped: int = 0


def selection_f1(predicted: Sequence[set[int]], gold: Sequence[set[int] | None]) -> SelectionReport:
    """Micro-averaged precision, recall and F-1 of selected record sets."""
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predictions but {len(gold)} gold sets")
    tp = npred = ngold = skipped = 0
    rows = []
    for p, g in zip(predicted, gold):
        if g is None:
            skipped += 1
            continue
        p, g = set(p), set(g)
        hit = len(p & g)
        rows.append((hit, len(p), len(g)))
        tp, npred, ngold = tp + hit, npred + len(p), ngold + len(g)
    if skipped:
        log.warning("%d scenarios without gold selection excluded from F-1", skipped)
    prec = tp / npred if npred else 0.0
    rec = tp / ngold if ngold else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return SelectionReport(prec, rec, f1, tp, npred, ngold, rows, skipped)


# ---------------------------------------------------------- embeddings


def embedding_neighbors(E: np.ndarray, vocab: Vocabulary, word: str, k: int) -> list[tuple[str, float]]:
    """Nearest words by cosine similarity of embedding rows, excluding the query and reserved tokens."""
    if vocab.is_reserved(word):
        raise ValueError(f"reserved token {word!r}")
    if word not in vocab:
        raise KeyError(f"word {word!r} not in vocabulary")
    if k <= 0:
        return []
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] != len(vocab):
        raise ValueError(f"embedding matrix has shape {E.shape}, expected ({len(vocab)}, d)")
    norms = np.linalg.norm(E, axis=1)
    unit = np.divide(E, norms[:, None], out=np.zeros_like(E), where=norms[:, None] > 0)
    q = vocab.index[word]
    sims = unit @ unit[q]
    scored = [
        (float(sims[i]), w) for i, w in enumerate(vocab.words) if i != q and not vocab.is_reserved(w)
    ]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(w, s) for s, w in scored[:k]]


# ----------------------------------------------------- alignment export


def export_alignment(trace, tokens: Sequence[str], record_labels: Sequence[str], path: str | Path, svg: bool = False) -> None:
    """Write refined weights as a tab-separated matrix.

    Header: ``token`` then one column per record.  First data row is the
    pre-selection ``p`` (all ones for the basic aligner), then one row per
    generated token.  Values have 6 decimals.
    """
    alpha = np.asarray(trace.alpha)
    if alpha.ndim != 2 or alpha.shape != (len(tokens), len(record_labels)):
        raise ValueError(f"trace is {alpha.shape}, expected {(len(tokens), len(record_labels))}")
    p = trace.p if trace.p is not None else np.ones(len(record_labels))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["token", *record_labels])
        w.writerow(["<p>", *(f"{x:.6f}" for x in p)])
        for tok, row in zip(tokens, alpha):
            w.writerow([tok, *(f"{x:.6f}" for x in row)])
    if svg:
        render_svg(alpha, tokens, record_labels, Path(path).with_suffix(".svg"))


def read_alignment(path: str | Path) -> tuple[list[str], np.ndarray, list[str], np.ndarray]:
    """Inverse of :func:`export_alignment`: ``(labels, p, tokens, alpha)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    labels = rows[0][1:]
    p = np.array([float(x) for x in rows[1][1:]])
    tokens = [r[0] for r in rows[2:]]
    alpha = np.array([[float(x) for x in r[1:]] for r in rows[2:]]).reshape(len(tokens), len(labels))
    return labels, p, tokens, alpha


def render_svg(alpha: np.ndarray, tokens: Sequence[str], labels: Sequence[str], path: str | Path, cell: int = 18) -> None:
    """Grayscale grid, darker means more weight; records across, tokens down."""
    from xml.sax.saxutils import escape

    left, top = 90, 110
    width, height = left + cell * len(labels) + 10, top + cell * len(tokens) + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-size="11" font-family="monospace">']
    for j, lab in enumerate(labels):
        x = left + j * cell + cell // 2
        parts.append(f'<text transform="translate({x},{top - 6}) rotate(-60)">{escape(lab)}</text>')
    for t, tok in enumerate(tokens):
        y = top + t * cell
        parts.append(f'<text x="{left - 6}" y="{y + cell - 5}" text-anchor="end">{escape(tok)}</text>')
        for j in range(len(labels)):
            shade = int(round(255 * (1.0 - float(np.clip(alpha[t, j], 0.0, 1.0)))))
            parts.append(
                f'<rect x="{left + j * cell}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},{shade})" stroke="#ccc"/>'
            )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def evaluation_report(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    predicted: Sequence[set[int]] | None = None,
    gold: Sequence[set[int] | None] | None = None,
    metrics: Sequence[str] = ("sbleu", "cbleu", "f1"),
) -> dict:
    """The evaluation report object: ``{sbleu, cbleu, f1, precision, recall, n_scenarios, warnings}``."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} outputs but {len(references)} references")
    out: dict = {"n_scenarios": len(hypotheses), "warnings": []}
    if "sbleu" in metrics:
        out["sbleu"] = sbleu(hypotheses, references).score
    if "cbleu" in metrics:
        out["cbleu"] = cbleu(hypotheses, references).score
    if "f1" in metrics:
        if predicted is None or gold is None or all(g is None for g in gold):
            raise ValueError("gold selection unavailable")
        rep = selection_f1(predicted, gold)
        out.update(f1=rep.f1, precision=rep.precision, recall=rep.recall)
        if rep.skipped:
            out["warnings"].append(f"{rep.skipped} scenarios without gold selection excluded from F-1")
    return out

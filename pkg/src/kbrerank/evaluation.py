"""Word error rate, n-best reranking under each scorer, oracle WER, reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Sentence, Vocabulary
from .features import extract_features
from .kb import KBIndex
from .neural import RerankerParams, score_batch, stack_bundles
from .ngram import NGramModel, score_sentence

SCORERS = ("first-pass", "ngram", "lstm", "reranker", "reranker+lstm")


@dataclass(frozen=True)
class NBestList:
    utt_id: str
    reference: Sentence | None
    hypotheses: tuple  # of (Sentence, first_pass_score)

    def __post_init__(self):
        if len(self.hypotheses) == 0:
            raise ValueError("n-best list needs at least one hypothesis")


@dataclass
class UtteranceResult:
    utt_id: str
    chosen: int
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def wer(self) -> float:
        return (self.substitutions + self.deletions + self.insertions) / self.ref_words


@dataclass
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0
    per_utterance: list = field(default_factory=list)

    @property
    def wer(self) -> float:
        return (self.substitutions + self.deletions + self.insertions) / self.ref_words

    def add(self, result: UtteranceResult) -> None:
        self.substitutions += result.substitutions
        self.deletions += result.deletions
        self.insertions += result.insertions
        self.ref_words += result.ref_words
        self.per_utterance.append(result)


def _tokens(x) -> tuple:
    return x.tokens if isinstance(x, Sentence) else tuple(x)


def wer(reference, hypothesis):
    """Levenshtein alignment counts (S, D, I, N) with unit costs.

    Accepts sentences or raw token sequences; the hypothesis may be empty
    (every reference word is then a deletion). Ties between minimum-error
    alignments resolve toward fewer insertions, then fewer deletions, so the
    breakdown is deterministic.
    """
    ref, hyp = _tokens(reference), _tokens(hypothesis)
    if len(ref) == 0:
        raise ValueError("empty reference")
    # cells are (errors, insertions, deletions); lexicographic min
    prev = [(j, j, 0) for j in range(len(hyp) + 1)]
    for i in range(1, len(ref) + 1):
        cur = [(i, 0, i)]
        for j in range(1, len(hyp) + 1):
            e, ins, dele = prev[j - 1]
            best = (e + (ref[i - 1] != hyp[j - 1]), ins, dele)
            e, ins, dele = prev[j]
            cand = (e + 1, ins, dele + 1)
            if cand < best:
                best = cand
            e, ins, dele = cur[j - 1]
            cand = (e + 1, ins + 1, dele)
            if cand < best:
                best = cand
            cur.append(best)
        prev = cur
    errors, insertions, deletions = prev[len(hyp)]
    return errors - insertions - deletions, deletions, insertions, len(ref)


@dataclass
class RerankModels:
    """Whatever models the requested scorer mode needs."""

    ngram: NGramModel | None = None
    lstm: object = None  # anything with .sentence_logprob(Sentence)
    reranker: RerankerParams | None = None
    kb_index: KBIndex | None = None
    vocab: Vocabulary | None = None


def _require(models: RerankModels, scorer: str, *names):
    for name in names:
        if getattr(models, name) is None:
            raise ValueError(f"scorer {scorer!r} requires a loaded {name} model")


def reranker_scores(nbest: NBestList, models: RerankModels) -> np.ndarray:
    """Interpolated deep score u for every hypothesis."""
    sentences = [h for h, _ in nbest.hypotheses]
    bundles = [
        extract_features(s, score_sentence(models.ngram, s), models.kb_index)
        for s in sentences
    ]
    bins, feats = stack_bundles(bundles)
    lengths = {len(s) for s in sentences}
    if len(lengths) == 1:
        ids = np.array([models.vocab.encode(s.tokens) for s in sentences], dtype=np.intp)
        u, _ = score_batch(models.reranker, ids, bins, feats)
        return u
    out = np.empty(len(sentences))
    for i, s in enumerate(sentences):
        ids = np.array([models.vocab.encode(s.tokens)], dtype=np.intp)
        one_bins = {k: v[i : i + 1] for k, v in bins.items()}
        u, _ = score_batch(models.reranker, ids, one_bins, feats[i : i + 1])
        out[i] = u[0]
    return out


def component_scores(nbest: NBestList, scorer: str, models: RerankModels) -> dict:
    """Per-hypothesis score arrays for each component the mode interpolates."""
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}")
    comps = {"first_pass": np.array([fp for _, fp in nbest.hypotheses], dtype=float)}
    if scorer == "ngram":
        _require(models, scorer, "ngram")
        comps["ngram"] = np.array(
            [score_sentence(models.ngram, h) for h, _ in nbest.hypotheses]
        )
    if scorer in ("lstm", "reranker+lstm"):
        _require(models, scorer, "lstm")
        comps["lstm"] = np.array(
            [models.lstm.sentence_logprob(h) for h, _ in nbest.hypotheses]
        )
    if scorer in ("reranker", "reranker+lstm"):
        _require(models, scorer, "reranker", "ngram", "kb_index", "vocab")
        comps["reranker"] = reranker_scores(nbest, models)
    return comps


def combine(comps: dict, weights: dict) -> np.ndarray:
    total = comps["first_pass"].copy()
    for name, arr in comps.items():
        if name != "first_pass":
            total += weights.get(name, 0.0) * arr
    return total


def rerank(nbest: NBestList, scorer: str, weights: dict, models: RerankModels) -> int:
    """Index of the best-scoring hypothesis; ties keep first-pass order."""
    totals = combine(component_scores(nbest, scorer, models), weights)
    return int(np.argmax(totals))


def score_utterance(nbest: NBestList, chosen: int) -> UtteranceResult:
    s, d, i, n = wer(nbest.reference, nbest.hypotheses[chosen][0])
    return UtteranceResult(nbest.utt_id, chosen, s, d, i, n)


def evaluate(dataset, scorer: str, weights: dict, models: RerankModels) -> WerReport:
    report = WerReport()
    for nbest in dataset:
        if nbest.reference is None:
            raise ValueError("references required")
        report.add(score_utterance(nbest, rerank(nbest, scorer, weights, models)))
    return report


def oracle_wer(dataset) -> WerReport:
    """Pick the hypothesis with the fewest errors per utterance (ties: first)."""
    report = WerReport()
    for nbest in dataset:
        if nbest.reference is None:
            raise ValueError("references required")
        best = None
        best_idx = 0
        for idx, (hyp, _) in enumerate(nbest.hypotheses):
            s, d, i, n = wer(nbest.reference, hyp)
            if best is None or s + d + i < best[0] + best[1] + best[2]:
                best = (s, d, i, n)
                best_idx = idx
        report.add(UtteranceResult(nbest.utt_id, best_idx, *best))
    return report


def precompute_components(dataset, scorer: str, models: RerankModels) -> list[dict]:
    return [component_scores(nbest, scorer, models) for nbest in dataset]


def evaluate_precomputed(dataset, comps_per_utt, weights: dict) -> WerReport:
    report = WerReport()
    for nbest, comps in zip(dataset, comps_per_utt):
        chosen = int(np.argmax(combine(comps, weights)))
        report.add(score_utterance(nbest, chosen))
    return report


def tune_weights(dataset, scorer: str, models: RerankModels, grid) -> dict:
    """Grid-search interpolation weights by corpus WER; ties keep grid order.

    Zero weights are part of the grid, so a tuned mode can never do worse on
    the tuning data than the plain first pass.
    """
    names = {
        "first-pass": (),
        "ngram": ("ngram",),
        "lstm": ("lstm",),
        "reranker": ("reranker",),
        "reranker+lstm": ("reranker", "lstm"),
    }[scorer]
    if not names:
        return {}
    comps = precompute_components(dataset, scorer, models)
    best_weights = None
    best_wer = None
    def sweep(prefix: dict, remaining):
        nonlocal best_weights, best_wer
        if not remaining:
            w = evaluate_precomputed(dataset, comps, prefix).wer
            if best_wer is None or w < best_wer:
                best_wer, best_weights = w, dict(prefix)
            return
        for value in grid:
            prefix[remaining[0]] = value
            sweep(prefix, remaining[1:])
        del prefix[remaining[0]]

    sweep({}, names)
    return best_weights


def load_nbest(path) -> list[NBestList]:
    dataset = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                reference = (
                    Sentence(tuple(rec["reference"])) if rec.get("reference") else None
                )
                hyps = tuple(
                    (Sentence(tuple(h["tokens"])), float(h["first_pass_score"]))
                    for h in rec["hypotheses"]
                )
                dataset.append(NBestList(str(rec["id"]), reference, hyps))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"malformed n-best record at line {lineno}") from exc
    return dataset


def save_nbest(dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for nbest in dataset:
            rec = {
                "id": nbest.utt_id,
                "hypotheses": [
                    {"tokens": list(h.tokens), "first_pass_score": fp}
                    for h, fp in nbest.hypotheses
                ],
            }
            if nbest.reference is not None:
                rec["reference"] = list(nbest.reference.tokens)
            fh.write(json.dumps(rec) + "\n")


def write_utterance_csv(report: WerReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("utt_id,chosen,substitutions,deletions,insertions,ref_words,wer\n")
        for r in report.per_utterance:
            fh.write(
                f"{r.utt_id},{r.chosen},{r.substitutions},{r.deletions},"
                f"{r.insertions},{r.ref_words},{r.wer:.6f}\n"
            )


def summary_table(rows) -> str:
    """Human-readable WER summary; rows are (label, {column: WerReport})."""
    columns = []
    for _, reports in rows:
        for col in reports:
            if col not in columns:
                columns.append(col)
    width = max(len(label) for label, _ in rows) + 2
    lines = [" " * width + "".join(f"{c:>10}" for c in columns)]
    for label, reports in rows:
        cells = "".join(
            f"{100.0 * reports[c].wer:>10.2f}" if c in reports else f"{'-':>10}"
            for c in columns
        )
        lines.append(f"{label:<{width}}" + cells)
    return "\n".join(lines)

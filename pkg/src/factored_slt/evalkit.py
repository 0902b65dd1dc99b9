"""Beam-search decoding and corpus-level translation metrics.

Beam search keeps the top-`beam` continuations by accumulated log
probability at every step; continuations that emit eos retire to a pool and
release their slot only at the next expansion round. The final hypothesis is
the pool's best under length-normalized score (plain score / generated
length, switchable off). Width 1 therefore reduces exactly to greedy
decoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID, SignVideo, Vocabulary, detokenize

ScoreFn = Callable[[tuple[int, ...]], np.ndarray]
BatchScoreFn = Callable[[Sequence[tuple[int, ...]]], np.ndarray]


@dataclass(frozen=True)
class TranslationHypothesis:
    ids: tuple[int, ...]
    score: float
    finished: bool

    @property
    def generated_length(self) -> int:
        return max(len(self.ids) - 1, 1)

    def normalized_score(self) -> float:
        return self.score / self.generated_length


@dataclass
class EvalReport:
    bleu: dict[int, float]
    rouge_l: float
    n_samples: int
    split: str
    hypotheses: list[tuple[str, str, str]] = field(default_factory=list)
    checkpoint_hash: str | None = None

    def to_dict(self) -> dict:
        return {
            "bleu1": self.bleu[1],
            "bleu2": self.bleu[2],
            "bleu3": self.bleu[3],
            "bleu4": self.bleu[4],
            "rouge_l": self.rouge_l,
            "n_samples": self.n_samples,
            "split": self.split,
            "checkpoint_hash": self.checkpoint_hash,
        }


def beam_search(
    score_fn: ScoreFn | None,
    *,
    beam: int,
    max_len: int,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
    length_normalize: bool = True,
    batch_score_fn: BatchScoreFn | None = None,
) -> TranslationHypothesis:
    """Decode one sequence. score_fn maps a prefix (starting with bos) to a
    normalized log-probability vector over the vocabulary; batch_score_fn,
    when given, evaluates several prefixes of equal length in one call."""
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    if score_fn is None and batch_score_fn is None:
        raise ValueError("provide score_fn or batch_score_fn")
    if batch_score_fn is None:
        batch_score_fn = lambda prefixes: np.stack([score_fn(p) for p in prefixes])

    live: list[tuple[tuple[int, ...], float]] = [((bos_id,), 0.0)]
    pool: list[TranslationHypothesis] = []
    first_call = True
    while live and len(live[0][0]) < max_len:
        logprob_rows = np.asarray(batch_score_fn([ids for ids, _ in live]), dtype=np.float64)
        if first_call:
            total = np.logaddexp.reduce(logprob_rows[0])
            if not np.isclose(total, 0.0, atol=1e-4):
                raise ValueError(
                    f"score_fn must return normalized log-probs (logsumexp={total:.6f})"
                )
            first_call = False
        candidates: list[tuple[tuple[int, ...], float]] = []
        for (ids, score), row in zip(live, logprob_rows):
            for token, lp in enumerate(row):
                candidates.append((ids + (token,), score + float(lp)))
        candidates.sort(key=lambda c: -c[1])  # stable: ties keep expansion order
        live = []
        for ids, score in candidates[:beam]:
            if ids[-1] == eos_id:
                pool.append(TranslationHypothesis(ids=ids, score=score, finished=True))
            else:
                live.append((ids, score))
    for ids, score in live:  # length cap reached
        pool.append(TranslationHypothesis(ids=ids, score=score, finished=True))
    key = (
        (lambda h: h.normalized_score()) if length_normalize else (lambda h: h.score)
    )
    return max(pool, key=key)


# -- metrics -----------------------------------------------------------------


def _ngram_counts(tokens: Sequence[str], n: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(tokens) - n + 1):
        key = tuple(tokens[i : i + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


def bleu(
    hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4
) -> dict[int, float]:
    """Corpus-level BLEU-1..max_n: clipped modified n-gram precisions combined
    by a geometric mean, times the brevity penalty exp(min(0, 1 - ref/hyp)).
    No smoothing; any zero precision zeroes the corresponding score."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"hypothesis/reference count mismatch: {len(hypotheses)} vs {len(references)}"
        )
    if not hypotheses:
        raise ValueError("cannot score an empty corpus")
    clipped = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_tokens = hyp.split()
        ref_tokens = ref.split()
        hyp_len += len(hyp_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, max_n + 1):
            hyp_counts = _ngram_counts(hyp_tokens, n)
            ref_counts = _ngram_counts(ref_tokens, n)
            totals[n] += max(len(hyp_tokens) - n + 1, 0)
            clipped[n] += sum(
                min(c, ref_counts.get(g, 0)) for g, c in hyp_counts.items()
            )
    if hyp_len == 0:
        return {n: 0.0 for n in range(1, max_n + 1)}
    bp = 1.0 if hyp_len > ref_len else float(np.exp(1.0 - ref_len / hyp_len))
    precisions = [
        clipped[n] / totals[n] if totals[n] > 0 else 0.0 for n in range(1, max_n + 1)
    ]
    scores = {}
    for n in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:n]):
            scores[n] = 0.0
        else:
            log_mean = sum(np.log(p) for p in precisions[:n]) / n
            scores[n] = bp * float(np.exp(log_mean))
    return scores


def sentence_bleu(hypothesis: str, reference: str, max_n: int = 4) -> float:
    """Add-one smoothed single-sentence BLEU, for debugging only: corpus
    scores reported elsewhere are unsmoothed."""
    hyp_tokens = hypothesis.split()
    ref_tokens = reference.split()
    if not hyp_tokens:
        return 0.0
    log_mean = 0.0
    for n in range(1, max_n + 1):
        hyp_counts = _ngram_counts(hyp_tokens, n)
        ref_counts = _ngram_counts(ref_tokens, n)
        total = max(len(hyp_tokens) - n + 1, 0)
        clip = sum(min(c, ref_counts.get(g, 0)) for g, c in hyp_counts.items())
        log_mean += np.log((clip + 1.0) / (total + 1.0)) / max_n
    bp = 1.0 if len(hyp_tokens) > len(ref_tokens) else float(
        np.exp(1.0 - len(ref_tokens) / len(hyp_tokens))
    )
    return bp * float(np.exp(log_mean))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Mean over samples of the LCS F1: P = LCS/|hyp|, R = LCS/|ref|."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"hypothesis/reference count mismatch: {len(hypotheses)} vs {len(references)}"
        )
    if not hypotheses:
        raise ValueError("cannot score an empty corpus")
    total = 0.0
    for hyp, ref in zip(hypotheses, references):
        hyp_tokens = hyp.split()
        ref_tokens = ref.split()
        lcs = _lcs_length(hyp_tokens, ref_tokens)
        p = lcs / len(hyp_tokens) if hyp_tokens else 0.0
        r = lcs / len(ref_tokens) if ref_tokens else 0.0
        total += 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return total / len(hypotheses)


# -- model evaluation ---------------------------------------------------------


class DecodableModel(Protocol):
    def start_decode(self, video): ...

    def next_logprobs(self, state, prefixes: Sequence[Sequence[int]]) -> np.ndarray: ...


def evaluate_model(
    model: DecodableModel,
    samples: Sequence[SignVideo],
    vocab: Vocabulary,
    *,
    beam: int = 5,
    max_len: int = 32,
    length_normalize: bool = True,
    split: str = "test",
    max_samples: int | None = None,
    checkpoint_hash: str | None = None,
) -> EvalReport:
    """Beam-decode every sample and score the detokenized outputs. Purely
    deterministic given the model parameters and the sample list."""
    if max_samples is not None:
        samples = samples[:max_samples]
    if not samples:
        raise ValueError("no samples to evaluate")
    rows = []
    for sample in samples:
        state = model.start_decode(sample)

        def batch_score(prefixes, _state=state):
            return model.next_logprobs(_state, [tuple(p) for p in prefixes])

        hyp = beam_search(
            None,
            beam=beam,
            max_len=max_len,
            length_normalize=length_normalize,
            batch_score_fn=batch_score,
        )
        rows.append((sample.sample_id, detokenize(np.array(hyp.ids), vocab), sample.transcript))
    hyp_texts = [h for _, h, _ in rows]
    ref_texts = [r for _, _, r in rows]
    return EvalReport(
        bleu=bleu(hyp_texts, ref_texts),
        rouge_l=rouge_l(hyp_texts, ref_texts),
        n_samples=len(rows),
        split=split,
        hypotheses=rows,
        checkpoint_hash=checkpoint_hash,
    )


def write_report(report: EvalReport, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    with open(out_dir / "hypotheses.tsv", "w", encoding="utf-8") as fh:
        fh.write("sample_id\thypothesis\treference\n")
        for sample_id, hyp, ref in report.hypotheses:
            fh.write(f"{sample_id}\t{hyp}\t{ref}\n")
    return out_dir / "report.json"

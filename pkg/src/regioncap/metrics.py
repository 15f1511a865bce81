"""Caption evaluation: BLEU, ROUGE-L, CIDEr-D, exact-match METEOR, and
noun/verb phrase coverage (exact and fuzzy), plus distribution statistics.

All metrics tokenize by whitespace, so they are invariant to token-preserving
whitespace normalization.  Sentence-level functions return the metric's
natural scale (BLEU in [0,100], ROUGE/METEOR/coverage in [0,1], CIDEr-D per
sample in [0,10]); corpus reports multiply by 100 to match the usual tables.
"""
from __future__ import annotations

import math
import warnings
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import grammar

EMBED_DIM = 512


def _tokens(text):
    if isinstance(text, str):
        return text.split()
    return list(text)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu(candidate, references, n: int = 4) -> float:
    """Modified n-gram precision with clipping, geometric mean, brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError(f"bleu order must be in 1..4, got {n}")
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not cand:
        warnings.warn("empty candidate scored as BLEU 0")
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        counts = _ngrams(cand, k)
        if not counts:
            return 0.0
        max_ref = Counter()
        for r in refs:
            for gram, c in _ngrams(r, k).items():
                max_ref[gram] = max(max_ref[gram], c)
        clipped = sum(min(c, max_ref[gram]) for gram, c in counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / sum(counts.values()))
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_sum / n)


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs(a, b) -> int:
    dp = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = dp[j]
            dp[j] = prev + 1 if x == y else max(dp[j], dp[j - 1])
            prev = cur
    return dp[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    """LCS-based F-measure with recall weight beta."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs(cand, ref)
    if lcs == 0:
        return 0.0
    prec = lcs / len(cand)
    rec = lcs / len(ref)
    return (1 + beta ** 2) * rec * prec / (rec + beta ** 2 * prec)


# ---------------------------------------------------------------------------
# CIDEr-D


def _tfidf_vectors(tokens, df, log_ref_len, n):
    vecs, norms = [], []
    for k in range(1, n + 1):
        vec = {}
        sq = 0.0
        for gram, count in _ngrams(tokens, k).items():
            idf = log_ref_len - math.log(max(1.0, df[gram]))
            v = count * idf
            vec[gram] = v
            sq += v * v
        vecs.append(vec)
        norms.append(math.sqrt(sq))
    return vecs, norms


def cider_d(candidates, references, n: int = 4, sigma: float = 6.0) -> np.ndarray:
    """Per-sample CIDEr-D in [0, 10]: clipped TF-IDF n-gram cosine for
    n=1..4 with a Gaussian length penalty, averaged over n and scaled by 10.

    IDF is corpus-level document frequency over the reference sets, so the
    result is invariant to candidate order.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    refs = [[_tokens(r) for r in rs] for rs in references]
    if len(refs) < 2:
        warnings.warn("CIDEr-D over a single-document corpus: all IDF are zero")
    df = defaultdict(float)
    for rs in refs:
        grams = set()
        for r in rs:
            for k in range(1, n + 1):
                grams.update(_ngrams(r, k).keys())
        for gram in grams:
            df[gram] += 1.0
    log_ref_len = math.log(float(len(refs))) if refs else 0.0

    scores = np.zeros(len(candidates))
    for i, (cand_text, rs) in enumerate(zip(candidates, refs)):
        cand = _tokens(cand_text)
        cvecs, cnorms = _tfidf_vectors(cand, df, log_ref_len, n)
        per_n = np.zeros(n)
        for r in rs:
            rvecs, rnorms = _tfidf_vectors(r, df, log_ref_len, n)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma ** 2))
            for k in range(n):
                num = sum(min(v, rvecs[k].get(gram, 0.0)) * rvecs[k].get(gram, 0.0)
                          for gram, v in cvecs[k].items())
                denom = cnorms[k] * rnorms[k]
                if denom > 0:
                    per_n[k] += penalty * num / denom
        scores[i] = 10.0 * per_n.mean() / max(1, len(rs))
    return scores


# ---------------------------------------------------------------------------
# METEOR (exact-match stage only)


def _align(cand, ref):
    """Greedy leftmost exact alignment preferring chunk continuation."""
    used = [False] * len(ref)
    pairs = []
    prev_ref = None
    for ci, w in enumerate(cand):
        choice = None
        if prev_ref is not None and prev_ref + 1 < len(ref) \
                and not used[prev_ref + 1] and ref[prev_ref + 1] == w:
            choice = prev_ref + 1
        else:
            for ri, rw in enumerate(ref):
                if not used[ri] and rw == w:
                    choice = ri
                    break
        if choice is not None:
            used[choice] = True
            pairs.append((ci, choice))
            prev_ref = choice
        else:
            prev_ref = None
    return pairs


def meteor_exact(candidate, reference) -> float:
    """Unigram exact-match METEOR: recall-weighted harmonic mean (9:1) times
    one minus the fragmentation penalty 0.5 * (chunks / matches)^3."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    prec = m / len(cand)
    rec = m / len(ref)
    fmean = 10.0 * prec * rec / (rec + 9.0 * prec)
    chunks = 1
    for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
        if c1 != c0 + 1 or r1 != r0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# phrase coverage


def phrase_embed(phrase: str) -> np.ndarray:
    """L2-normalized character-trigram counts over a fixed hashed index."""
    vec = np.zeros(EMBED_DIM)
    if len(phrase) < 3:
        chars = phrase
        if chars:
            vec[zlib.crc32(chars.encode()) % EMBED_DIM] += 1.0
    for i in range(len(phrase) - 2):
        tri = phrase[i:i + 3]
        vec[zlib.crc32(tri.encode()) % EMBED_DIM] += 1.0
    norm = np.linalg.norm(vec)
    if norm == 0:
        warnings.warn("empty phrase embedded as the zero vector")
        return vec
    return vec / norm


def extract_phrases(text, pos: str) -> list:
    words = _tokens(text)
    if pos == "noun":
        return grammar.noun_phrases(words)
    if pos == "verb":
        return grammar.verb_phrases(words)
    raise ValueError(f"pos must be noun or verb, got {pos!r}")


def phrase_coverage_flagged(candidate, reference, pos: str = "noun",
                            mode: str = "exact"):
    """(score, vacuous) where vacuous marks the both-sets-empty case."""
    a = sorted(set(extract_phrases(candidate, pos)))
    b = sorted(set(extract_phrases(reference, pos)))
    if not a and not b:
        return 1.0, True
    if mode == "exact":
        inter = len(set(a) & set(b))
        union = len(set(a) | set(b))
        return inter / union, False
    if mode != "fuzzy":
        raise ValueError(f"mode must be exact or fuzzy, got {mode!r}")
    if not a or not b:
        return 0.0, False
    ea = np.stack([phrase_embed(p) for p in a])
    eb = np.stack([phrase_embed(p) for p in b])
    sims = ea @ eb.T
    soft = 0.0
    while sims.size and sims.max() > 0:
        i, j = np.unravel_index(np.argmax(sims), sims.shape)
        soft += sims[i, j]
        sims = np.delete(np.delete(sims, i, axis=0), j, axis=1)
    return soft / (len(a) + len(b) - soft), False


def phrase_coverage(candidate, reference, pos: str = "noun",
                    mode: str = "exact") -> float:
    return phrase_coverage_flagged(candidate, reference, pos, mode)[0]


# ---------------------------------------------------------------------------
# distribution statistics and corpus reports


@dataclass
class DistributionReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    skewness: float | None    # Fisher; None when variance is zero
    zero_fraction: float
    n: int


def distribution_report(scores, bins: int = 20) -> DistributionReport:
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("distribution_report needs at least one score")
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        hi = lo + 1.0
    counts, edges = np.histogram(scores, bins=bins, range=(lo, hi))
    m2 = scores.var()
    if m2 == 0.0:
        skew = None
    else:
        m3 = ((scores - scores.mean()) ** 3).mean()
        skew = m3 / m2 ** 1.5
    return DistributionReport(bin_edges=edges, counts=counts, skewness=skew,
                              zero_fraction=float((scores == 0).mean()),
                              n=scores.size)


@dataclass
class ScoreReport:
    per_sample: dict = field(default_factory=dict)    # metric -> list (x100 scale)
    means: dict = field(default_factory=dict)
    distributions: dict = field(default_factory=dict)
    vacuous: dict = field(default_factory=dict)       # coverage metric -> count


REPORT_METRICS = ("C", "M", "B@1", "B@2", "B@3", "B@4", "R",
                  "Noun", "Verb", "Noun(F)", "Verb(F)")


def score_corpus(candidates, references, bins: int = 20) -> ScoreReport:
    """Corpus report over (candidate, reference-list) pairs, x100 scales."""
    report = ScoreReport()
    per = {m: [] for m in REPORT_METRICS}
    vac = {"Noun": 0, "Verb": 0, "Noun(F)": 0, "Verb(F)": 0}
    cider_scores = cider_d(candidates, references)
    for i, (cand, refs) in enumerate(zip(candidates, references)):
        ref = refs[0]
        per["C"].append(100.0 * cider_scores[i])
        per["M"].append(100.0 * meteor_exact(cand, ref))
        for k in range(1, 5):
            per[f"B@{k}"].append(bleu(cand, refs, n=k))
        per["R"].append(100.0 * rouge_l(cand, ref))
        for name, pos, mode in (("Noun", "noun", "exact"), ("Verb", "verb", "exact"),
                                ("Noun(F)", "noun", "fuzzy"),
                                ("Verb(F)", "verb", "fuzzy")):
            score, vacuous = phrase_coverage_flagged(cand, ref, pos, mode)
            per[name].append(100.0 * score)
            vac[name] += int(vacuous)
    report.per_sample = per
    report.means = {m: float(np.mean(v)) for m, v in per.items()}
    report.distributions = {"C": distribution_report(per["C"], bins=bins)}
    report.vacuous = vac
    return report

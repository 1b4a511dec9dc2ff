"""ROUGE-N and ROUGE-L over pre-tokenized text.

Used for evaluation, greedy label matching and RL rewards. Counting follows
the standard definitions: clipped multiset n-gram overlap for ROUGE-N and
longest-common-subsequence ratios for ROUGE-L. No stemming or stopword
removal; tokens are compared verbatim.
"""

from collections import Counter
from dataclasses import dataclass


@dataclass(frozen=True)
class RougeScore:
    recall: float
    precision: float
    f1: float
    degenerate: bool = False  # an operand was too short/empty to score

    def __post_init__(self):
        for v in (self.recall, self.precision, self.f1):
            if not 0.0 <= v <= 1.0:
                raise ValueError("rouge components must lie in [0, 1]")


def _f1(recall, precision):
    if recall + precision == 0.0:
        return 0.0
    return 2.0 * recall * precision / (recall + precision)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n=1):
    """Clipped n-gram overlap score between two token lists."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand_counts = _ngrams(candidate, n)
    ref_counts = _ngrams(reference, n)
    if not ref_counts or not cand_counts:
        return RougeScore(0.0, 0.0, 0.0, degenerate=True)
    overlap = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
    recall = overlap / sum(ref_counts.values())
    precision = overlap / sum(cand_counts.values())
    return RougeScore(recall, precision, _f1(recall, precision))


def lcs_length(a, b):
    """Length of the longest common subsequence of two token lists."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference):
    """LCS-based score between two token lists."""
    if not candidate or not reference:
        return RougeScore(0.0, 0.0, 0.0, degenerate=True)
    lcs = lcs_length(candidate, reference)
    recall = lcs / len(reference)
    precision = lcs / len(candidate)
    return RougeScore(recall, precision, _f1(recall, precision))


def r1_recall(candidate, reference):
    """Unigram recall of candidate against reference (the RL reward metric)."""
    return rouge_n(candidate, reference, 1).recall

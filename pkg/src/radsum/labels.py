"""Heuristic supervision for the extractors.

Builds (a) a greedy one-to-one match between impressions and findings
sentences, (b) keyword occurrence indices over the flattened findings, and
(c) the interleaved (switch, sentence, word) label tuples that drive joint
extractor pretraining. Keywords come either from an external phrase file or
from a simple frequency/association stand-in scorer.
"""

import json
from collections import Counter
from dataclasses import dataclass, field

from .rouge import rouge_l

END_SWITCH = 0  # the terminal tuple is a sentence-level step


@dataclass
class SentenceMatch:
    indices: list  # findings sentence index per impressions sentence, unique
    scores: list  # similarity score per matched pair


@dataclass
class KeywordSet:
    scores: dict  # phrase string -> quality score
    threshold: float = 0.0

    def phrases(self):
        """Retained phrases as token tuples, longest first."""
        kept = [p for p, s in self.scores.items() if s >= self.threshold]
        return sorted((tuple(p.split()) for p in kept), key=len, reverse=True)


@dataclass
class LabelStep:
    switch: int  # 1 = word step, 0 = sentence step
    sentence: int = None  # None when switch == 1
    word: int = None  # None when switch == 0


@dataclass
class InterleavedLabels:
    steps: list = field(default_factory=list)
    end_index: int = 0  # sentence-level END action index (= sentence count)

    def __len__(self):
        return len(self.steps)

    def sentence_indices(self):
        """Matched sentence order, END step excluded."""
        return [s.sentence for s in self.steps[:-1] if s.switch == 0]

    def word_indices(self):
        return [s.word for s in self.steps if s.switch == 1]


def _similarity(candidate, reference, mode):
    score = rouge_l(candidate, reference)
    return score.recall if mode == "recall" else score.f1


def greedy_match(findings, impressions, mode="f1"):
    """Match each impressions sentence to a distinct findings sentence.

    Impressions sentences are processed in order; each takes the unmatched
    findings sentence with the highest ROUGE-L score (smallest index on
    ties) and removes it from the pool.
    """
    if not findings or not impressions:
        raise ValueError("greedy_match needs nonempty sentence lists")
    available = list(range(len(findings)))
    indices, scores = [], []
    for imp in impressions:
        if not available:
            break
        best_idx, best_score = None, -1.0
        for f_idx in available:
            score = _similarity(findings[f_idx], imp, mode)
            if score > best_score:
                best_idx, best_score = f_idx, score
        indices.append(best_idx)
        scores.append(best_score)
        available.remove(best_idx)
    return SentenceMatch(indices, scores)


def compile_keyword_indices(report, keywords):
    """Flat findings positions covered by keyword occurrences.

    Multi-token phrases contribute one index per constituent token; output
    is strictly increasing and independent of phrase ordering.
    """
    tokens = report.flat_findings_tokens
    phrases = keywords.phrases() if isinstance(keywords, KeywordSet) else keywords
    covered = set()
    for phrase in phrases:
        k = len(phrase)
        if k == 0:
            continue
        for i in range(len(tokens) - k + 1):
            if tuple(tokens[i:i + k]) == tuple(phrase):
                covered.update(range(i, i + k))
    return sorted(covered)


def score_keywords(corpus, threshold=0.4, doc_freq_cap=0.5, max_ngram=3):
    """Stand-in phrase quality scorer over findings 1..3-grams.

    Score = association * (1 - 1/count): singleton phrases score 0, and the
    association term (phrase count over its rarest constituent's count)
    penalizes incidental multi-token combinations. Phrases appearing in more
    than `doc_freq_cap` of the reports are dropped as too frequent.
    """
    if not corpus:
        raise ValueError("cannot score keywords on an empty corpus")
    counts = Counter()
    doc_freq = Counter()
    unigram = Counter()
    for report in corpus:
        tokens = report.flat_findings_tokens
        unigram.update(tokens)
        seen = set()
        for n in range(1, max_ngram + 1):
            for i in range(len(tokens) - n + 1):
                gram = tuple(tokens[i:i + n])
                counts[gram] += 1
                seen.add(gram)
        doc_freq.update(seen)
    n_docs = len(corpus)
    scores = {}
    for gram, count in counts.items():
        if doc_freq[gram] / n_docs > doc_freq_cap:
            continue
        assoc = count / max(unigram[t] for t in gram)
        scores[" ".join(gram)] = assoc * (1.0 - 1.0 / count)
    return KeywordSet(scores=scores, threshold=threshold)


def interleave(match, keyword_indices, report):
    """Merge matched sentence indices and keyword word indices into one
    label sequence.

    For each matched sentence, the keyword indices falling inside it are
    emitted first (increasing), then the sentence index itself; keywords in
    unmatched sentences are dropped. A terminal END sentence step (index =
    sentence count) closes the sequence.
    """
    n = len(report.findings)
    flat = report.flat_findings
    m = len(flat)
    for w in keyword_indices:
        if not 0 <= w < m:
            raise ValueError(f"word index {w} out of range for report {report.id}")
    by_sentence = {}
    for w in keyword_indices:
        by_sentence.setdefault(flat[w][1], []).append(w)
    steps = []
    for s_idx in match.indices:
        if not 0 <= s_idx < n:
            raise ValueError(f"sentence index {s_idx} out of range for report {report.id}")
        for w in sorted(by_sentence.get(s_idx, [])):
            steps.append(LabelStep(switch=1, word=w))
        steps.append(LabelStep(switch=0, sentence=s_idx))
    steps.append(LabelStep(switch=END_SWITCH, sentence=n))
    return InterleavedLabels(steps=steps, end_index=n)


def build_labels(report, keywords, mode="f1"):
    """Full label construction for one report."""
    match = greedy_match(report.findings, report.impressions, mode=mode)
    keyword_indices = compile_keyword_indices(report, keywords)
    return interleave(match, keyword_indices, report)


# ---------------------------------------------------------------------------
# File formats

def write_keyword_file(keywords, path):
    with open(path, "w", encoding="utf-8") as f:
        for phrase, score in sorted(keywords.scores.items()):
            f.write(f"{phrase}\t{score}\n")


def read_keyword_file(path, threshold=0.0):
    scores = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            phrase, score = line.rstrip("\n").split("\t")
            scores[phrase] = float(score)
    return KeywordSet(scores=scores, threshold=threshold)


def write_labels_jsonl(labelled, path):
    """`labelled` is a list of (report_id, InterleavedLabels) pairs."""
    with open(path, "w", encoding="utf-8") as f:
        for report_id, labels in labelled:
            rows = [[s.switch,
                     -1 if s.sentence is None else s.sentence,
                     -1 if s.word is None else s.word] for s in labels.steps]
            f.write(json.dumps({"id": report_id, "labels": rows}) + "\n")


def read_labels_jsonl(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            steps = [LabelStep(switch=yq,
                               sentence=None if ys < 0 else ys,
                               word=None if yw < 0 else yw)
                     for yq, ys, yw in obj["labels"]]
            end_index = steps[-1].sentence if steps else 0
            out[obj["id"]] = InterleavedLabels(steps=steps, end_index=end_index)
    return out

"""Corpus ingestion, filtering, normalization and synthetic data generation.

A report has a findings section (the summarization source) and an impressions
section (the target). Raw reports are filtered by simple sanity rules, then
normalized into tokenized sentences with number/date placeholders. A seeded
synthetic generator plants salient sentences and keywords so the whole
pipeline can be trained and verified at desk scale.
"""

import json
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field

MAX_REPORT_WORDS = 800
MAX_REPORT_SENTENCES = 60
VOCAB_CAP = 50000

PAD, UNK, START, END = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, START, END)

NUM_TOKEN = "<num>"
DATE_TOKEN = "<date>"


@dataclass(frozen=True)
class RawReport:
    id: str
    findings_text: str
    impressions_text: str


@dataclass
class Report:
    id: str
    findings: list  # list of sentences, each a list of token strings
    impressions: list  # same shape

    @property
    def flat_findings(self):
        """Findings tokens flattened, as (token, sentence_index, position)."""
        flat = []
        for s_idx, sent in enumerate(self.findings):
            for w_idx, tok in enumerate(sent):
                flat.append((tok, s_idx, w_idx))
        return flat

    @property
    def flat_findings_tokens(self):
        return [tok for sent in self.findings for tok in sent]

    @property
    def flat_impressions_tokens(self):
        return [tok for sent in self.impressions for tok in sent]


@dataclass
class SyntheticAnnotation:
    id: str
    salient_sentences: list  # findings sentence indices, 0-based
    salient_words: list  # flat findings word indices, 0-based


@dataclass
class RejectionLog:
    rejected: list = field(default_factory=list)  # (id, rule) pairs
    errors: list = field(default_factory=list)  # (record repr, message)

    def add(self, report_id, rule):
        self.rejected.append((report_id, rule))


# ---------------------------------------------------------------------------
# Normalization

_SENT_SPLIT = re.compile(r"(?<=[.?!])\s+")
_TOKEN = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)?|\d[\d./:-]*\d|\d|[^\w\s]")
_DATE = re.compile(r"^\d+([/-])\d+(\1\d+)?$")
_NUM = re.compile(r"^\d+([.:]\d+)*$")


def split_sentences(text):
    return [s for s in _SENT_SPLIT.split(text.strip()) if s.strip()]


def tokenize_sentence(sentence, lemmatizer=None):
    """Tokenize one sentence: lowercase, number/date placeholders.

    `lemmatizer` is an optional token -> token callable applied after the
    placeholder substitution (identity by default).
    """
    tokens = []
    for raw in _TOKEN.findall(sentence):
        if _DATE.match(raw):
            tok = DATE_TOKEN
        elif _NUM.match(raw):
            tok = NUM_TOKEN
        else:
            tok = raw.lower()
        if lemmatizer is not None:
            tok = lemmatizer(tok)
        if tok:
            tokens.append(tok)
    return tokens


def _truncate(sentences, max_sentences, max_words):
    sentences = sentences[:max_sentences]
    out, used = [], 0
    for sent in sentences:
        if used + len(sent) <= max_words:
            out.append(sent)
            used += len(sent)
        else:
            head = sent[: max_words - used]
            if head:
                out.append(head)
            break
    return out


def normalize(raw, lemmatizer=None, max_words=MAX_REPORT_WORDS,
              max_sentences=MAX_REPORT_SENTENCES):
    """Turn a RawReport into a tokenized Report.

    Sentences are split on terminal punctuation, tokenized and lowercased;
    the sentence/word caps are applied afterwards, cutting inside the
    boundary sentence so the flat token list stays the exact concatenation
    of the sentence list.
    """
    findings = [tokenize_sentence(s, lemmatizer) for s in split_sentences(raw.findings_text)]
    impressions = [tokenize_sentence(s, lemmatizer) for s in split_sentences(raw.impressions_text)]
    findings = _truncate([s for s in findings if s], max_sentences, max_words)
    impressions = _truncate([s for s in impressions if s], max_sentences, max_words)
    return Report(id=raw.id, findings=findings, impressions=impressions)


# ---------------------------------------------------------------------------
# Filtering

@dataclass(frozen=True)
class FilterRules:
    min_findings_words: int = 3


def _word_count(text):
    return len(text.split())


def ingest_and_filter(records, rules=FilterRules()):
    """Filter raw records into RawReports.

    Rejection rules: (a) findings or impressions missing/empty, (b) findings
    shorter than the word floor, (c) findings has fewer words or fewer
    sentences than impressions. Malformed records (no id) are logged and the
    stream continues.
    """
    accepted, log = [], RejectionLog()
    for rec in records:
        rid = rec.get("id") if isinstance(rec, dict) else None
        if not rid:
            log.errors.append((repr(rec)[:200], "missing id"))
            continue
        findings = rec.get("findings", "") or ""
        impressions = rec.get("impressions", "") or ""
        if not findings.strip() or not impressions.strip():
            log.add(rid, "a")
            continue
        if _word_count(findings) < rules.min_findings_words:
            log.add(rid, "b")
            continue
        if (_word_count(findings) < _word_count(impressions)
                or len(split_sentences(findings)) < len(split_sentences(impressions))):
            log.add(rid, "c")
            continue
        accepted.append(RawReport(rid, findings, impressions))
    return accepted, log


# ---------------------------------------------------------------------------
# Vocabulary

class Vocabulary:
    """Token <-> index map with reserved pad/unk/start/end entries."""

    def __init__(self, tokens):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @property
    def pad(self):
        return self.stoi[PAD]

    @property
    def unk(self):
        return self.stoi[UNK]

    @property
    def start(self):
        return self.stoi[START]

    @property
    def end(self):
        return self.stoi[END]

    def index(self, token):
        return self.stoi.get(token, self.stoi[UNK])

    def token(self, index):
        return self.itos[index]


def build_vocabulary(corpus, cap=VOCAB_CAP):
    """Most frequent tokens across findings and impressions, tie-broken
    lexicographically."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    counts = Counter()
    for report in corpus:
        counts.update(report.flat_findings_tokens)
        counts.update(report.flat_impressions_tokens)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ranked[:cap]])


# ---------------------------------------------------------------------------
# Statistics

STAT_ROWS = ("#w per sentence", "#s per report", "#w per report")


def _mean_std(values):
    vals = list(values)
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    return mean, math.sqrt(var)


def corpus_stats(corpus):
    """Population mean/std of words-per-sentence, sentences-per-report and
    words-per-report, split by section."""
    if not corpus:
        raise ValueError("cannot compute stats on an empty corpus")
    stats = {}
    for section in ("findings", "impressions"):
        sents = [s for r in corpus for s in getattr(r, section)]
        per_sentence = [len(s) for s in sents] or [0]
        per_report_s = [len(getattr(r, section)) for r in corpus]
        per_report_w = [sum(len(s) for s in getattr(r, section)) for r in corpus]
        for row, values in zip(STAT_ROWS, (per_sentence, per_report_s, per_report_w)):
            mean, std = _mean_std(values)
            stats.setdefault(row, {})[section] = {"mean": mean, "std": std}
    return stats


def format_stats_table(stats):
    lines = [f"{'':16s} {'findings':>22s} {'impressions':>22s}"]
    for row in STAT_ROWS:
        cells = []
        for section in ("findings", "impressions"):
            cell = stats[row][section]
            cells.append(f"{cell['mean']:10.2f} ({cell['std']:6.2f})")
        lines.append(f"{row:16s} {cells[0]:>22s} {cells[1]:>22s}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Synthetic corpus

@dataclass(frozen=True)
class SyntheticSpec:
    n_reports: int = 200
    sentence_range: tuple = (4, 8)
    words_range: tuple = (4, 7)
    n_salient: int = 2
    keywords_per_salient: int = 2
    n_fillers: int = 60
    n_concepts: int = 12
    dropout: float = 0.1
    synonym_prob: float = 0.2

    def filler_vocab(self):
        return [f"w{i:03d}" for i in range(self.n_fillers)]

    def concept_vocab(self):
        return [f"k{i:03d}" for i in range(self.n_concepts)]

    def synonym_table(self):
        # fixed filler -> synonym-token table used when noising impressions
        return {f"w{i:03d}": f"s{i:03d}" for i in range(self.n_fillers)}


def generate_synthetic_corpus(spec, seed):
    """Seeded corpus with planted salient sentences and keywords.

    Impressions are noisy paraphrases (token dropout + synonym swap) of the
    planted salient findings sentences; annotations record the planted
    sentence indices and the flat word indices of planted concept tokens.
    """
    if spec.n_salient > spec.sentence_range[0]:
        raise ValueError("salient sentence count exceeds the sentence range")
    rng = random.Random(seed)
    fillers = spec.filler_vocab()
    concepts = spec.concept_vocab()
    synonyms = spec.synonym_table()
    reports, annotations = [], []
    for r in range(spec.n_reports):
        n_sent = rng.randint(*spec.sentence_range)
        salient = sorted(rng.sample(range(n_sent), spec.n_salient))
        sentences = []
        for s in range(n_sent):
            length = rng.randint(*spec.words_range)
            sent = [rng.choice(fillers) for _ in range(length)]
            if s in salient:
                picks = rng.sample(concepts, spec.keywords_per_salient)
                for concept in picks:
                    sent.insert(rng.randrange(len(sent) + 1), concept)
            sent.append(".")
            sentences.append(sent)
        impressions = []
        for s in salient:
            noisy = []
            for tok in sentences[s]:
                if tok in synonyms:
                    if rng.random() < spec.dropout:
                        continue
                    if rng.random() < spec.synonym_prob:
                        tok = synonyms[tok]
                noisy.append(tok)
            if not noisy:
                noisy = [sentences[s][0]]
            impressions.append(noisy)
        report = Report(id=f"syn-{r:04d}", findings=sentences, impressions=impressions)
        flat = report.flat_findings_tokens
        salient_words = [i for i, tok in enumerate(flat) if tok in concepts]
        reports.append(report)
        annotations.append(SyntheticAnnotation(report.id, salient, salient_words))
    return reports, annotations


# ---------------------------------------------------------------------------
# JSONL I/O

def read_raw_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_reports_jsonl(reports, path):
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(
                {"id": r.id, "findings": r.findings, "impressions": r.impressions},
                ensure_ascii=False) + "\n")


def read_reports_jsonl(path):
    reports = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            reports.append(Report(obj["id"], obj["findings"], obj["impressions"]))
    return reports


def write_annotations_jsonl(annotations, path):
    with open(path, "w", encoding="utf-8") as f:
        for a in annotations:
            f.write(json.dumps({"id": a.id, "salient_sentences": a.salient_sentences,
                                "salient_words": a.salient_words}) + "\n")


def read_annotations_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            out.append(SyntheticAnnotation(obj["id"], obj["salient_sentences"],
                                           obj["salient_words"]))
    return out

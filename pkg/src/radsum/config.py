"""Run configuration: defaults, file parsing, overrides and hashing.

Configs are flat dotted keys (`section.key`). Files use INI-style sections;
`--override section.key=value` flags patch individual entries. Hyperparameter
defaults are the published run configuration; the hash over all non-path
entries chains checkpoints so no stage runs against stale upstream settings.
"""

import configparser
import hashlib
import io
import json

DEFAULTS = {
    # corpus handling
    "data.max_words": 800,
    "data.max_sentences": 60,
    "data.vocab_cap": 50000,
    "data.min_findings_words": 3,
    # model sizes
    "model.emb_dim": 128,
    "model.pos_dim": 128,
    "model.max_pos": 100,
    "model.hidden": 256,
    "model.conv_filters": 100,
    "model.conv_windows": "3,4,5",
    # extractor / abstractor pretraining
    "train.lr_pretrain": 0.001,
    "train.clip_norm": 1.5,
    "train.batch_size": 8,
    "train.max_epochs": 30,
    "train.patience": 3,
    "train.abstractor_epochs": 10,
    # reinforcement learning
    "rl.lr": 0.0001,
    "rl.gamma": 0.95,
    "rl.lambda": 0.1,
    "rl.updates": 500,
    "rl.batch_size": 4,
    # abstractor decoding
    "abstractor.beam": 5,
    "abstractor.max_len": 30,
    "abstractor.coverage_weight": 1.0,
    # labels
    "labels.keyword_threshold": 0.4,
    "labels.doc_freq_cap": 0.5,
    "labels.match_mode": "f1",
    # synthetic corpus
    "synth.n_reports": 250,
    "synth.sentence_range": "4,8",
    "synth.words_range": "4,7",
    "synth.n_salient": 2,
    "synth.keywords_per_salient": 2,
    "synth.n_fillers": 60,
    "synth.n_concepts": 12,
    "synth.dropout": 0.1,
    "synth.synonym_prob": 0.2,
    # splits
    "split.train": 0.8,
    "split.val": 0.1,
    "split.test": 0.1,
    # evaluation
    "eval.rouge_l_mode": "flat",
    # reproducibility
    "run.seed": 0,
    # artifact locations
    "paths.workdir": ".",
}


class RunConfig:
    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        if values:
            for key, value in values.items():
                self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise KeyError(f"unknown config key {key!r}")
        self.values[key] = type(DEFAULTS[key])(value) \
            if not isinstance(value, type(DEFAULTS[key])) else value

    def get(self, key):
        return self.values[key]

    def get_int_pair(self, key):
        a, b = (int(x) for x in str(self.values[key]).split(","))
        return (a, b)

    def get_int_tuple(self, key):
        return tuple(int(x) for x in str(self.values[key]).split(","))

    @classmethod
    def from_file(cls, path, overrides=None, seed=None):
        parser = configparser.ConfigParser()
        if path:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        config = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                config.set(f"{section}.{key}", value)
        for item in overrides or []:
            key, _, value = item.partition("=")
            if not value:
                raise ValueError(f"override {item!r} is not key=value")
            config.set(key.strip(), value.strip())
        if seed is not None:
            config.set("run.seed", seed)
        return config

    def to_file_text(self):
        sections = {}
        for key, value in sorted(self.values.items()):
            section, _, name = key.partition(".")
            sections.setdefault(section, []).append((name, value))
        out = io.StringIO()
        for section, items in sorted(sections.items()):
            out.write(f"[{section}]\n")
            for name, value in items:
                out.write(f"{name} = {value}\n")
            out.write("\n")
        return out.getvalue()

    def hash(self):
        """Hash over everything except artifact paths."""
        payload = {k: v for k, v in self.values.items()
                   if not k.startswith("paths.")}
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

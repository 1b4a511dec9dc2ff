"""Pipeline stages behind the CLI.

Each stage reads its declared inputs from the config workdir, writes its
artifact deterministically and refuses to run on missing inputs or on
checkpoints produced under a different config hash.
"""

import json
import os

from . import corpus as corpus_mod
from . import labels as labels_mod
from .abstractor import (AbstractorConfig, AbstractorModel, matched_pairs,
                         train_abstractor)
from .corpus import SyntheticSpec
from .dimac import AbstractedSentenceCache, CriticModel, train_dimac
from .extractor import ExtractorConfig, ExtractorModel, train_extractor_mle
from .nn import load_checkpoint, save_checkpoint, seed_everything, state_to_arrays
from .rouge import rouge_l, rouge_n


class PipelineError(Exception):
    pass


ARTIFACTS = {
    "corpus": "corpus.jsonl",
    "annotations": "annotations.jsonl",
    "keywords": "keywords.tsv",
    "labels": "labels.jsonl",
    "splits": "splits.json",
    "stats_json": "stats.json",
    "stats_txt": "stats.txt",
    "rejections": "rejections.log",
    "extractor_ckpt": "extractor.ckpt",
    "abstractor_ckpt": "abstractor.ckpt",
    "dimac_ckpt": "dimac.ckpt",
    "rl_log": "rl_log.jsonl",
    "predictions": "predictions.jsonl",
    "results_json": "results.json",
    "results_txt": "results.txt",
}


def artifact(config, name):
    return os.path.join(config.get("paths.workdir"), ARTIFACTS[name])


def require(config, *names):
    paths = []
    for name in names:
        path = artifact(config, name)
        if not os.path.exists(path):
            raise PipelineError(f"missing input artifact: {ARTIFACTS[name]} "
                                f"(run the upstream stage first)")
        paths.append(path)
    return paths if len(paths) > 1 else paths[0]


def check_chained_hash(config, meta, path):
    if meta.get("config_hash") != config.hash():
        raise PipelineError(
            f"config hash mismatch: {path} was built under "
            f"{meta.get('config_hash')}, current config is {config.hash()}")


# ---------------------------------------------------------------------------
# Data stages

def stage_synth(config):
    spec = SyntheticSpec(
        n_reports=config.get("synth.n_reports"),
        sentence_range=config.get_int_pair("synth.sentence_range"),
        words_range=config.get_int_pair("synth.words_range"),
        n_salient=config.get("synth.n_salient"),
        keywords_per_salient=config.get("synth.keywords_per_salient"),
        n_fillers=config.get("synth.n_fillers"),
        n_concepts=config.get("synth.n_concepts"),
        dropout=config.get("synth.dropout"),
        synonym_prob=config.get("synth.synonym_prob"))
    reports, annotations = corpus_mod.generate_synthetic_corpus(
        spec, config.get("run.seed"))
    os.makedirs(config.get("paths.workdir"), exist_ok=True)
    corpus_mod.write_reports_jsonl(reports, artifact(config, "corpus"))
    corpus_mod.write_annotations_jsonl(annotations, artifact(config, "annotations"))
    keyword_set = labels_mod.KeywordSet(
        scores={c: 1.0 for c in spec.concept_vocab()}, threshold=0.5)
    labels_mod.write_keyword_file(keyword_set, artifact(config, "keywords"))
    return {"reports": len(reports)}


def stage_prep(config, input_path):
    if not os.path.exists(input_path):
        raise PipelineError(f"missing input artifact: {input_path}")
    records = corpus_mod.read_raw_jsonl(input_path)
    accepted, log = corpus_mod.ingest_and_filter(
        records, corpus_mod.FilterRules(config.get("data.min_findings_words")))
    reports = [corpus_mod.normalize(r, max_words=config.get("data.max_words"),
                                    max_sentences=config.get("data.max_sentences"))
               for r in accepted]
    os.makedirs(config.get("paths.workdir"), exist_ok=True)
    corpus_mod.write_reports_jsonl(reports, artifact(config, "corpus"))
    with open(artifact(config, "rejections"), "w", encoding="utf-8") as f:
        for rid, rule in log.rejected:
            f.write(f"{rid}\trule-{rule}\n")
        for rec, msg in log.errors:
            f.write(f"?\terror\t{msg}\t{rec}\n")
    return {"accepted": len(reports), "rejected": len(log.rejected)}


def stage_stats(config):
    reports = corpus_mod.read_reports_jsonl(require(config, "corpus"))
    stats = corpus_mod.corpus_stats(reports)
    with open(artifact(config, "stats_json"), "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(artifact(config, "stats_txt"), "w", encoding="utf-8") as f:
        f.write(corpus_mod.format_stats_table(stats) + "\n")
    return stats


def split_corpus(reports, ratios, seed):
    """Seeded shuffle-then-partition into disjoint covering manifests."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    import random
    ids = [r.id for r in reports]
    random.Random(seed).shuffle(ids)
    n = len(ids)
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_val - n_test
    return {"train": sorted(ids[:n_train]),
            "val": sorted(ids[n_train:n_train + n_val]),
            "test": sorted(ids[n_train + n_val:])}


def stage_split(config):
    reports = corpus_mod.read_reports_jsonl(require(config, "corpus"))
    ratios = (config.get("split.train"), config.get("split.val"),
              config.get("split.test"))
    splits = split_corpus(reports, ratios, config.get("run.seed"))
    with open(artifact(config, "splits"), "w", encoding="utf-8") as f:
        json.dump(splits, f, indent=2, sort_keys=True)
        f.write("\n")
    return {k: len(v) for k, v in splits.items()}


def stage_labels(config):
    reports = corpus_mod.read_reports_jsonl(require(config, "corpus"))
    keywords_path = artifact(config, "keywords")
    if os.path.exists(keywords_path):
        keywords = labels_mod.read_keyword_file(
            keywords_path, threshold=config.get("labels.keyword_threshold"))
    else:
        keywords = labels_mod.score_keywords(
            reports, threshold=config.get("labels.keyword_threshold"),
            doc_freq_cap=config.get("labels.doc_freq_cap"))
        labels_mod.write_keyword_file(keywords, keywords_path)
    labelled = [(r.id, labels_mod.build_labels(
        r, keywords, mode=config.get("labels.match_mode"))) for r in reports]
    labels_mod.write_labels_jsonl(labelled, artifact(config, "labels"))
    return {"labelled": len(labelled)}


# ---------------------------------------------------------------------------
# Model stages

def _load_splits(config):
    with open(require(config, "splits"), encoding="utf-8") as f:
        return json.load(f)


def _partition(reports, splits):
    by_id = {r.id: r for r in reports}
    return ({k: [by_id[i] for i in ids if i in by_id] for k, ids in splits.items()},
            by_id)


def _extractor_config(config, vocab_size):
    return ExtractorConfig(
        vocab_size=vocab_size,
        emb_dim=config.get("model.emb_dim"),
        pos_dim=config.get("model.pos_dim"),
        max_pos=config.get("model.max_pos"),
        hidden=config.get("model.hidden"),
        conv_filters=config.get("model.conv_filters"),
        conv_windows=config.get_int_tuple("model.conv_windows"))


def _save_model(path, model, config, kind, vocab):
    save_checkpoint(path, state_to_arrays(model), {
        "kind": kind, "config_hash": config.hash(), "vocab": list(vocab.itos),
        "model_config": {k: list(v) if isinstance(v, tuple) else v
                         for k, v in vars(model.config).items()}})


def _load_extractor(path, config):
    arrays, meta = load_checkpoint(path)
    check_chained_hash(config, meta, path)
    vocab = corpus_mod.Vocabulary(meta["vocab"][len(corpus_mod.RESERVED):])
    mc = dict(meta["model_config"])
    mc["conv_windows"] = tuple(mc["conv_windows"])
    model = ExtractorModel(ExtractorConfig(**mc))
    from .nn import arrays_to_state
    arrays_to_state(model, arrays)
    return model, vocab, meta


def _load_abstractor(path, config):
    arrays, meta = load_checkpoint(path)
    check_chained_hash(config, meta, path)
    vocab = corpus_mod.Vocabulary(meta["vocab"][len(corpus_mod.RESERVED):])
    model = AbstractorModel(AbstractorConfig(**meta["model_config"]))
    from .nn import arrays_to_state
    arrays_to_state(model, arrays)
    return model, vocab, meta


def stage_pretrain_extractor(config, log=None):
    reports = corpus_mod.read_reports_jsonl(require(config, "corpus"))
    labels_by_id = labels_mod.read_labels_jsonl(require(config, "labels"))
    splits = _load_splits(config)
    parts, _ = _partition(reports, splits)
    seed_everything(config.get("run.seed"))
    vocab = corpus_mod.build_vocabulary(parts["train"],
                                        cap=config.get("data.vocab_cap"))
    model = ExtractorModel(_extractor_config(config, len(vocab)))
    result = train_extractor_mle(
        model, parts["train"], parts["val"], labels_by_id, vocab,
        lr=config.get("train.lr_pretrain"), clip_norm=config.get("train.clip_norm"),
        epochs=config.get("train.max_epochs"),
        batch_size=config.get("train.batch_size"),
        patience=config.get("train.patience"), seed=config.get("run.seed"),
        log=log)
    _save_model(artifact(config, "extractor_ckpt"), model, config,
                "extractor", vocab)
    return {"best_val_loss": result.best_val_loss,
            "init_val_loss": result.init_val_loss,
            "epochs": len(result.history)}


def stage_pretrain_abstractor(config, log=None):
    reports = corpus_mod.read_reports_jsonl(require(config, "corpus"))
    splits = _load_splits(config)
    parts, _ = _partition(reports, splits)
    seed_everything(config.get("run.seed"))
    vocab = corpus_mod.build_vocabulary(parts["train"],
                                        cap=config.get("data.vocab_cap"))
    model = AbstractorModel(AbstractorConfig(
        vocab_size=len(vocab), emb_dim=config.get("model.emb_dim"),
        hidden=config.get("model.hidden"),
        coverage_weight=config.get("abstractor.coverage_weight"),
        max_len=config.get("abstractor.max_len")))
    train_pairs = matched_pairs(parts["train"],
                                mode=config.get("labels.match_mode"))
    val_pairs = matched_pairs(parts["val"], mode=config.get("labels.match_mode"))
    result = train_abstractor(
        model, train_pairs, val_pairs, vocab,
        lr=config.get("train.lr_pretrain"), clip_norm=config.get("train.clip_norm"),
        epochs=config.get("train.abstractor_epochs"),
        batch_size=config.get("train.batch_size"),
        patience=config.get("train.patience"), seed=config.get("run.seed"),
        log=log)
    _save_model(artifact(config, "abstractor_ckpt"), model, config,
                "abstractor", vocab)
    return {"best_val_loss": result.best_val_loss,
            "init_val_loss": result.init_val_loss}


def stage_train_dimac(config, log=None):
    reports = corpus_mod.read_reports_jsonl(require(config, "corpus"))
    labels_by_id = labels_mod.read_labels_jsonl(require(config, "labels"))
    splits = _load_splits(config)
    parts, _ = _partition(reports, splits)
    model, vocab, _ = _load_extractor(require(config, "extractor_ckpt"), config)
    abstractor, _, _ = _load_abstractor(require(config, "abstractor_ckpt"), config)
    keywords = labels_mod.read_keyword_file(
        require(config, "keywords"),
        threshold=config.get("labels.keyword_threshold"))
    keywords_by_id = {r.id: labels_mod.compile_keyword_indices(r, keywords)
                      for r in parts["train"]}
    critic = CriticModel(model.config.hidden).init_from_extractor(model)
    env = AbstractedSentenceCache(abstractor, vocab, beam=1)
    rl_log_path = artifact(config, "rl_log")
    with open(rl_log_path, "w", encoding="utf-8") as f:
        def write_log(step, diag):
            f.write(json.dumps({
                "step": step, "mean_rg": diag.mean_global_reward,
                "mean_len": diag.mean_episode_length,
                "adv_s": diag.mean_advantage_sent,
                "adv_w": diag.mean_advantage_word}) + "\n")
            if log:
                log(step, diag)
        diagnostics = train_dimac(
            model, critic, parts["train"], labels_by_id, keywords_by_id, vocab,
            env, updates=config.get("rl.updates"),
            batch_size=config.get("rl.batch_size"), lr=config.get("rl.lr"),
            clip_norm=config.get("train.clip_norm"), gamma=config.get("rl.gamma"),
            lam=config.get("rl.lambda"), seed=config.get("run.seed"),
            log=write_log)
    _save_model(artifact(config, "dimac_ckpt"), model, config, "dimac", vocab)
    first = diagnostics[:max(len(diagnostics) // 10, 1)]
    last = diagnostics[-max(len(diagnostics) // 10, 1):]
    return {"mean_rg_first": sum(d.mean_global_reward for d in first) / len(first),
            "mean_rg_last": sum(d.mean_global_reward for d in last) / len(last)}


def stage_summarize(config, split="test"):
    reports = corpus_mod.read_reports_jsonl(require(config, "corpus"))
    splits = _load_splits(config)
    parts, _ = _partition(reports, splits)
    model_path = artifact(config, "dimac_ckpt")
    if not os.path.exists(model_path):
        model_path = require(config, "extractor_ckpt")
    model, vocab, _ = _load_extractor(model_path, config)
    abstractor, _, _ = _load_abstractor(require(config, "abstractor_ckpt"), config)
    beam = config.get("abstractor.beam")
    with open(artifact(config, "predictions"), "w", encoding="utf-8") as f:
        for report in parts[split]:
            result = model.extract(report, vocab, mode="greedy")
            sentences = []
            for s_idx in result.sentences:
                text, _ = abstractor.abstract_sentence(
                    report.findings[s_idx], vocab, beam=beam)
                flat = report.flat_findings
                kws = [w for w in result.words
                       if w < len(flat) and flat[w][1] == s_idx]
                sentences.append({"text": text, "source_sentence": s_idx,
                                  "keywords": sorted(set(kws))})
            f.write(json.dumps({"id": report.id, "impressions": sentences},
                               ensure_ascii=False) + "\n")
    return {"summarized": len(parts[split])}


def evaluate_predictions(predictions, references, rouge_l_mode="flat"):
    """Corpus-level mean ROUGE-1/2/L (percentages) of predicted vs
    reference impressions."""
    keys = ("rouge1", "rouge2", "rougeL")
    sums = {k: {"r": 0.0, "p": 0.0, "f": 0.0} for k in keys}
    count = 0
    for report_id, pred_sents in predictions.items():
        ref_sents = references[report_id]
        cand = [tok for s in pred_sents for tok in s]
        ref = [tok for s in ref_sents for tok in s]
        scores = {"rouge1": rouge_n(cand, ref, 1), "rouge2": rouge_n(cand, ref, 2)}
        if rouge_l_mode == "flat":
            scores["rougeL"] = rouge_l(cand, ref)
        else:  # position-aligned sentence-level mean
            pairs = list(zip(pred_sents, ref_sents))
            if pairs:
                parts = [rouge_l(c, r) for c, r in pairs]
                from .rouge import RougeScore
                scores["rougeL"] = RougeScore(
                    sum(p.recall for p in parts) / len(parts),
                    sum(p.precision for p in parts) / len(parts),
                    sum(p.f1 for p in parts) / len(parts))
            else:
                scores["rougeL"] = rouge_l(cand, ref)
        for key in keys:
            sums[key]["r"] += scores[key].recall
            sums[key]["p"] += scores[key].precision
            sums[key]["f"] += scores[key].f1
        count += 1
    if count == 0:
        raise PipelineError("no predictions to evaluate")
    return {k: {c: 100.0 * v / count for c, v in comps.items()}
            for k, comps in sums.items()}


def stage_evaluate(config):
    references = {r.id: r.impressions
                  for r in corpus_mod.read_reports_jsonl(require(config, "corpus"))}
    predictions = {}
    with open(require(config, "predictions"), encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            predictions[obj["id"]] = [s["text"] for s in obj["impressions"]]
    missing = set(predictions) - set(references)
    if missing:
        raise PipelineError(f"predictions for unknown report ids: {sorted(missing)[:5]}")
    results = evaluate_predictions(predictions, references,
                                   config.get("eval.rouge_l_mode"))
    with open(artifact(config, "results_json"), "w", encoding="utf-8") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(artifact(config, "results_txt"), "w", encoding="utf-8") as f:
        f.write(f"{'metric':8s} {'R':>8s} {'P':>8s} {'F':>8s}\n")
        for key in ("rouge1", "rouge2", "rougeL"):
            row = results[key]
            f.write(f"{key:8s} {row['r']:8.2f} {row['p']:8.2f} {row['f']:8.2f}\n")
    return results

import json
import os

import pytest

from radsum import cli, pipeline
from radsum.config import RunConfig
from radsum.corpus import Report
from radsum.pipeline import (PipelineError, artifact, evaluate_predictions,
                             split_corpus)


def tiny_config(workdir, **extra):
    config = RunConfig({"paths.workdir": str(workdir)})
    settings = {
        "synth.n_reports": 12, "synth.n_fillers": 20, "synth.n_concepts": 6,
        "model.emb_dim": 8, "model.pos_dim": 4, "model.hidden": 12,
        "model.conv_filters": 3, "model.conv_windows": "2,3",
        "train.max_epochs": 1, "train.abstractor_epochs": 1,
        "train.patience": 1, "rl.updates": 2, "rl.batch_size": 2,
        "abstractor.beam": 2, "abstractor.max_len": 12,
        "labels.keyword_threshold": 0.5,
        "split.train": 0.5, "split.val": 0.25, "split.test": 0.25,
    }
    settings.update(extra)
    for key, value in settings.items():
        config.set(key, value)
    return config


class TestConfig:
    def test_defaults_hash_stable(self):
        assert RunConfig().hash() == RunConfig().hash()

    def test_paths_excluded_from_hash(self):
        a = RunConfig({"paths.workdir": "/tmp/a"})
        b = RunConfig({"paths.workdir": "/tmp/b"})
        assert a.hash() == b.hash()

    def test_value_changes_hash(self):
        assert RunConfig().hash() != RunConfig({"rl.gamma": 0.99}).hash()

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError):
            RunConfig().set("nope.nope", 1)

    def test_file_and_override_parsing(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[rl]\ngamma = 0.99\n")
        config = RunConfig.from_file(str(path), overrides=["rl.updates=7"],
                                     seed=3)
        assert config.get("rl.gamma") == 0.99
        assert config.get("rl.updates") == 7
        assert config.get("run.seed") == 3

    def test_bad_override_rejected(self):
        with pytest.raises(ValueError):
            RunConfig.from_file(None, overrides=["justakey"])

    def test_round_trip_through_file_text(self, tmp_path):
        config = RunConfig({"rl.gamma": 0.9})
        path = tmp_path / "out.ini"
        path.write_text(config.to_file_text())
        again = RunConfig.from_file(str(path))
        assert again.values == config.values


class TestSplit:
    def _reports(self, n=20):
        return [Report(f"r{i}", [["a", "b"]], [["a"]]) for i in range(n)]

    def test_ratio_sizes(self):
        splits = split_corpus(self._reports(20), (0.8, 0.1, 0.1), seed=0)
        assert (len(splits["train"]), len(splits["val"]),
                len(splits["test"])) == (16, 2, 2)

    def test_disjoint_and_covering(self):
        reports = self._reports(17)
        splits = split_corpus(reports, (0.8, 0.1, 0.1), seed=1)
        union = splits["train"] + splits["val"] + splits["test"]
        assert sorted(union) == sorted(r.id for r in reports)
        assert len(set(union)) == len(union)

    def test_seed_determines_assignment(self):
        reports = self._reports(20)
        assert split_corpus(reports, (0.8, 0.1, 0.1), 5) == \
            split_corpus(reports, (0.8, 0.1, 0.1), 5)
        assert split_corpus(reports, (0.8, 0.1, 0.1), 5) != \
            split_corpus(reports, (0.8, 0.1, 0.1), 6)

    def test_bad_ratios_rejected(self):
        with pytest.raises(ValueError):
            split_corpus(self._reports(), (0.5, 0.1, 0.1), 0)


class TestEvaluate:
    def test_identity_scores_hundred(self):
        refs = {"a": [["x", "y"], ["z", "."]], "b": [["q", "r", "s"]]}
        results = evaluate_predictions(refs, refs)
        for key in ("rouge1", "rouge2", "rougeL"):
            for comp in ("r", "p", "f"):
                assert results[key][comp] == pytest.approx(100.0)

    def test_disjoint_scores_zero(self):
        preds = {"a": [["foo"]]}
        refs = {"a": [["bar", "baz"]]}
        results = evaluate_predictions(preds, refs)
        assert results["rouge1"]["f"] == 0.0

    def test_sentence_mode_differs_on_reordered_tokens(self):
        preds = {"a": [["x", "y"], ["z", "w"]]}
        refs = {"a": [["z", "w"], ["x", "y"]]}
        flat = evaluate_predictions(preds, refs, rouge_l_mode="flat")
        aligned = evaluate_predictions(preds, refs, rouge_l_mode="sentence")
        assert flat["rougeL"]["f"] != aligned["rougeL"]["f"]

    def test_empty_rejected(self):
        with pytest.raises(PipelineError):
            evaluate_predictions({}, {})


class TestStages:
    def test_data_stages_end_to_end(self, tmp_path):
        config = tiny_config(tmp_path)
        out = pipeline.stage_synth(config)
        assert out["reports"] == 12
        pipeline.stage_stats(config)
        pipeline.stage_split(config)
        pipeline.stage_labels(config)
        for name in ("corpus", "annotations", "splits", "labels", "keywords",
                     "stats_json", "stats_txt"):
            assert os.path.exists(artifact(config, name))
        splits = json.load(open(artifact(config, "splits")))
        assert sum(len(v) for v in splits.values()) == 12

    def test_model_stages_and_summarize(self, tmp_path):
        config = tiny_config(tmp_path)
        pipeline.stage_synth(config)
        pipeline.stage_split(config)
        pipeline.stage_labels(config)
        pipeline.stage_pretrain_extractor(config)
        pipeline.stage_pretrain_abstractor(config)
        rl = pipeline.stage_train_dimac(config)
        assert "mean_rg_first" in rl and "mean_rg_last" in rl
        pipeline.stage_summarize(config, split="test")
        results = pipeline.stage_evaluate(config)
        assert set(results) == {"rouge1", "rouge2", "rougeL"}
        with open(artifact(config, "predictions")) as f:
            lines = [json.loads(l) for l in f if l.strip()]
        splits = json.load(open(artifact(config, "splits")))
        assert [l["id"] for l in lines] != []
        assert all(l["id"] in splits["test"] for l in lines)

    def test_missing_artifact_raises(self, tmp_path):
        config = tiny_config(tmp_path)
        with pytest.raises(PipelineError):
            pipeline.stage_split(config)

    def test_stale_config_hash_rejected(self, tmp_path):
        config = tiny_config(tmp_path)
        pipeline.stage_synth(config)
        pipeline.stage_split(config)
        pipeline.stage_labels(config)
        pipeline.stage_pretrain_extractor(config)
        pipeline.stage_pretrain_abstractor(config)
        changed = tiny_config(tmp_path)
        changed.set("rl.gamma", 0.5)
        with pytest.raises(PipelineError):
            pipeline.stage_train_dimac(changed)

    def test_prep_stage_filters_raw_corpus(self, tmp_path):
        raw = tmp_path / "raw.jsonl"
        with open(raw, "w") as f:
            f.write(json.dumps({"id": "good",
                                "findings": "one two three four five six.",
                                "impressions": "one two."}) + "\n")
            f.write(json.dumps({"id": "short", "findings": "x.",
                                "impressions": "y."}) + "\n")
        config = tiny_config(tmp_path)
        out = pipeline.stage_prep(config, str(raw))
        assert out == {"accepted": 1, "rejected": 1}
        assert os.path.exists(artifact(config, "rejections"))


class TestCli:
    def _base_args(self, workdir):
        args = ["--override", f"paths.workdir={workdir}"]
        for key, value in (("synth.n_reports", 12), ("synth.n_fillers", 20),
                           ("synth.n_concepts", 6)):
            args += ["--override", f"{key}={value}"]
        return args

    def test_synth_then_split_exit_zero(self, tmp_path, capsys):
        base = self._base_args(tmp_path)
        assert cli.main(base + ["synth"]) == 0
        assert cli.main(base + ["split"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert json.loads(out[-1])  # last line is the stage's JSON result

    def test_missing_artifact_exit_two(self, tmp_path, capsys):
        assert cli.main(self._base_args(tmp_path) + ["evaluate"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_config_key_exit_two(self, tmp_path, capsys):
        assert cli.main(["--override", "bogus.key=1", "synth"]) == 2
        assert "config error" in capsys.readouterr().err

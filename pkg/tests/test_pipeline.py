"""Stage gating, training progress, bit-exact resume, eval determinism, the
config file format, and the CLI surface."""

import json
import subprocess
import sys

import numpy as np
import pytest

from dialoqa.checkpoint import load_checkpoint
from dialoqa.corpus import load_corpus, save_corpus
from dialoqa.errors import CheckpointError, ConfigError, SequencingError
from dialoqa.synth import generate_corpus
from dialoqa.training import (
    RunConfig,
    derive_rng,
    load_run_config,
    run_eval,
    run_finetune,
    run_stage,
)

pytestmark = pytest.mark.filterwarnings("ignore::DeprecationWarning")


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.json"
    save_corpus(generate_corpus(num_episodes=10, scenes_per_episode=2, seed=3), path)
    return path


def _config(corpus_path, **kw):
    base = dict(
        corpus=str(corpus_path),
        train_max_episode=7,
        dev_max_episode=8,
        hidden_size=16,
        intermediate_size=32,
        num_layers=1,
        num_heads=2,
        batch_size=8,
        base_lr=3e-4,
        tmlm_steps=24,
        umlm_steps=24,
        uop_steps=24,
        finetune_steps=24,
        patience=10,
        seed=1,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tmlm_ckpt(corpus_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("tmlm")
    return run_stage("tmlm", _config(corpus_path), out_dir=out)


class TestGating:
    def test_umlm_requires_tmlm(self, corpus_path):
        with pytest.raises(SequencingError):
            run_stage("umlm", _config(corpus_path))

    def test_uop_rejects_tmlm_source(self, corpus_path, tmlm_ckpt):
        with pytest.raises(SequencingError):
            run_stage("uop", _config(corpus_path), tmlm_ckpt)

    def test_unknown_stage(self, corpus_path):
        with pytest.raises(SequencingError):
            run_stage("finetuned", _config(corpus_path))

    def test_finetune_rejects_umlm_source(self, corpus_path, tmlm_ckpt):
        umlm = run_stage("umlm", _config(corpus_path), tmlm_ckpt)
        with pytest.raises(SequencingError):
            run_finetune(_config(corpus_path), umlm)

    def test_eval_requires_finetuned(self, corpus_path, tmlm_ckpt):
        with pytest.raises(SequencingError):
            run_eval(_config(corpus_path), tmlm_ckpt, "dev")

    def test_resume_requires_training_state(self, corpus_path, tmlm_ckpt):
        assert tmlm_ckpt.stage == "tmlm"
        assert not tmlm_ckpt.can_resume()  # best checkpoints are weights-only
        with pytest.raises(CheckpointError):
            run_stage("tmlm", _config(corpus_path), tmlm_ckpt)


class TestTrainingProgress:
    def test_tmlm_dev_perplexity_improves(self, corpus_path, tmp_path):
        cfg = _config(corpus_path, tmlm_steps=60, base_lr=1e-3)
        out = tmp_path / "run"
        run_stage("tmlm", cfg, out_dir=out)
        last = load_checkpoint(out / "tmlm-last.ckpt")
        history = last.train_state["history"]
        assert history[0]["epoch"] == -1
        assert history[-1]["perplexity"] < history[0]["perplexity"]

    def test_baseline_finetune_path_runs(self, corpus_path, tmlm_ckpt, tmp_path):
        # tmlm -> finetune skips TL pretraining; TL weights initialize fresh
        best, history = run_finetune(_config(corpus_path), tmlm_ckpt, tmp_path / "ft")
        assert best.stage == "finetuned"
        assert "tl.0.attn_wq" in best.weights
        assert len(history) >= 2


class TestResumeReplay:
    @pytest.mark.parametrize("stage", ["tmlm", "uop"])
    def test_pretrain_stage_resume_bit_exact(self, corpus_path, tmlm_ckpt, tmp_path, stage):
        cfg = _config(corpus_path)
        init = None if stage == "tmlm" else run_stage("umlm", cfg, tmlm_ckpt)
        # uninterrupted run
        dir_a = tmp_path / "a"
        run_stage(stage, cfg, init, out_dir=dir_a)
        # interrupted after 1 epoch, then resumed
        dir_b = tmp_path / "b"
        run_stage(stage, cfg, init, out_dir=dir_b, halt_after_epochs=1)
        mid = load_checkpoint(dir_b / f"{stage}-last.ckpt")
        assert mid.can_resume()
        run_stage(stage, cfg, mid, out_dir=dir_b)
        a = (dir_a / f"{stage}-last.ckpt").read_bytes()
        b = (dir_b / f"{stage}-last.ckpt").read_bytes()
        assert a == b
        assert (dir_a / f"{stage}-best.ckpt").read_bytes() == (
            dir_b / f"{stage}-best.ckpt"
        ).read_bytes()

    def test_finetune_resume_bit_exact(self, corpus_path, tmlm_ckpt, tmp_path):
        cfg = _config(corpus_path, finetune_steps=20)
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        run_finetune(cfg, tmlm_ckpt, out_dir=dir_a)
        run_finetune(cfg, tmlm_ckpt, out_dir=dir_b, halt_after_epochs=1)
        mid = load_checkpoint(dir_b / "finetuned-last.ckpt")
        run_finetune(cfg, mid, out_dir=dir_b)
        assert (dir_a / "finetuned-last.ckpt").read_bytes() == (
            dir_b / "finetuned-last.ckpt"
        ).read_bytes()


class TestEval:
    @pytest.fixture(scope="class")
    def finetuned(self, corpus_path, tmlm_ckpt, tmp_path_factory):
        out = tmp_path_factory.mktemp("ft")
        best, _ = run_finetune(_config(corpus_path), tmlm_ckpt, out)
        return best

    def test_two_evals_identical(self, corpus_path, finetuned):
        cfg = _config(corpus_path)
        r1 = run_eval(cfg, finetuned, "dev")
        r2 = run_eval(cfg, finetuned, "dev")
        assert r1.to_dict() == r2.to_dict()

    def test_prediction_qids_cover_split(self, corpus_path, finetuned, tmp_path):
        cfg = _config(corpus_path)
        run_eval(cfg, finetuned, "dev", out_dir=tmp_path)
        lines = (tmp_path / "predictions-dev.jsonl").read_text().splitlines()
        pred_qids = {json.loads(l)["qid"] for l in lines}
        corpus = load_corpus(corpus_path)
        dev_qids = {
            q.qid for d, qs in corpus if 7 < d.episode_id <= 8 for q in qs
        }
        assert pred_qids == dev_qids

    def test_report_files_written(self, corpus_path, finetuned, tmp_path):
        report = run_eval(cfg := _config(corpus_path), finetuned, "dev", out_dir=tmp_path)
        parsed = json.loads((tmp_path / "report-dev.json").read_text())
        assert parsed["total"] == report.total
        assert "all" in (tmp_path / "report-dev.txt").read_text()


class TestRunConfigParsing:
    def test_defaults_snapshot(self):
        cfg = RunConfig()
        assert cfg.batch_size == 32
        assert cfg.base_lr == 5e-5
        assert (cfg.beta1, cfg.beta2) == (0.9, 0.999)
        assert cfg.weight_decay == 0.01
        assert cfg.warmup_fraction == 0.10
        assert cfg.dropout_p == 0.1
        assert cfg.loss_reduction == "sum"

    def test_file_parsing(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(
            """
            # comment line
            hidden_size = 48
            base_lr = 1e-3   # inline comment
            corpus = "some/path.json"
            use_utterance_positions = false
            """
        )
        cfg = load_run_config(p)
        assert cfg.hidden_size == 48
        assert cfg.base_lr == 1e-3
        assert cfg.corpus == "some/path.json"
        assert cfg.use_utterance_positions is False

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("nonsense = 1\n")
        with pytest.raises(ConfigError, match="nonsense"):
            load_run_config(p)

    def test_override_wins(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("seed = 7\n")
        assert load_run_config(p, seed=9).seed == 9
        assert load_run_config(p, seed=None).seed == 7

    def test_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(loss_reduction="mean")
        with pytest.raises(ConfigError):
            RunConfig(mlm_mode="sometimes")

    def test_derive_rng_stable_and_namespaced(self):
        a = derive_rng(3, "uop", "dev").random(4)
        b = derive_rng(3, "uop", "dev").random(4)
        c = derive_rng(3, "uop", "train").random(4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestStaticMlm:
    def test_static_mode_reuses_epoch_masks(self, corpus_path, tmp_path):
        cfg = _config(corpus_path, mlm_mode="static", tmlm_steps=12)
        out = tmp_path / "static"
        ckpt = run_stage("tmlm", cfg, out_dir=out)
        assert ckpt.stage == "tmlm"


class TestCli:
    def _run(self, *args):
        return subprocess.run(
            [sys.executable, "-m", "dialoqa.cli", *args],
            capture_output=True, text=True,
        )

    def test_end_to_end_synth_and_pretrain(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "\n".join(
                [
                    f"corpus = {tmp_path / 'corpus.json'}",
                    "train_max_episode = 7",
                    "dev_max_episode = 8",
                    "synth_episodes = 10",
                    "synth_scenes_per_episode = 1",
                    "hidden_size = 16",
                    "intermediate_size = 32",
                    "num_layers = 1",
                    "batch_size = 8",
                    "tmlm_steps = 4",
                    "seed = 5",
                ]
            )
        )
        synth = self._run("synth-corpus", "--config", str(cfg_file), "--out", str(tmp_path))
        assert synth.returncode == 0, synth.stderr
        pre = self._run(
            "pretrain", "--stage", "tmlm", "--config", str(cfg_file),
            "--out", str(tmp_path / "run"),
        )
        assert pre.returncode == 0, pre.stderr
        assert (tmp_path / "run" / "tmlm-best.ckpt").exists()
        assert (tmp_path / "run" / "vocab.txt").exists()

    def test_usage_error_is_json_exit_2(self):
        out = self._run("pretrain", "--stage", "bogus")
        assert out.returncode == 2
        err = json.loads(out.stderr.strip().splitlines()[-1])
        assert err["error"] == "UsageError"

    def test_app_error_is_json_exit_1(self, tmp_path):
        out = self._run("pretrain", "--stage", "tmlm")  # no corpus configured
        assert out.returncode == 1
        err = json.loads(out.stderr.strip().splitlines()[-1])
        assert err["error"] == "ConfigError"

    def test_stage_gate_error_through_cli(self, tmp_path):
        cfg_file = tmp_path / "r.cfg"
        cfg_file.write_text(f"corpus = {tmp_path / 'missing.json'}\n")
        out = self._run("finetune", "--config", str(cfg_file))
        assert out.returncode == 2  # missing --init is a usage error

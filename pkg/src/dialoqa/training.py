"""Staged training pipeline: the three pre-training stages with weight
transfer, multi-task fine-tuning, evaluation, configuration, seeding, and
checkpoint management.

Determinism contract: every random draw comes either from namespaced
generators derived from (seed, stage, purpose) or from the single training
generator whose state is checkpointed, so a resumed run replays the
uninterrupted one bit-exactly. Dev evaluation never touches the training
generator.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, transfer_weights
from .corpus import (
    CorpusSplit,
    Dialogue,
    QAExample,
    load_corpus,
    split_by_episode,
    truncate,
    truncate_pair,
)
from .encoder import (
    STAGE_FINETUNED,
    STAGE_TMLM,
    STAGE_UMLM,
    STAGE_UOP,
    EncoderWeights,
    ModelConfig,
    init_encoder_weights,
)
from .errors import CheckpointError, ConfigError, CorpusError, SequencingError
from .finetune import QAEncoding, encode_for_qa, joint_loss, predict, select_answer
from .metrics import MetricReport, PredictionRecord, evaluate
from .optim import AdamState, LRSchedule, adam_step, lr_at_step
from .pretrain import (
    TmlmInstance,
    UmlmInstance,
    UopInstance,
    build_tmlm_instance,
    build_umlm_instances,
    build_uop_instance,
    mlm_perplexity,
    tmlm_batch_loss,
    umlm_batch_loss,
    uop_batch_logits,
    uop_batch_loss,
)
from .tensor import Tensor, mean, stack
from .vocab import Vocab, build_vocab

logger = logging.getLogger("dialoqa")

PRETRAIN_STAGES = (STAGE_TMLM, STAGE_UMLM, STAGE_UOP)
_REQUIRED_PREDECESSOR = {STAGE_UMLM: STAGE_TMLM, STAGE_UOP: STAGE_UMLM}


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Pipeline configuration; optimizer/schedule defaults are the published
    recipe and are asserted field-by-field in the acceptance suite."""

    corpus: str | None = None
    extra_corpus: str | None = None
    # model (vocab_size is resolved from the corpus or checkpoint)
    num_layers: int = 2
    num_heads: int = 2
    hidden_size: int = 32
    intermediate_size: int = 64
    max_tokens: int = 12
    max_utterances: int = 8
    use_utterance_positions: bool = True
    # optimization
    batch_size: int = 32
    base_lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.10
    dropout_p: float = 0.1
    loss_reduction: str = "sum"
    # stage budgets and early stopping
    tmlm_steps: int = 500
    umlm_steps: int = 500
    uop_steps: int = 500
    finetune_steps: int = 500
    patience: int = 3
    # data handling
    train_max_episode: int = 20
    dev_max_episode: int = 22
    min_freq: int = 1
    mlm_ratio: float = 0.15
    mlm_mode: str = "dynamic"  # "static" caches t-MLM masks at dataset build
    umlm_samples_per_utterance: int = 1
    uop_shuffle_prob: float = 0.5
    seed: int = 0
    # synthetic corpus generation
    synth_episodes: int = 26
    synth_scenes_per_episode: int = 2
    synth_questions_per_dialogue: int = 3
    synth_min_utterances: int = 4
    synth_max_utterances: int = 6
    synth_unanswerable_fraction: float = 0.15

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1")
        if self.loss_reduction != "sum":
            raise ConfigError("loss_reduction must be 'sum'")
        if self.mlm_mode not in ("static", "dynamic"):
            raise ConfigError(f"mlm_mode must be static|dynamic, got {self.mlm_mode!r}")
        if not 0.0 <= self.mlm_ratio < 1.0:
            raise ConfigError(f"mlm_ratio must be in [0, 1), got {self.mlm_ratio}")
        if not 0.0 <= self.uop_shuffle_prob <= 1.0:
            raise ConfigError("uop_shuffle_prob must be in [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            hidden_size=self.hidden_size,
            intermediate_size=self.intermediate_size,
            max_tokens=self.max_tokens,
            max_utterances=self.max_utterances,
            dropout_p=self.dropout_p,
            use_utterance_positions=self.use_utterance_positions,
        )

    def adam_state(self) -> AdamState:
        return AdamState(
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            weight_decay=self.weight_decay,
        )


def _coerce(raw: str, typ) -> object:
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def parse_config_file(path: str | Path) -> dict[str, str]:
    """key = value lines; '#' starts a comment; values may be quoted."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = body.split("=", 1)
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        out[key.strip()] = value
    return out


def load_run_config(path: str | Path | None = None, **overrides) -> RunConfig:
    hints = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {
        name: (int if "int" in str(t) else float if "float" in str(t) else
               bool if "bool" in str(t) else str)
        for name, t in hints.items()
    }
    data: dict[str, object] = {}
    if path is not None:
        for key, raw in parse_config_file(path).items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = _coerce(raw, types[key])
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        data[key] = value
    return RunConfig(**data)


def derive_rng(seed: int, *tags: str) -> np.random.Generator:
    """Independent generator for (seed, purpose); stable across runs."""
    entropy = [seed] + [zlib.crc32(t.encode("utf-8")) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


# -- data plumbing -------------------------------------------------------


def load_split(config: RunConfig) -> CorpusSplit:
    if not config.corpus:
        raise ConfigError("config.corpus is required")
    corpus = load_corpus(config.corpus)
    extra: list[Dialogue] = []
    if config.extra_corpus:
        extra = [d for d, _ in load_corpus(config.extra_corpus)]
    return split_by_episode(
        corpus, config.train_max_episode, config.dev_max_episode, extra
    )


def pretrain_dialogues(
    config: RunConfig, split: CorpusSplit
) -> tuple[list[Dialogue], list[Dialogue]]:
    """(training dialogues incl. the extra pretraining set, dev dialogues),
    truncated to the model limits."""
    lim = (config.max_utterances, config.max_tokens)
    train = [truncate(d, *lim) for d, _ in split.training]
    train += [truncate(d, *lim) for d in split.pretrain_extra]
    dev = [truncate(d, *lim) for d, _ in split.development]
    return train, dev


def qa_entries(
    config: RunConfig, part: Sequence[tuple[Dialogue, Sequence[QAExample]]]
) -> list[tuple[Dialogue, list[QAExample]]]:
    out = []
    for d, qs in part:
        td, tqs = truncate_pair(d, qs, config.max_utterances, config.max_tokens)
        if tqs:
            out.append((td, tqs))
    return out


# -- dev evaluation -----------------------------------------------------------


def _chunks(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def mlm_dev_perplexity(
    weights: EncoderWeights,
    config: ModelConfig,
    instances: Sequence[TmlmInstance] | Sequence[UmlmInstance],
    batch_size: int,
) -> float:
    pairs = []
    for chunk in _chunks(instances, batch_size):
        if isinstance(chunk[0], TmlmInstance):
            loss = tmlm_batch_loss(weights, config, chunk)
            count = sum(len(inst.mask_positions) for inst in chunk)
        else:
            loss = umlm_batch_loss(weights, config, chunk)
            count = len(chunk)
        pairs.append((loss.item(), count))
    return mlm_perplexity(pairs)


def uop_dev_metrics(
    weights: EncoderWeights,
    config: ModelConfig,
    instances: Sequence[UopInstance],
    batch_size: int,
) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) with dropout off."""
    total_ce = 0.0
    correct = 0
    for chunk in _chunks(instances, batch_size):
        logits = uop_batch_logits(weights, config, chunk).array
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        for row, inst in enumerate(chunk):
            total_ce -= logp[row, inst.label]
            correct += int(np.argmax(logits[row]) == inst.label)
    n = len(instances)
    return float(total_ce) / n, correct / n


def build_uop_dev_instances(
    vocab: Vocab, dialogues: Sequence[Dialogue], rng: np.random.Generator
) -> list[UopInstance]:
    """Paired held-out set: each eligible dialogue contributes one in-order
    and one shuffled instance, so the label balance is exact."""
    out = []
    for d in dialogues:
        in_order = build_uop_instance(vocab, d, rng, shuffle_prob=0.0)
        if in_order is None:
            continue
        shuffled = build_uop_instance(vocab, d, rng, shuffle_prob=1.0)
        out.extend([in_order, shuffled])
    return out


# -- the generic stage loop ---------------------------------------------------


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]


def _snapshot(weights: EncoderWeights) -> EncoderWeights:
    params = {
        name: Tensor(p.array.copy(), requires_grad=True) for name, p in weights.named()
    }
    return EncoderWeights(weights.config, weights.stage, params)


def fit(
    *,
    run_config: RunConfig,
    weights: EncoderWeights,
    vocab: Vocab,
    adam: AdamState,
    rng: np.random.Generator,
    global_step: int,
    train_state: dict,
    build_epoch: Callable[[np.random.Generator, int], list],
    batch_loss: Callable[..., Tensor],
    dev_eval: Callable[[EncoderWeights], dict],
    improve: Callable[[dict, dict | None], tuple[bool, dict]],
    max_steps: int,
    out_dir: str | Path | None = None,
    initial_best: Checkpoint | None = None,
    halt_after_epochs: int | None = None,
) -> FitResult:
    """Epoch loop with per-epoch dev evaluation, patience-based early
    stopping, and best/last checkpointing. ``improve`` returns whether the
    new metrics improve on the running best and the merged running best.
    ``halt_after_epochs`` simulates an interruption after that many epochs
    of this call; training resumes bit-exactly from the written last
    checkpoint."""
    stage = weights.stage
    params = dict(weights.named())
    schedule = LRSchedule(run_config.base_lr, max_steps, run_config.warmup_fraction)
    epoch = int(train_state.get("epoch", 0))
    best_metrics = train_state.get("best_metrics")
    bad = int(train_state.get("bad_evals", 0))
    history: list[dict] = list(train_state.get("history", []))
    best_ckpt = initial_best

    def _checkpoint(weights_obj, *, full: bool, state: dict) -> Checkpoint:
        return Checkpoint(
            weights=weights_obj,
            vocab=vocab,
            global_step=global_step,
            adam=adam if full else None,
            rng_state=rng.bit_generator.state if full else None,
            train_state=state,
        )

    if not history:
        metrics = dev_eval(weights)
        history.append({"epoch": -1, "step": global_step, **metrics})
        _, best_metrics = improve(metrics, None)
        best_ckpt = _checkpoint(
            _snapshot(weights), full=False,
            state={"epoch": -1, "metrics": metrics},
        )
        logger.info("[%s] initial dev: %s", stage, metrics)

    last_ckpt = None
    epochs_this_call = 0
    while global_step < max_steps and bad < run_config.patience:
        instances = build_epoch(rng, epoch)
        if not instances:
            raise CorpusError(f"stage {stage}: no training instances")
        order = rng.permutation(len(instances))
        for chunk in _chunks(order, run_config.batch_size):
            if global_step >= max_steps:
                break
            batch = [instances[i] for i in chunk]
            weights.zero_grads()
            loss = batch_loss(weights, batch, training=True, rng=rng)
            loss.backward()
            global_step += 1
            adam_step(params, weights.grads(), adam, lr_at_step(schedule, global_step))
        metrics = dev_eval(weights)
        history.append({"epoch": epoch, "step": global_step, **metrics})
        improved, best_metrics = improve(metrics, best_metrics)
        if improved:
            bad = 0
            best_ckpt = _checkpoint(
                _snapshot(weights), full=False,
                state={"epoch": epoch, "metrics": metrics},
            )
            if out_dir is not None:
                save_checkpoint(best_ckpt, Path(out_dir) / f"{stage}-best.ckpt")
        else:
            bad += 1
        epoch += 1
        state = {
            "epoch": epoch,
            "best_metrics": best_metrics,
            "bad_evals": bad,
            "history": history,
        }
        last_ckpt = _checkpoint(weights, full=True, state=state)
        if out_dir is not None:
            save_checkpoint(last_ckpt, Path(out_dir) / f"{stage}-last.ckpt")
        logger.info(
            "[%s] epoch %d step %d dev %s%s",
            stage, epoch - 1, global_step, metrics, " *" if improved else "",
        )
        epochs_this_call += 1
        if halt_after_epochs is not None and epochs_this_call >= halt_after_epochs:
            break
    if last_ckpt is None:  # budget already exhausted before entering the loop
        last_ckpt = _checkpoint(weights, full=True, state=dict(train_state))
    if best_ckpt is None:
        best_ckpt = _checkpoint(
            _snapshot(weights), full=False, state={"epoch": epoch - 1}
        )
    return FitResult(best_ckpt, last_ckpt, history)


def _perplexity_improve(metrics: dict, best: dict | None) -> tuple[bool, dict]:
    if best is None or metrics["perplexity"] < best["perplexity"]:
        return True, {"perplexity": metrics["perplexity"]}
    return False, best


def _uop_improve(metrics: dict, best: dict | None) -> tuple[bool, dict]:
    if best is None:
        return True, {"loss": metrics["loss"], "accuracy": metrics["accuracy"]}
    better = metrics["loss"] < best["loss"] or metrics["accuracy"] > best["accuracy"]
    merged = {
        "loss": min(metrics["loss"], best["loss"]),
        "accuracy": max(metrics["accuracy"], best["accuracy"]),
    }
    return better, merged


def _sm_improve(metrics: dict, best: dict | None) -> tuple[bool, dict]:
    if best is None or metrics["sm"] > best["sm"]:
        return True, {"sm": metrics["sm"]}
    return False, best


# -- stage wiring ---------------------------------------------------------


def _stage_budget(config: RunConfig, stage: str) -> int:
    return {
        STAGE_TMLM: config.tmlm_steps,
        STAGE_UMLM: config.umlm_steps,
        STAGE_UOP: config.uop_steps,
        STAGE_FINETUNED: config.finetune_steps,
    }[stage]


def _init_stage_state(
    config: RunConfig,
    stage: str,
    init_checkpoint: Checkpoint | None,
    allowed_sources: tuple[str, ...],
    fallback_vocab: Callable[[], Vocab],
    out_dir: str | Path | None,
):
    """Shared gating: fresh start, same-stage resume, or transfer from an
    allowed predecessor. Returns (vocab, model_cfg, weights, adam, rng,
    global_step, train_state, initial_best)."""
    if init_checkpoint is None:
        if stage != STAGE_TMLM:
            raise SequencingError(
                f"stage {stage!r} requires an initial checkpoint from one of "
                f"{list(allowed_sources)}"
            )
        vocab = fallback_vocab()
        model_cfg = config.model_config(len(vocab))
        weights = init_encoder_weights(model_cfg, stage, derive_rng(config.seed, stage, "init"))
        return (vocab, model_cfg, weights, config.adam_state(),
                derive_rng(config.seed, stage, "train"), 0, {}, None)
    if init_checkpoint.stage == stage:
        if not init_checkpoint.can_resume():
            raise CheckpointError(
                f"checkpoint for stage {stage!r} lacks optimizer/rng state; "
                "resume requires a *-last checkpoint"
            )
        initial_best = None
        if out_dir is not None:
            best_path = Path(out_dir) / f"{stage}-best.ckpt"
            if best_path.exists():
                initial_best = load_checkpoint(best_path)
        return (
            init_checkpoint.vocab,
            init_checkpoint.config,
            init_checkpoint.weights,
            init_checkpoint.adam,
            restore_rng(init_checkpoint.rng_state),
            init_checkpoint.global_step,
            dict(init_checkpoint.train_state),
            initial_best,
        )
    if init_checkpoint.stage in allowed_sources:
        vocab = init_checkpoint.vocab
        model_cfg = config.model_config(len(vocab))
        weights = transfer_weights(
            init_checkpoint, stage, model_cfg, derive_rng(config.seed, stage, "init")
        )
        return (vocab, model_cfg, weights, config.adam_state(),
                derive_rng(config.seed, stage, "train"), 0, {}, None)
    raise SequencingError(
        f"stage {stage!r} cannot start from a {init_checkpoint.stage!r} "
        f"checkpoint; expected one of {[stage, *allowed_sources]}"
    )


def run_stage(
    stage: str,
    config: RunConfig,
    init_checkpoint: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    *,
    halt_after_epochs: int | None = None,
) -> Checkpoint:
    """Train one pre-training stage and return the best-dev checkpoint."""
    if stage not in PRETRAIN_STAGES:
        raise SequencingError(
            f"run_stage handles {list(PRETRAIN_STAGES)}, got {stage!r}"
        )
    split = load_split(config)
    train_dialogues, dev_dialogues = pretrain_dialogues(config, split)
    if not train_dialogues or not dev_dialogues:
        raise CorpusError("pre-training needs non-empty training and dev splits")
    allowed = () if stage == STAGE_TMLM else (_REQUIRED_PREDECESSOR[stage],)
    vocab, model_cfg, weights, adam, rng, step, train_state, initial_best = (
        _init_stage_state(
            config, stage, init_checkpoint, allowed,
            lambda: build_vocab(train_dialogues, config.min_freq), out_dir,
        )
    )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        vocab.save(Path(out_dir) / "vocab.txt")

    if stage == STAGE_TMLM:
        dev_rng = derive_rng(config.seed, stage, "dev")
        dev_instances = [
            build_tmlm_instance(vocab, model_cfg, d, dev_rng, config.mlm_ratio)
            for d in dev_dialogues
        ]
        static_instances: list[TmlmInstance] | None = None
        if config.mlm_mode == "static":
            static_rng = derive_rng(config.seed, stage, "static-masks")
            static_instances = [
                build_tmlm_instance(vocab, model_cfg, d, static_rng, config.mlm_ratio)
                for d in train_dialogues
            ]

        def build_epoch(rng_, epoch_):
            if static_instances is not None:
                return static_instances
            return [
                build_tmlm_instance(vocab, model_cfg, d, rng_, config.mlm_ratio)
                for d in train_dialogues
            ]

        def batch_loss(w, batch, training, rng):
            return tmlm_batch_loss(w, model_cfg, batch, training=training, rng=rng)

        def dev_eval(w):
            return {
                "perplexity": mlm_dev_perplexity(
                    w, model_cfg, dev_instances, config.batch_size
                )
            }

        improve = _perplexity_improve
    elif stage == STAGE_UMLM:
        dev_rng = derive_rng(config.seed, stage, "dev")
        dev_instances = [
            inst
            for d in dev_dialogues
            for inst in build_umlm_instances(
                vocab, d, dev_rng, config.umlm_samples_per_utterance
            )
        ]

        def build_epoch(rng_, epoch_):
            return [
                inst
                for d in train_dialogues
                for inst in build_umlm_instances(
                    vocab, d, rng_, config.umlm_samples_per_utterance
                )
            ]

        def batch_loss(w, batch, training, rng):
            return umlm_batch_loss(w, model_cfg, batch, training=training, rng=rng)

        def dev_eval(w):
            return {
                "perplexity": mlm_dev_perplexity(
                    w, model_cfg, dev_instances, config.batch_size
                )
            }

        improve = _perplexity_improve
    else:  # uop
        dev_instances = build_uop_dev_instances(
            vocab, dev_dialogues, derive_rng(config.seed, stage, "dev")
        )
        if not dev_instances:
            raise CorpusError("no dev dialogues are long enough for order prediction")

        def build_epoch(rng_, epoch_):
            out = []
            for d in train_dialogues:
                inst = build_uop_instance(vocab, d, rng_, config.uop_shuffle_prob)
                if inst is not None:
                    out.append(inst)
            return out

        def batch_loss(w, batch, training, rng):
            return uop_batch_loss(w, model_cfg, batch, training=training, rng=rng)

        def dev_eval(w):
            loss, acc = uop_dev_metrics(w, model_cfg, dev_instances, config.batch_size)
            return {"loss": loss, "accuracy": acc}

        improve = _uop_improve

    result = fit(
        run_config=config,
        weights=weights,
        vocab=vocab,
        adam=adam,
        rng=rng,
        global_step=step,
        train_state=train_state,
        build_epoch=build_epoch,
        batch_loss=batch_loss,
        dev_eval=dev_eval,
        improve=improve,
        max_steps=_stage_budget(config, stage),
        out_dir=out_dir,
        initial_best=initial_best,
        halt_after_epochs=halt_after_epochs,
    )
    return result.best


# -- fine-tuning ----------------------------------------------------------


def _encode_entries(
    vocab: Vocab,
    model_cfg: ModelConfig,
    entries: Sequence[tuple[Dialogue, Sequence[QAExample]]],
) -> list[tuple[QAEncoding, QAExample, Dialogue]]:
    out = []
    for d, qs in entries:
        for q in qs:
            out.append((encode_for_qa(vocab, model_cfg, q, d), q, d))
    return out


def predict_entries(
    weights: EncoderWeights,
    model_cfg: ModelConfig,
    vocab: Vocab,
    entries: Sequence[tuple[Dialogue, Sequence[QAExample]]],
) -> tuple[list[PredictionRecord], list[QAExample]]:
    records: list[PredictionRecord] = []
    golds: list[QAExample] = []
    for encoding, q, d in _encode_entries(vocab, model_cfg, entries):
        uid, spans = predict(weights, model_cfg, encoding)
        p = select_answer(uid, spans)
        if p.utterance_index == 0:
            records.append(PredictionRecord(q.qid, None, None, None, None))
        else:
            ui = p.utterance_index - 1
            text = " ".join(d.utterances[ui].tokens[p.token_start : p.token_end + 1])
            records.append(
                PredictionRecord(q.qid, ui, p.token_start, p.token_end, text)
            )
        golds.append(q)
    return records, golds


def evaluate_entries(
    weights: EncoderWeights,
    model_cfg: ModelConfig,
    vocab: Vocab,
    entries: Sequence[tuple[Dialogue, Sequence[QAExample]]],
) -> MetricReport:
    records, golds = predict_entries(weights, model_cfg, vocab, entries)
    return evaluate(records, golds)


def run_finetune(
    config: RunConfig,
    init_checkpoint: Checkpoint,
    out_dir: str | Path | None = None,
    *,
    halt_after_epochs: int | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Joint UID+span fine-tuning; keeps the best dev-SM checkpoint. The
    tmlm-only source path covers the no-utterance-pretraining baseline."""
    split = load_split(config)
    train_entries = qa_entries(config, split.training)
    dev_entries = qa_entries(config, split.development)
    if not train_entries or not dev_entries:
        raise CorpusError("fine-tuning needs non-empty training and dev questions")
    vocab, model_cfg, weights, adam, rng, step, train_state, initial_best = (
        _init_stage_state(
            config, STAGE_FINETUNED, init_checkpoint, (STAGE_UOP, STAGE_TMLM),
            lambda: None, out_dir,
        )
    )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        vocab.save(Path(out_dir) / "vocab.txt")
    encoded = [enc for enc, _, _ in _encode_entries(vocab, model_cfg, train_entries)]

    def build_epoch(rng_, epoch_):
        return encoded

    def batch_loss(w, batch, training, rng):
        terms = [joint_loss(w, model_cfg, enc, training=training, rng=rng) for enc in batch]
        return mean(stack(terms))

    def dev_eval(w):
        report = evaluate_entries(w, model_cfg, vocab, dev_entries)
        return {"em": report.em, "sm": report.sm, "um": report.um}

    result = fit(
        run_config=config,
        weights=weights,
        vocab=vocab,
        adam=adam,
        rng=rng,
        global_step=step,
        train_state=train_state,
        build_epoch=build_epoch,
        batch_loss=batch_loss,
        dev_eval=dev_eval,
        improve=_sm_improve,
        max_steps=_stage_budget(config, STAGE_FINETUNED),
        out_dir=out_dir,
        initial_best=initial_best,
        halt_after_epochs=halt_after_epochs,
    )
    return result.best, result.history


SPLIT_NAMES = ("train", "dev", "test")


def run_eval(
    config: RunConfig,
    checkpoint: Checkpoint,
    split_name: str,
    out_dir: str | Path | None = None,
) -> MetricReport:
    """Batch inference + answer selection + metrics on one corpus split;
    optionally writes predictions JSONL and the report."""
    if checkpoint.stage != STAGE_FINETUNED:
        raise SequencingError(
            f"evaluation requires a finetuned checkpoint, got {checkpoint.stage!r}"
        )
    if split_name not in SPLIT_NAMES:
        raise ConfigError(f"split must be one of {SPLIT_NAMES}, got {split_name!r}")
    split = load_split(config)
    part = {
        "train": split.training,
        "dev": split.development,
        "test": split.evaluation,
    }[split_name]
    entries = qa_entries(config, part)
    if not entries:
        raise CorpusError(f"split {split_name!r} has no questions")
    records, golds = predict_entries(
        checkpoint.weights, checkpoint.config, checkpoint.vocab, entries
    )
    report = evaluate(records, golds)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"predictions-{split_name}.jsonl", "w", encoding="utf-8") as f:
            for r in records:
                f.write(r.to_json() + "\n")
        (out / f"report-{split_name}.json").write_text(report.to_json(), encoding="utf-8")
        (out / f"report-{split_name}.txt").write_text(
            report.format_table() + "\n", encoding="utf-8"
        )
    return report

"""Per-mention disambiguation: multiple-choice option scoring, the two-stage
NIL verifier, the joint loss, and the local training loop.

Option encodings inside one mention may run in parallel; the softmax couples
them only at the end. Training sums gradients in a fixed order so a fixed
seed reproduces bitwise-identical parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import encoder as enc
from .config import RunConfig
from .corpus import (
    PAD_ID,
    AnnotatedText,
    Mention,
    Vocabulary,
    assemble_option_sequence,
    assemble_query_sequence,
    build_query,
)
from .encoder import EncoderConfig, EncoderTape
from .errors import ModelConfigError
from .kb import (
    NIL,
    NIL_DESCRIPTION,
    NIL_OPTION,
    AliasIndex,
    CandidateSet,
    Entity,
    KnowledgeBase,
    build_index,
    generate_candidates,
)

CHECKPOINT_FORMAT = "mrclink/1"


@dataclass(frozen=True)
class LocalLossWeights:
    """Answer/NIL loss mix; defaults follow the standard configuration."""

    alpha1: float = 0.75
    alpha2: float = 0.25

    def __post_init__(self) -> None:
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha1 + self.alpha2 <= 0:
            raise ValueError("weights must be non-negative with a positive sum")


@dataclass
class LocalScores:
    """Per-option probabilities and pooled vectors for one mention."""

    option_ids: tuple[str, ...]
    probs: np.ndarray
    pooled: np.ndarray


@dataclass(frozen=True)
class NilJudgement:
    """Probability that the mention is linkable, read from the query alone."""

    prob: float


@dataclass
class ScoreTape:
    enc_tape: EncoderTape
    pooled: np.ndarray
    probs: np.ndarray


@dataclass
class NilTape:
    enc_output: enc.EncoderOutput
    hidden: np.ndarray
    prob: float


def _pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.asarray([len(s) for s in seqs], dtype=np.int64)
    t = int(lengths.max())
    ids = np.full((len(seqs), t), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


@dataclass
class LocalModel:
    """Encoder plus the option-scoring head and NIL-verifier MLP."""

    config: EncoderConfig
    vocab: Vocabulary
    enc_params: dict[str, np.ndarray]
    head: dict[str, np.ndarray]
    nil: dict[str, np.ndarray]
    nil_verifier: bool = True

    @classmethod
    def init(cls, config: EncoderConfig, vocab: Vocabulary, nil_verifier: bool = True) -> "LocalModel":
        if config.vocab_size != len(vocab):
            raise ModelConfigError("encoder vocab_size must match the vocabulary")
        d = config.d
        rng = np.random.default_rng(config.seed + 1_000_003)
        bound = 1.0 / np.sqrt(d)
        head = {"score_w": rng.uniform(-bound, bound, d), "score_b": np.zeros(1)}
        nil = {
            "hidden_w": rng.uniform(-bound, bound, (d, d)),
            "hidden_b": np.zeros(d),
            "out_w": rng.uniform(-bound, bound, d),
            "out_b": np.zeros(1),
        }
        return cls(
            config=config,
            vocab=vocab,
            enc_params=enc.init_params(config),
            head=head,
            nil=nil,
            nil_verifier=nil_verifier,
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat view with ``enc.`` / ``head.`` / ``nil.`` prefixes, in declaration order."""
        out = {f"enc.{k}": v for k, v in self.enc_params.items()}
        out.update({f"head.{k}": v for k, v in self.head.items()})
        out.update({f"nil.{k}": v for k, v in self.nil.items()})
        return out

    def replace_parameters(self, flat: dict[str, np.ndarray]) -> None:
        self.enc_params = {k[4:]: v for k, v in flat.items() if k.startswith("enc.")}
        self.head = {k[5:]: v for k, v in flat.items() if k.startswith("head.")}
        self.nil = {k[4:]: v for k, v in flat.items() if k.startswith("nil.")}


def score_options(
    model: LocalModel,
    candidates: CandidateSet,
    query: str,
    keep_tape: bool = False,
) -> tuple[LocalScores, ScoreTape | None]:
    """Encode every option sequence independently and softmax the head logits."""
    if not candidates.options:
        raise ValueError("candidate set must be non-empty")
    seqs = [
        assemble_option_sequence(e.description, query, e.canonical_name, model.vocab, model.config.max_len).tokens
        for e in candidates.options
    ]
    ids, lengths = _pad_batch(seqs)
    pooled, tape = enc.encode_batch(model.enc_params, model.config, ids, lengths)
    logits = pooled @ model.head["score_w"] + model.head["score_b"][0]
    probs = enc.softmax(logits)
    scores = LocalScores(option_ids=candidates.option_ids, probs=probs, pooled=pooled)
    return scores, (ScoreTape(enc_tape=tape, pooled=pooled, probs=probs) if keep_tape else None)


def answer_loss(scores: LocalScores, gold_index: int) -> tuple[float, np.ndarray]:
    """Cross entropy of the gold option; gradient is probs minus one-hot."""
    return enc.cross_entropy(scores.probs, gold_index)


def nil_stage1(model: LocalModel, query: str, keep_tape: bool = False) -> tuple[NilJudgement, NilTape | None]:
    """Sketchy read of the query alone: sigmoid(MLP(pooled([CLS] Q [SEP])))."""
    seq = assemble_query_sequence(query, model.vocab, model.config.max_len)
    out = enc.encode(model.enc_params, model.config, seq)
    hidden = np.tanh(out.pooled @ model.nil["hidden_w"] + model.nil["hidden_b"])
    logit = float(hidden @ model.nil["out_w"] + model.nil["out_b"][0])
    prob = float(1.0 / (1.0 + np.exp(-logit)))
    judgement = NilJudgement(prob=prob)
    return judgement, (NilTape(enc_output=out, hidden=hidden, prob=prob) if keep_tape else None)


def nil_loss(judgement: NilJudgement, linkable: bool) -> tuple[float, float]:
    """Binary cross entropy; returns the loss and the gradient w.r.t. the pre-sigmoid logit."""
    y = 1.0 if linkable else 0.0
    p = judgement.prob
    loss = -(y * np.log(max(p, 1e-30)) + (1.0 - y) * np.log(max(1.0 - p, 1e-30)))
    return float(loss), p - y


def joint_local_loss(ans: float, nil: float, weights: LocalLossWeights) -> float:
    return weights.alpha1 * ans + weights.alpha2 * nil


def local_predict(
    scores: LocalScores,
    judgement: NilJudgement | None,
    nil_threshold: float = 0.5,
    apply_override: bool = True,
) -> str:
    """Argmax over option probabilities; a confident unlinkable judgement overrides to NIL."""
    selected = scores.option_ids[int(np.argmax(scores.probs))]
    if judgement is not None and apply_override and judgement.prob < nil_threshold:
        return NIL
    return selected


@dataclass
class MentionLocalResult:
    """Everything the downstream passes need about one locally scored mention."""

    mention: Mention
    candidates: CandidateSet
    scores: LocalScores
    nil_prob: float | None
    selected: str
    overridden: bool


def run_local_pass(
    model: LocalModel,
    text: AnnotatedText,
    index: AliasIndex,
    cfg: RunConfig,
) -> list[MentionLocalResult]:
    """Candidate generation plus local scoring and NIL verification for every mention."""
    results = []
    with_nil = model.nil_verifier
    for m in text.mentions:
        cands = generate_candidates(index, m.surface, cfg.k, with_nil=with_nil)
        query = build_query(text, m)
        if not cands.options:
            empty = LocalScores(option_ids=(), probs=np.zeros(0), pooled=np.zeros((0, model.config.d)))
            results.append(
                MentionLocalResult(m, cands, empty, nil_prob=None, selected=NIL, overridden=False)
            )
            continue
        scores, _ = score_options(model, cands, query)
        nil_prob = None
        judgement = None
        if model.nil_verifier:
            judgement, _ = nil_stage1(model, query)
            nil_prob = judgement.prob
        selected = local_predict(
            scores, judgement, nil_threshold=cfg.nil_threshold, apply_override=cfg.nil_override
        )
        overridden = (
            judgement is not None and cfg.nil_override and judgement.prob < cfg.nil_threshold
        )
        results.append(MentionLocalResult(m, cands, scores, nil_prob, selected, overridden))
    return results


def with_gold(candidates: CandidateSet, gold: Entity, k: int) -> CandidateSet:
    """Training-time candidate set with the gold entity guaranteed present.

    When recall misses it, the gold entity replaces the lowest-priority
    candidate, or is appended while the set is not full.
    """
    if candidates.index_of(gold.id) is not None:
        return candidates
    entities = list(candidates.entities)
    if len(entities) >= k:
        entities[-1] = gold
    else:
        entities.append(gold)
    options = tuple(entities) + ((NIL_OPTION,) if candidates.includes_nil else ())
    return CandidateSet(surface=candidates.surface, options=options, includes_nil=candidates.includes_nil)


def _answer_backward(
    model: LocalModel, tape: ScoreTape, dlogits: np.ndarray, scale: float
) -> dict[str, np.ndarray]:
    dlogits = dlogits * scale
    grads = {
        "head.score_w": tape.pooled.T @ dlogits,
        "head.score_b": np.array([dlogits.sum()]),
    }
    dpooled = np.outer(dlogits, model.head["score_w"])
    for k, v in enc.backprop_batch(tape.enc_tape, dpooled).items():
        grads[f"enc.{k}"] = v
    return grads


def _nil_backward(model: LocalModel, tape: NilTape, dlogit: float, scale: float) -> dict[str, np.ndarray]:
    dlogit = dlogit * scale
    hidden = tape.hidden
    grads = {
        "nil.out_w": dlogit * hidden,
        "nil.out_b": np.array([dlogit]),
    }
    dhidden = dlogit * model.nil["out_w"]
    dpre = (1.0 - hidden * hidden) * dhidden
    pooled = tape.enc_output.pooled
    grads["nil.hidden_w"] = np.outer(pooled, dpre)
    grads["nil.hidden_b"] = dpre
    dpooled = model.nil["hidden_w"] @ dpre
    for k, v in enc.backprop(tape.enc_output, dpooled).items():
        grads[f"enc.{k}"] = v
    return grads


def _accumulate(total: dict[str, np.ndarray], part: dict[str, np.ndarray]) -> None:
    for k, v in part.items():
        if k in total:
            total[k] = total[k] + v
        else:
            total[k] = v


def _resolve_gold(m: Mention, kb: KnowledgeBase) -> Entity | None:
    if m.gold is None:
        raise ModelConfigError(f"mention {m.surface!r} has no gold label")
    if m.gold == NIL:
        return None
    if m.gold not in kb:
        raise ModelConfigError(f"gold entity {m.gold!r} missing from the KB")
    return kb.get(m.gold)


def build_vocabulary(corpus: Iterable[AnnotatedText], kb: KnowledgeBase) -> Vocabulary:
    """Vocabulary over KB names/descriptions/aliases and corpus texts, plus the NIL option."""

    def stream():
        yield NIL
        yield NIL_DESCRIPTION
        for ent in kb:
            yield ent.canonical_name
            yield ent.description
            for alias in ent.aliases:
                yield alias
        for text in corpus:
            yield text.text

    return Vocabulary.build(stream())


def train_local(
    corpus: Sequence[AnnotatedText],
    kb: KnowledgeBase,
    cfg: RunConfig,
    log_path: str | None = None,
) -> tuple[LocalModel, list[dict]]:
    """Joint answer + NIL training over all mentions, one Adam step per mention.

    Gold entities absent from the generated candidates are injected. With the
    verifier disabled, unlinkable mentions are skipped (no defined target).
    Returns the trained model and per-epoch log records.
    """
    index = build_index(kb)
    vocab = build_vocabulary(corpus, kb)
    econf = EncoderConfig(
        vocab_size=len(vocab),
        max_len=cfg.max_len_local,
        d=cfg.encoder.d,
        n_layers=cfg.encoder.n_layers,
        n_heads=cfg.encoder.n_heads,
        seed=cfg.seed,
    )
    model = LocalModel.init(econf, vocab, nil_verifier=cfg.nil_verifier)
    weights = LocalLossWeights(cfg.alpha1, cfg.alpha2)

    units: list[tuple[AnnotatedText, Mention]] = [
        (text, m) for text in corpus for m in text.mentions
    ]
    if cfg.nil_verifier:
        train_units = units
    else:
        train_units = [(t, m) for t, m in units if m.gold != NIL]

    total_steps = cfg.epochs_local * len(train_units)
    optimizer = enc.Adam(model.parameters(), cfg.lr_local, cfg.warmup, total_steps)
    rng = np.random.default_rng(cfg.seed)
    logs: list[dict] = []

    for epoch in range(cfg.epochs_local):
        order = rng.permutation(len(train_units))
        losses = []
        n_correct = 0
        nil_pred = nil_gold = nil_hit = 0
        for idx in order:
            text, mention = train_units[idx]
            gold_entity = _resolve_gold(mention, kb)
            linkable = gold_entity is not None
            cands = generate_candidates(index, mention.surface, cfg.k, with_nil=cfg.nil_verifier)
            if linkable:
                cands = with_gold(cands, gold_entity, cfg.k)
                gold_index = cands.index_of(gold_entity.id)
            else:
                gold_index = cands.nil_index
            query = build_query(text, mention)

            scores, tape = score_options(model, cands, query, keep_tape=True)
            l_ans, dlogits = answer_loss(scores, gold_index)
            grads = _answer_backward(model, tape, dlogits, weights.alpha1)

            l_nil = 0.0
            judgement = None
            if cfg.nil_verifier:
                judgement, nil_tape = nil_stage1(model, query, keep_tape=True)
                l_nil, dlogit = nil_loss(judgement, linkable)
                _accumulate(grads, _nil_backward(model, nil_tape, dlogit, weights.alpha2))

            losses.append(joint_local_loss(l_ans, l_nil, weights))

            predicted = local_predict(
                scores, judgement, nil_threshold=cfg.nil_threshold, apply_override=cfg.nil_override
            )
            gold_label = NIL if not linkable else gold_entity.id
            n_correct += predicted == gold_label
            nil_pred += predicted == NIL
            nil_gold += gold_label == NIL
            nil_hit += predicted == NIL and gold_label == NIL

            params = model.parameters()
            for name in params:
                grads.setdefault(name, np.zeros_like(params[name]))
            model.replace_parameters(optimizer.step(params, grads))

        accuracy = n_correct / len(train_units) if train_units else 0.0
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else 0.0,
            "answer_accuracy": accuracy,
            "nil_precision": nil_hit / nil_pred if nil_pred else 0.0,
            "nil_recall": nil_hit / nil_gold if nil_gold else 0.0,
        }
        logs.append(record)
        if cfg.stop_accuracy is not None and accuracy >= cfg.stop_accuracy:
            break

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            for record in logs:
                fh.write(json.dumps(record) + "\n")
    return model, logs


# ----------------------------- checkpoint I/O -----------------------------


def save_local(model: LocalModel, path: str) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": "local",
        "encoder_config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "nil_verifier": model.nil_verifier,
    }
    enc.save_checkpoint(path, header, model.parameters())


def load_local(path: str) -> LocalModel:
    header, tensors = enc.load_checkpoint(path)
    if header.get("format") != CHECKPOINT_FORMAT or header.get("kind") != "local":
        raise ModelConfigError(f"{path}: not a local model checkpoint")
    config = EncoderConfig.from_dict(header["encoder_config"])
    vocab = Vocabulary({t: int(i) for t, i in header["vocab"].items()})
    model = LocalModel(
        config=config,
        vocab=vocab,
        enc_params={},
        head={},
        nil={},
        nil_verifier=bool(header.get("nil_verifier", True)),
    )
    model.replace_parameters(tensors)
    expected = {f"enc.{n}" for n in enc.param_names(config)}
    if not expected <= set(tensors):
        raise ModelConfigError(f"{path}: checkpoint is missing encoder tensors")
    return model

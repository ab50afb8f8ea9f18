"""End-to-end linking: local pass, multi-turn global pass, rear fusion of the
two score vectors, and corpus-level evaluation.

Texts are embarrassingly parallel at inference; the evaluation reducer is an
order-independent sum.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig
from .corpus import AnnotatedText, Mention
from .errors import InputFormatError
from .kb import NIL, AliasIndex, KnowledgeBase, build_index
from .local import LocalModel, run_local_pass
from .multiturn import GlobalModel, MultiTurnResult, run_multi_turn


@dataclass(frozen=True)
class FusionConfig:
    """Weight of the local score in the convex score combination."""

    beta: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")


def rear_fusion(local_probs: np.ndarray, global_probs: np.ndarray, config: FusionConfig) -> np.ndarray:
    """Elementwise beta * local + (1 - beta) * global."""
    local_probs = np.asarray(local_probs, dtype=np.float64)
    global_probs = np.asarray(global_probs, dtype=np.float64)
    if local_probs.shape != global_probs.shape:
        raise ValueError(
            f"score vectors must have equal length, got {local_probs.shape} vs {global_probs.shape}"
        )
    return config.beta * local_probs + (1.0 - config.beta) * global_probs


@dataclass
class LinkDecision:
    """Final outcome for one mention, with every score vector that produced it."""

    mention: Mention
    candidate_ids: tuple[str, ...]
    local_probs: np.ndarray
    global_probs: np.ndarray | None
    fused_probs: np.ndarray | None
    selected: str
    rank: int
    nil_prob: float | None = None

    def to_record(self, text_index: int) -> dict:
        return {
            "text": text_index,
            "span": [self.mention.start, self.mention.end],
            "surface": self.mention.surface,
            "selected": self.selected,
            "rank": self.rank,
            "local": [float(x) for x in self.local_probs],
            "global": None if self.global_probs is None else [float(x) for x in self.global_probs],
            "fused": None if self.fused_probs is None else [float(x) for x in self.fused_probs],
            "candidates": list(self.candidate_ids),
            "nil_prob": self.nil_prob,
        }


def link_text(
    text: AnnotatedText,
    index: AliasIndex,
    local_model: LocalModel,
    global_model: GlobalModel | None,
    cfg: RunConfig,
) -> list[LinkDecision]:
    """Run the full pipeline on one text; decisions come back in text order.

    The first processed mention keeps its local decision and has no global or
    fused scores. Without a global model (or with fewer than two mentions)
    every mention is decided locally.
    """
    local_results = run_local_pass(local_model, text, index, cfg)
    n = len(local_results)
    fusion = FusionConfig(cfg.beta)

    mt: MultiTurnResult | None = None
    if global_model is not None and n >= 2:
        mt = run_multi_turn(text, local_results, global_model, cfg)

    decisions: list[LinkDecision] = []
    rank_of = {}
    if mt is not None:
        rank_of = {idx: turn for turn, idx in enumerate(mt.order)}
    for i, res in enumerate(local_results):
        gscores = mt.global_scores[i] if mt is not None else None
        if gscores is None:
            fused = None
            selected = res.selected
        else:
            fused = rear_fusion(res.scores.probs, gscores.probs, fusion)
            if res.overridden:
                selected = NIL
            elif len(fused):
                selected = res.candidates.option_ids[int(np.argmax(fused))]
            else:
                selected = NIL
        decisions.append(
            LinkDecision(
                mention=res.mention,
                candidate_ids=res.candidates.option_ids,
                local_probs=res.scores.probs,
                global_probs=None if gscores is None else gscores.probs,
                fused_probs=fused,
                selected=selected,
                rank=rank_of.get(i, i),
                nil_prob=res.nil_prob,
            )
        )
    return decisions


def link_corpus(
    corpus: Sequence[AnnotatedText],
    kb: KnowledgeBase,
    local_model: LocalModel,
    global_model: GlobalModel | None,
    cfg: RunConfig,
) -> list[list[LinkDecision]]:
    index = build_index(kb)
    return [link_text(text, index, local_model, global_model, cfg) for text in corpus]


# ----------------------------- evaluation -----------------------------


@dataclass
class EvalReport:
    accuracy: float
    nil_precision: float
    nil_recall: float
    nil_precision_defined: bool
    nil_recall_defined: bool
    by_mention_count: dict[int, float] = field(default_factory=dict)
    n_mentions: int = 0
    n_correct: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "nil_precision": self.nil_precision,
            "nil_recall": self.nil_recall,
            "nil_precision_defined": self.nil_precision_defined,
            "nil_recall_defined": self.nil_recall_defined,
            "by_mention_count": {str(k): v for k, v in sorted(self.by_mention_count.items())},
            "n_mentions": self.n_mentions,
            "n_correct": self.n_correct,
        }


def evaluate(
    corpus: Sequence[AnnotatedText],
    decisions: Sequence[Sequence[LinkDecision]],
) -> EvalReport:
    """Micro accuracy over mentions plus NIL precision/recall and a per-text-size breakdown.

    A mention counts correct iff the selected id equals its gold label (NIL
    included). Undefined NIL ratios are reported as 0.0 with their flag down.
    """
    if len(corpus) != len(decisions):
        raise InputFormatError("decisions do not align with the corpus")
    n_mentions = n_correct = 0
    nil_pred = nil_gold = nil_hit = 0
    per_count: dict[int, list[int]] = {}
    for text, decs in zip(corpus, decisions):
        if len(text.mentions) != len(decs):
            raise InputFormatError("decision list does not match the text's mentions")
        bucket = per_count.setdefault(len(text.mentions), [0, 0])
        for mention, dec in zip(text.mentions, decs):
            if mention.gold is None:
                raise InputFormatError(f"mention {mention.surface!r} has no gold label")
            if dec.mention.span != mention.span:
                raise InputFormatError("decision span does not match the corpus mention")
            n_mentions += 1
            ok = dec.selected == mention.gold
            n_correct += ok
            bucket[0] += ok
            bucket[1] += 1
            nil_pred += dec.selected == NIL
            nil_gold += mention.gold == NIL
            nil_hit += dec.selected == NIL and mention.gold == NIL
    return EvalReport(
        accuracy=n_correct / n_mentions if n_mentions else 0.0,
        nil_precision=nil_hit / nil_pred if nil_pred else 0.0,
        nil_recall=nil_hit / nil_gold if nil_gold else 0.0,
        nil_precision_defined=nil_pred > 0,
        nil_recall_defined=nil_gold > 0,
        by_mention_count={k: c / t for k, (c, t) in sorted(per_count.items())},
        n_mentions=n_mentions,
        n_correct=n_correct,
    )


# ----------------------------- decisions file I/O -----------------------------


def save_decisions(decisions: Sequence[Sequence[LinkDecision]], path: str) -> None:
    """Line-delimited JSON, one record per mention, in corpus order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for text_index, decs in enumerate(decisions):
            for dec in decs:
                fh.write(json.dumps(dec.to_record(text_index), ensure_ascii=False) + "\n")


def load_decisions(path: str, corpus: Sequence[AnnotatedText]) -> list[list[LinkDecision]]:
    """Re-attach a decisions file to its corpus, matching by text index and span."""
    per_text: list[list[LinkDecision]] = [[] for _ in corpus]
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                ti = int(rec["text"])
                start, end = (int(x) for x in rec["span"])
                if not 0 <= ti < len(corpus):
                    raise ValueError(f"text index {ti} out of range")
                mention = next(
                    (m for m in corpus[ti].mentions if m.span == (start, end)), None
                )
                if mention is None:
                    raise ValueError(f"no mention at span ({start}, {end}) in text {ti}")
                dec = LinkDecision(
                    mention=mention,
                    candidate_ids=tuple(rec.get("candidates", [])),
                    local_probs=np.asarray(rec.get("local", []), dtype=np.float64),
                    global_probs=None
                    if rec.get("global") is None
                    else np.asarray(rec["global"], dtype=np.float64),
                    fused_probs=None
                    if rec.get("fused") is None
                    else np.asarray(rec["fused"], dtype=np.float64),
                    selected=str(rec["selected"]),
                    rank=int(rec.get("rank", 0)),
                    nil_prob=rec.get("nil_prob"),
                )
                per_text[ti].append(dec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputFormatError(f"{path}:{lineno}: bad decision record: {exc}") from exc
    for ti, decs in enumerate(per_text):
        order = {m.span: i for i, m in enumerate(corpus[ti].mentions)}
        decs.sort(key=lambda d: order[d.mention.span])
    return per_text

"""Sequential global disambiguation: ambiguity ranking, the gated history
fusion network, per-turn global scoring, and teacher-forced training.

The turn loop inside one text is strictly sequential; texts are independent
and may run in parallel with identical per-text results.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import encoder as enc
from .config import RunConfig
from .corpus import (
    AnnotatedText,
    Mention,
    Vocabulary,
    assemble_option_sequence,
    build_query,
    update_query,
)
from .encoder import EncoderConfig, EncoderTape
from .errors import ModelConfigError
from .kb import NIL, CandidateSet, Entity, KnowledgeBase, build_index, generate_candidates
from .local import (
    CHECKPOINT_FORMAT,
    LocalModel,
    MentionLocalResult,
    _accumulate,
    _pad_batch,
    _resolve_gold,
    run_local_pass,
    with_gold,
)

GATE_PARAM_NAMES = ("update_w", "fuse_w", "keep_cur_w", "keep_hist_w")


@dataclass(frozen=True)
class AmbiguityRank:
    """Mention processing order, most confident first; ties keep text order."""

    order: tuple[int, ...]
    gaps: tuple[float, ...]


def rank_mentions(prob_vectors: Sequence[np.ndarray]) -> AmbiguityRank:
    """Sort mentions by descending spread (max minus min) of their option probabilities."""
    gaps = tuple(
        float(np.max(p) - np.min(p)) if len(p) else 0.0 for p in prob_vectors
    )
    order = tuple(sorted(range(len(gaps)), key=lambda i: -gaps[i]))
    return AmbiguityRank(order=order, gaps=gaps)


# ----------------------------- gated history fusion -----------------------------


def init_gate_params(d: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    return {
        "update_w": rng.uniform(-bound, bound, (d, 2 * d)),
        "fuse_w": rng.uniform(-bound, bound, (d, 2 * d)),
        "keep_cur_w": rng.uniform(-bound, bound, (d, d)),
        "keep_hist_w": rng.uniform(-bound, bound, (d, d)),
    }


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GateFusion:
    """Fused vectors plus the gate diagnostics (None outside gated mode)."""

    fused: np.ndarray
    update_gate: np.ndarray | None
    fusion: np.ndarray | None
    keep_gate: np.ndarray | None
    _cache: dict = field(default_factory=dict, repr=False)


def gate_fuse_batch(
    current: np.ndarray,
    history: np.ndarray,
    gate: Mapping[str, np.ndarray],
    mode: str = "gated",
) -> GateFusion:
    """Blend each current option vector with the shared history vector.

    gated:  u = sigmoid(Wu [v; h]); f = tanh(Wf [u*h; v]);
            g = sigmoid(Wc v + Wh h); fused = g*f + (1-g)*h.
    concat: fused = tanh(Wf [v; h]).
    """
    v = np.atleast_2d(np.asarray(current, dtype=np.float64))
    h = np.asarray(history, dtype=np.float64)
    b, d = v.shape
    if h.shape != (d,):
        raise ValueError(f"history must have shape ({d},)")
    hb = np.broadcast_to(h, (b, d))
    if mode == "gated":
        cat_vh = np.concatenate([v, hb], axis=1)
        u = _sigmoid(cat_vh @ gate["update_w"].T)
        cat_uh_v = np.concatenate([u * hb, v], axis=1)
        f = np.tanh(cat_uh_v @ gate["fuse_w"].T)
        g = _sigmoid(v @ gate["keep_cur_w"].T + h @ gate["keep_hist_w"].T)
        fused = g * f + (1.0 - g) * hb
        cache = {"v": v, "h": h, "u": u, "f": f, "g": g, "cat_vh": cat_vh, "cat_uh_v": cat_uh_v}
        return GateFusion(fused=fused, update_gate=u, fusion=f, keep_gate=g, _cache=cache)
    if mode == "concat":
        cat_vh = np.concatenate([v, hb], axis=1)
        fused = np.tanh(cat_vh @ gate["fuse_w"].T)
        cache = {"v": v, "h": h, "fused": fused, "cat_vh": cat_vh}
        return GateFusion(fused=fused, update_gate=None, fusion=None, keep_gate=None, _cache=cache)
    if mode == "gru_like":
        raise NotImplementedError(
            "gate_mode='gru_like' is a documented stub; use 'gated' or 'concat'"
        )
    raise ValueError(f"unknown gate mode {mode!r}")


def gate_fuse(
    current: np.ndarray,
    history: np.ndarray,
    gate: Mapping[str, np.ndarray],
    mode: str = "gated",
) -> GateFusion:
    """Single-vector convenience wrapper around ``gate_fuse_batch``."""
    out = gate_fuse_batch(current[None, :], history, gate, mode)
    return GateFusion(
        fused=out.fused[0],
        update_gate=None if out.update_gate is None else out.update_gate[0],
        fusion=None if out.fusion is None else out.fusion[0],
        keep_gate=None if out.keep_gate is None else out.keep_gate[0],
        _cache=out._cache,
    )


def gate_backward(
    fusion: GateFusion,
    dfused: np.ndarray,
    gate: Mapping[str, np.ndarray],
    mode: str = "gated",
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Gradients of the fused output w.r.t. current vectors, history, and gate weights."""
    c = fusion._cache
    dfused = np.atleast_2d(np.asarray(dfused, dtype=np.float64))
    d = dfused.shape[1]
    grads = {k: np.zeros_like(v) for k, v in gate.items()}
    if mode == "concat":
        ds = (1.0 - c["fused"] * c["fused"]) * dfused
        grads["fuse_w"] += ds.T @ c["cat_vh"]
        dcat = ds @ gate["fuse_w"]
        return dcat[:, :d], dcat[:, d:].sum(axis=0), grads
    if mode != "gated":
        raise ValueError(f"no backward pass for gate mode {mode!r}")

    v, h, u, f, g = c["v"], c["h"], c["u"], c["f"], c["g"]
    b = v.shape[0]
    hb = np.broadcast_to(h, (b, d))

    dg = (f - hb) * dfused
    df = g * dfused
    dh_rows = (1.0 - g) * dfused

    # keep gate: g = sigmoid(Wc v + Wh h)
    dsg = g * (1.0 - g) * dg
    grads["keep_cur_w"] += dsg.T @ v
    grads["keep_hist_w"] += dsg.sum(axis=0)[:, None] * h[None, :]
    dv = dsg @ gate["keep_cur_w"]
    dh = dsg.sum(axis=0) @ gate["keep_hist_w"]

    # fusion: f = tanh(Wf [u*h; v])
    dsf = (1.0 - f * f) * df
    grads["fuse_w"] += dsf.T @ c["cat_uh_v"]
    dcat = dsf @ gate["fuse_w"]
    duh = dcat[:, :d]
    dv += dcat[:, d:]
    du = duh * hb
    dh_rows = dh_rows + duh * u

    # update gate: u = sigmoid(Wu [v; h])
    dsu = u * (1.0 - u) * du
    grads["update_w"] += dsu.T @ c["cat_vh"]
    dcat2 = dsu @ gate["update_w"]
    dv += dcat2[:, :d]
    dh_rows = dh_rows + dcat2[:, d:]

    dh = dh + dh_rows.sum(axis=0)
    return dv, dh, grads


# ----------------------------- global model -----------------------------


@dataclass
class GlobalModel:
    """Own encoder plus the gate network and global scoring head."""

    config: EncoderConfig
    vocab: Vocabulary
    enc_params: dict[str, np.ndarray]
    gate: dict[str, np.ndarray]
    head: dict[str, np.ndarray]
    gate_mode: str = "gated"
    history_mode: str = "flow"
    nil_verifier: bool = True

    @classmethod
    def from_local(
        cls,
        local: LocalModel,
        max_len: int | None = None,
        gate_mode: str = "gated",
        history_mode: str = "flow",
    ) -> "GlobalModel":
        """Start from the trained local encoder; the gate and head are fresh."""
        max_len = local.config.max_len if max_len is None else max_len
        config = EncoderConfig(
            vocab_size=local.config.vocab_size,
            max_len=max_len,
            d=local.config.d,
            n_layers=local.config.n_layers,
            n_heads=local.config.n_heads,
            seed=local.config.seed,
        )
        enc_params = {k: v.copy() for k, v in local.enc_params.items()}
        if max_len > local.config.max_len:
            rng = np.random.default_rng(config.seed + 3_000_017)
            bound = 1.0 / np.sqrt(config.d)
            extra = rng.uniform(-bound, bound, (max_len - local.config.max_len, config.d))
            enc_params["pos_emb"] = np.vstack([enc_params["pos_emb"], extra])
        elif max_len < local.config.max_len:
            enc_params["pos_emb"] = enc_params["pos_emb"][:max_len].copy()
        rng = np.random.default_rng(config.seed + 2_000_003)
        bound = 1.0 / np.sqrt(config.d)
        head = {"score_w": rng.uniform(-bound, bound, config.d), "score_b": np.zeros(1)}
        return cls(
            config=config,
            vocab=local.vocab,
            enc_params=enc_params,
            gate=init_gate_params(config.d, config.seed + 2_000_033),
            head=head,
            gate_mode=gate_mode,
            history_mode=history_mode,
            nil_verifier=local.nil_verifier,
        )

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.enc_params.items()}
        out.update({f"gate.{k}": v for k, v in self.gate.items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def replace_parameters(self, flat: dict[str, np.ndarray]) -> None:
        self.enc_params = {k[4:]: v for k, v in flat.items() if k.startswith("enc.")}
        self.gate = {k[5:]: v for k, v in flat.items() if k.startswith("gate.")}
        self.head = {k[5:]: v for k, v in flat.items() if k.startswith("head.")}


@dataclass
class GlobalScores:
    """Per-option global probabilities plus raw and fused option vectors."""

    option_ids: tuple[str, ...]
    probs: np.ndarray
    raw: np.ndarray
    fused: np.ndarray


@dataclass
class GlobalTape:
    enc_tape: EncoderTape
    gate_fusion: GateFusion
    raw: np.ndarray
    fused: np.ndarray
    probs: np.ndarray


def encode_option_vector(model: GlobalModel, entity: Entity, query: str) -> np.ndarray:
    """Pooled representation of one option sequence under the global encoder."""
    seq = assemble_option_sequence(
        entity.description, query, entity.canonical_name, model.vocab, model.config.max_len
    )
    return enc.encode(model.enc_params, model.config, seq).pooled


def global_score_mention(
    model: GlobalModel,
    candidates: CandidateSet,
    query: str,
    history: np.ndarray,
    keep_tape: bool = False,
) -> tuple[GlobalScores, GlobalTape | None]:
    """Encode options against the updated query, fuse with history, and softmax."""
    if not candidates.options:
        raise ValueError("candidate set must be non-empty")
    seqs = [
        assemble_option_sequence(e.description, query, e.canonical_name, model.vocab, model.config.max_len).tokens
        for e in candidates.options
    ]
    ids, lengths = _pad_batch(seqs)
    raw, tape = enc.encode_batch(model.enc_params, model.config, ids, lengths)
    fusion = gate_fuse_batch(raw, history, model.gate, model.gate_mode)
    logits = fusion.fused @ model.head["score_w"] + model.head["score_b"][0]
    probs = enc.softmax(logits)
    scores = GlobalScores(option_ids=candidates.option_ids, probs=probs, raw=raw, fused=fusion.fused)
    if not keep_tape:
        return scores, None
    return scores, GlobalTape(enc_tape=tape, gate_fusion=fusion, raw=raw, fused=fusion.fused, probs=probs)


def global_loss(scores: GlobalScores, gold_index: int) -> tuple[float, np.ndarray]:
    """Cross entropy over the global option probabilities."""
    return enc.cross_entropy(scores.probs, gold_index)


def global_backward(
    model: GlobalModel, tape: GlobalTape, dlogits: np.ndarray, scale: float = 1.0
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backward through head, gate, and encoder; also returns the history gradient."""
    dlogits = dlogits * scale
    grads: dict[str, np.ndarray] = {
        "head.score_w": tape.fused.T @ dlogits,
        "head.score_b": np.array([dlogits.sum()]),
    }
    dfused = np.outer(dlogits, model.head["score_w"])
    draw, dhistory, gate_grads = gate_backward(tape.gate_fusion, dfused, model.gate, model.gate_mode)
    for k, v in gate_grads.items():
        grads[f"gate.{k}"] = v
    for k, v in enc.backprop_batch(tape.enc_tape, draw).items():
        grads[f"enc.{k}"] = v
    return grads, dhistory


# ----------------------------- multi-turn inference -----------------------------


@dataclass
class MultiTurnResult:
    """Per-mention global scores (None for the first turn) and the history trace."""

    order: tuple[int, ...]
    gaps: tuple[float, ...]
    global_scores: list[GlobalScores | None]
    turn_selected: list[str | None]
    history_trace: list[np.ndarray]


def run_multi_turn(
    text: AnnotatedText,
    local_results: Sequence[MentionLocalResult],
    model: GlobalModel,
    cfg: RunConfig,
) -> MultiTurnResult:
    """Process mentions in ambiguity order, feeding each turn the previous links.

    The first turn keeps its local decision and seeds the history vector;
    later turns are scored globally against the updated query. NIL selections
    (including verifier overrides) contribute no name substitution and leave
    the history unchanged.
    """
    n = len(local_results)
    if cfg.no_rerank:
        order, gaps = tuple(range(n)), tuple(0.0 for _ in range(n))
    else:
        ranked = rank_mentions([r.scores.probs for r in local_results])
        order, gaps = ranked.order, ranked.gaps

    d = model.config.d
    history = np.zeros(d)
    trace: list[np.ndarray] = []
    linked: dict[Mention, Entity | None] = {}
    global_scores: list[GlobalScores | None] = [None] * n
    turn_selected: list[str | None] = [None] * n

    by_id = {}
    for r in local_results:
        for ent in r.candidates.options:
            by_id[ent.id] = ent

    for turn, idx in enumerate(order):
        res = local_results[idx]
        if turn == 0:
            selected = res.selected
            turn_selected[idx] = selected
            if selected != NIL:
                entity = by_id[selected]
                history = encode_option_vector(model, entity, build_query(text, res.mention))
                linked[res.mention] = entity
            else:
                linked[res.mention] = None
            trace.append(history.copy())
            continue

        if not res.candidates.options:
            turn_selected[idx] = NIL
            linked[res.mention] = None
            trace.append(history.copy())
            continue

        if cfg.no_query_update:
            query = build_query(text, res.mention)
        else:
            query = update_query(text, res.mention, linked)
        scores, _ = global_score_mention(model, res.candidates, query, history)
        global_scores[idx] = scores

        if res.overridden:
            selected = NIL
        else:
            selected = scores.option_ids[int(np.argmax(scores.probs))]
        turn_selected[idx] = selected
        if selected != NIL:
            j = res.candidates.index_of(selected)
            entity = by_id[selected]
            history = scores.fused[j].copy() if cfg.history_mode == "flow" else scores.raw[j].copy()
            linked[res.mention] = entity
        else:
            linked[res.mention] = None
        trace.append(history.copy())

    return MultiTurnResult(
        order=order,
        gaps=gaps,
        global_scores=global_scores,
        turn_selected=turn_selected,
        history_trace=trace,
    )


# ----------------------------- teacher-forced training -----------------------------


def train_global(
    corpus: Sequence[AnnotatedText],
    kb: KnowledgeBase,
    local_model: LocalModel,
    cfg: RunConfig,
    log_path: str | None = None,
) -> tuple[GlobalModel, list[dict]]:
    """Train the global pass with gold entities driving query updates and history.

    The local model stays frozen: it only supplies the processing order. Each
    text contributes the mean of its per-turn losses to one Adam step.
    """
    index = build_index(kb)
    model = GlobalModel.from_local(
        local_model,
        max_len=cfg.max_len_global,
        gate_mode=cfg.gate_mode,
        history_mode=cfg.history_mode,
    )

    multi = [t for t in corpus if len(t.mentions) >= 2]
    orders: list[tuple[int, ...]] = []
    for text in multi:
        if cfg.no_rerank:
            orders.append(tuple(range(len(text.mentions))))
        else:
            local_results = run_local_pass(local_model, text, index, cfg)
            orders.append(rank_mentions([r.scores.probs for r in local_results]).order)

    total_steps = cfg.epochs_global * len(multi)
    optimizer = enc.Adam(model.parameters(), cfg.lr_global, cfg.warmup, total_steps)
    rng = np.random.default_rng(cfg.seed + 7)
    logs: list[dict] = []

    for epoch in range(cfg.epochs_global):
        perm = rng.permutation(len(multi))
        losses: list[float] = []
        n_scored = n_correct = 0
        for ti in perm:
            text = multi[ti]
            order = orders[ti]
            history = np.zeros(model.config.d)
            linked: dict[Mention, Entity | None] = {}
            turn_grads: dict[str, np.ndarray] = {}
            turn_losses: list[float] = []

            for turn, mi in enumerate(order):
                mention = text.mentions[mi]
                gold_entity = _resolve_gold(mention, kb)
                if turn == 0:
                    if gold_entity is not None:
                        history = encode_option_vector(model, gold_entity, build_query(text, mention))
                        linked[mention] = gold_entity
                    else:
                        linked[mention] = None
                    continue

                cands = generate_candidates(index, mention.surface, cfg.k, with_nil=cfg.nil_verifier)
                if gold_entity is not None:
                    cands = with_gold(cands, gold_entity, cfg.k)
                    gold_index = cands.index_of(gold_entity.id)
                elif cands.includes_nil:
                    gold_index = cands.nil_index
                else:
                    linked[mention] = None
                    continue

                if cfg.no_query_update:
                    query = build_query(text, mention)
                else:
                    query = update_query(text, mention, linked)
                scores, tape = global_score_mention(model, cands, query, history, keep_tape=True)
                loss, dlogits = global_loss(scores, gold_index)
                turn_losses.append(loss)
                grads, _ = global_backward(model, tape, dlogits)
                _accumulate(turn_grads, grads)

                n_scored += 1
                n_correct += int(np.argmax(scores.probs)) == gold_index

                if gold_entity is not None:
                    j = gold_index
                    history = (
                        scores.fused[j].copy() if cfg.history_mode == "flow" else scores.raw[j].copy()
                    )
                    linked[mention] = gold_entity
                else:
                    linked[mention] = None

            if not turn_losses:
                continue
            inv = 1.0 / len(turn_losses)
            params = model.parameters()
            grads_full = {
                name: turn_grads[name] * inv if name in turn_grads else np.zeros_like(value)
                for name, value in params.items()
            }
            model.replace_parameters(optimizer.step(params, grads_full))
            losses.append(float(np.mean(turn_losses)))

        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else 0.0,
            "answer_accuracy": n_correct / n_scored if n_scored else 0.0,
        }
        logs.append(record)

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            for record in logs:
                fh.write(json.dumps(record) + "\n")
    return model, logs


# ----------------------------- checkpoint I/O -----------------------------


def save_global(model: GlobalModel, path: str) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": "global",
        "encoder_config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "gate_mode": model.gate_mode,
        "history_mode": model.history_mode,
        "nil_verifier": model.nil_verifier,
    }
    enc.save_checkpoint(path, header, model.parameters())


def load_global(path: str) -> GlobalModel:
    header, tensors = enc.load_checkpoint(path)
    if header.get("format") != CHECKPOINT_FORMAT or header.get("kind") != "global":
        raise ModelConfigError(f"{path}: not a global model checkpoint")
    config = EncoderConfig.from_dict(header["encoder_config"])
    vocab = Vocabulary({t: int(i) for t, i in header["vocab"].items()})
    model = GlobalModel(
        config=config,
        vocab=vocab,
        enc_params={},
        gate={},
        head={},
        gate_mode=str(header.get("gate_mode", "gated")),
        history_mode=str(header.get("history_mode", "flow")),
        nil_verifier=bool(header.get("nil_verifier", True)),
    )
    model.replace_parameters(tensors)
    missing = {f"gate.{n}" for n in GATE_PARAM_NAMES} - set(tensors)
    if missing:
        raise ModelConfigError(f"{path}: checkpoint is missing gate tensors {sorted(missing)}")
    return model

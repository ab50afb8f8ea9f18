"""Short-text entity linking.

Alias-dictionary candidate generation, multiple-choice local disambiguation
with a two-stage NIL verifier, gated multi-turn global disambiguation, and a
convex rear fusion of the two score vectors. Ships with a small trainable
reference encoder (exact analytic gradients) so the whole pipeline runs and
trains at desk scale.
"""

from .config import EncoderSettings, RunConfig
from .corpus import (
    AnnotatedText,
    Mention,
    TokenSequence,
    Vocabulary,
    assemble_option_sequence,
    build_query,
    detokenize,
    load_corpus,
    save_corpus,
    tokenize,
    update_query,
)
from .encoder import (
    Adam,
    AdamState,
    EncoderConfig,
    EncoderOutput,
    adam_step,
    backprop,
    encode,
    init_adam_state,
    init_params,
)
from .errors import InputFormatError, ModelConfigError, SequenceOverflowError
from .kb import (
    NIL,
    AliasIndex,
    CandidateSet,
    Entity,
    KnowledgeBase,
    build_index,
    generate_candidates,
    load_kb,
    normalize_surface,
    prior_baseline,
    save_kb,
)
from .local import (
    LocalLossWeights,
    LocalModel,
    LocalScores,
    NilJudgement,
    answer_loss,
    joint_local_loss,
    load_local,
    local_predict,
    nil_loss,
    nil_stage1,
    save_local,
    score_options,
    train_local,
)
from .multiturn import (
    AmbiguityRank,
    GlobalModel,
    GlobalScores,
    gate_fuse,
    global_loss,
    global_score_mention,
    load_global,
    rank_mentions,
    run_multi_turn,
    save_global,
    train_global,
)
from .pipeline import (
    EvalReport,
    FusionConfig,
    LinkDecision,
    evaluate,
    link_corpus,
    link_text,
    rear_fusion,
)
from .synth import SynthSpec, SynthWorld, generate_synthetic_world

__version__ = "0.1.0"

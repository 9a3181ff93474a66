"""Session-log positive mining and tiered contrastive training for retrieval."""

from .corpus import (
    LABEL_OF_SOURCE,
    EventKind,
    LabeledSample,
    LogFormatError,
    SampleSource,
    SessionEvent,
    TrainingGroup,
    VideoDoc,
    doc_text,
)
from .discriminator import RelevanceScorer
from .encoder import EncoderParams, HashingTokenizer, init_params, load_params, save_params
from .engine import (
    MiningConfig,
    ReformulationPair,
    assemble_group,
    detect_reformulations,
    emit_prompt,
    ingest_world_knowledge,
    mine_query_level,
    mine_search_system,
    mine_system_level,
)
from .evaluation import (
    AnnotatedSplit,
    EvalReport,
    EvalSplit,
    build_splits,
    evaluate,
    ndcg_at_k,
    recall_at_k,
    retrieve_topk,
)
from .logsim import WorldSpec, generate_world, simulate_sessions
from .trainer import (
    Batch,
    DualEncoder,
    TrainConfig,
    build_mask,
    h_infonce_masked,
    h_infonce_naive,
    infonce_baseline,
    similarity_matrix,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "LABEL_OF_SOURCE",
    "EventKind",
    "LabeledSample",
    "LogFormatError",
    "SampleSource",
    "SessionEvent",
    "TrainingGroup",
    "VideoDoc",
    "doc_text",
    "RelevanceScorer",
    "EncoderParams",
    "HashingTokenizer",
    "init_params",
    "load_params",
    "save_params",
    "MiningConfig",
    "ReformulationPair",
    "assemble_group",
    "detect_reformulations",
    "emit_prompt",
    "ingest_world_knowledge",
    "mine_query_level",
    "mine_search_system",
    "mine_system_level",
    "AnnotatedSplit",
    "EvalReport",
    "EvalSplit",
    "build_splits",
    "evaluate",
    "ndcg_at_k",
    "recall_at_k",
    "retrieve_topk",
    "WorldSpec",
    "generate_world",
    "simulate_sessions",
    "Batch",
    "DualEncoder",
    "TrainConfig",
    "build_mask",
    "h_infonce_masked",
    "h_infonce_naive",
    "infonce_baseline",
    "similarity_matrix",
    "train",
]

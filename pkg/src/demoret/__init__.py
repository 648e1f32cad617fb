"""demoret: multi-task demonstration retrieval for in-context learning."""

from .corpus import (
    DatasetRegistry,
    Example,
    TaskSampler,
    TaskSpec,
    TemplateSpec,
    build_sampler,
    load_jsonl,
    load_registry,
    render_demo,
    render_query,
    sample_batch,
)
from .bm25 import InvertedIndex, bm25_top_k, build_index, init_candidates
from .feedback import (
    CandidateSet,
    NGramScorer,
    OracleScorer,
    RemoteScorer,
    ScoreCache,
    ScoredCandidate,
    Scorer,
    rank_candidates,
    score_candidate_set,
    score_cls,
    score_gen,
)
from .encoder import (
    BiEncoderParams,
    Vocabulary,
    build_vocab,
    encode,
    encode_corpus,
    init_params,
    load_checkpoint,
    params_fingerprint,
    save_checkpoint,
    similarity,
)
from .trainer import (
    TrainConfig,
    TrainReport,
    loss_inbatch,
    loss_rank,
    loss_total,
    mine_candidates,
    train,
    train_step,
)
from .dense_index import DenseIndex
from .pipeline import (
    EvalResult,
    PromptPlan,
    assemble_prompt,
    evaluate,
    order_demonstrations,
    retrieve,
    select_demonstrations,
)

__version__ = "0.1.0"

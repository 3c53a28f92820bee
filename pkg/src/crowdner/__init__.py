"""Annotator-aware representation learning for crowdsourced sequence labeling."""

from .config import TrainConfig
from .corpus import (
    EXPERT,
    AnnotatorProfile,
    CorpusError,
    CrowdCorpus,
    EntitySpan,
    Sentence,
    extract_spans,
    load_corpus,
    make_tagset,
    parse_corpus,
    repair_bio,
    save_corpus,
    split_corpus,
    synth_generate,
    tags_from_spans,
    template_corpus,
    write_corpus,
)
from .crowd import (
    FilterResult,
    TrainInstance,
    TrainingMode,
    annotator_quality,
    build_instances,
    expert_centroid,
    filter_annotators,
    majority_vote,
    select_informative,
)
from .encoder import (
    AdapterManifest,
    AdapterTensors,
    FrozenEncoder,
    Vocab,
    adapter_forward,
    base_encode,
    build_vocab,
    pack_params,
    pgn_generate,
    unpack_params,
)
from .evaluation import ScoreReport, evaluate, export_embeddings, paired_t_test, pca_project
from .model import AnnotatorTagger, build_model, decode_corpus, inference_embedding
from .training import (
    CheckpointError,
    NumericalError,
    TrainResult,
    adam_step,
    clip_gradients,
    compute_gradients,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    timestep_dropout,
    train,
)

__version__ = "0.1.0"

"""Desk-scale end-to-end multimodal pretraining on CNN grid features with
object-knowledge distillation, validated on synthetic grounded corpora."""

from .corpus import (
    DetectorAnnotation,
    ImageTextPair,
    ObjectProposal,
    SyntheticSceneSpec,
    extract_noun_phrases,
    generate_synthetic,
    load_corpus,
    save_corpus,
)
from .encoder import Vocabulary, build_vocab, sine_position_2d, tokenize
from .knowledge import (
    BinaryMask,
    SimilarityMatrix,
    hash_embedder,
    masking_distribution,
    phrase_label_similarity,
    rasterize_mask,
)
from .model import PretrainModel
from .pretext import (
    LossReport,
    itm_loss,
    mlm_loss,
    omvm_loss,
    pra_loss,
    sample_task,
)
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "BinaryMask",
    "DetectorAnnotation",
    "ImageTextPair",
    "LossReport",
    "ObjectProposal",
    "PretrainModel",
    "SimilarityMatrix",
    "SyntheticSceneSpec",
    "TrainConfig",
    "Vocabulary",
    "build_vocab",
    "extract_noun_phrases",
    "generate_synthetic",
    "hash_embedder",
    "itm_loss",
    "load_checkpoint",
    "load_corpus",
    "masking_distribution",
    "mlm_loss",
    "omvm_loss",
    "phrase_label_similarity",
    "pra_loss",
    "rasterize_mask",
    "sample_task",
    "save_checkpoint",
    "save_corpus",
    "sine_position_2d",
    "tokenize",
    "train",
]

__version__ = "0.1.0"

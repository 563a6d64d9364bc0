"""Heterogeneous visual search at desk scale: compatible query embeddings,
compatibility-aware architecture search and retrieval evaluation."""

__version__ = "0.1.0"

from .data import (LabeledDataset, OpenSetSplit, generate_synthetic, load_dataset, load_split,
                   make_open_set_split, save_dataset, save_split)
from .losses import (Classifier, CompositeWeights, bct_composite_loss, cosine_margin_loss, kd_composite_loss,
                     kd_loss, norm_softmax_loss)
from .nn import EmbeddingModel, count_flops
from .retrieval import (amortized_cost, check_compatibility, evaluate_pair, tar_at_far, topk_accuracy,
                        tpir_at_fpir)
from .search import EvolutionConfig, evaluate_reward, evolve
from .supernet import ArchDescriptor, SearchSpace, SuperNet, sample_uniform, train_supernet
from .train import ModelShape, PruneSpec, TrainRecipe, prune_model, train_gallery, train_query

__all__ = [
    "ArchDescriptor",
    "Classifier",
    "CompositeWeights",
    "EmbeddingModel",
    "EvolutionConfig",
    "LabeledDataset",
    "ModelShape",
    "OpenSetSplit",
    "PruneSpec",
    "SearchSpace",
    "SuperNet",
    "TrainRecipe",
    "amortized_cost",
    "bct_composite_loss",
    "check_compatibility",
    "cosine_margin_loss",
    "count_flops",
    "evaluate_pair",
    "evaluate_reward",
    "evolve",
    "generate_synthetic",
    "kd_composite_loss",
    "kd_loss",
    "load_dataset",
    "load_split",
    "make_open_set_split",
    "norm_softmax_loss",
    "prune_model",
    "sample_uniform",
    "save_dataset",
    "save_split",
    "tar_at_far",
    "topk_accuracy",
    "tpir_at_fpir",
    "train_gallery",
    "train_query",
    "train_supernet",
]

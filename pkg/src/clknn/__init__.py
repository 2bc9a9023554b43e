"""Contrastive-adapter kNN retrieval: datastores, hard-negative training and exact search."""

from clknn.adapter import AdapterParams, ContrastiveAdapter, TrainConfig, ffn_forward, train_adapter
from clknn.datastore import ClusterIndex, Datastore, load_datastore, partition_clusters, save_datastore
from clknn.projection import PCANormalizer, PcaModel, fit_pca, project_normalize
from clknn.retrieval import KNNRetriever, RetrievalConfig, knn_search, knn_search_batch
from clknn.sampler import SamplerConfig, mine_hard_negatives
from clknn.synthbench import SynthConfig, ToyPredictor, evaluate_pipeline, generate_synth

__version__ = "0.1.0"

__all__ = [
    "AdapterParams", "ClusterIndex", "ContrastiveAdapter", "Datastore", "KNNRetriever",
    "PCANormalizer", "PcaModel", "RetrievalConfig", "SamplerConfig", "SynthConfig",
    "ToyPredictor", "TrainConfig", "evaluate_pipeline", "ffn_forward", "fit_pca",
    "generate_synth", "knn_search", "knn_search_batch", "load_datastore", "mine_hard_negatives",
    "partition_clusters", "project_normalize", "save_datastore", "train_adapter",
]

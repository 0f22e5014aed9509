"""Heterogeneous graph representation learning with numpy.

Graph storage and pruning, personalized-PageRank neighbor sampling, a
feature store, count-min sketches, sampled-softmax losses, a transformer
encoder with hand-written gradients, training, inference and a TCP
sampling service.
"""

from .errors import (HetrepError, IntegrityError, NotFoundError, NumericError, ProtocolError, SchemaError,
                     StateError, ValidationError)
from .schema import FeatureSpec, NodeRef, Schema
from .graph import EdgeRecord, HeteroGraph, PruneConfig, build_graph, load_snapshot, prune_graph, save_snapshot
from .sampler import Neighborhood, SamplingConfig, exact_rwr, forward_push, sample_neighborhood
from .features import FeatureRecord, FeatureStore, write_store
from .sketch import CountMinSketch
from .model import Model, ModelConfig
from .trainer import TrainConfig, Trainer, prepare_data, train_loop
from .infer import EmbeddingTable, batch_infer, recall_at_k
from .world import SyntheticWorld, generate_synthetic_world

__version__ = "0.1.0"

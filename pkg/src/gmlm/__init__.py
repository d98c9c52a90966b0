"""Graph + language model fusion for text-rich heterophilic node classification."""
from .graph import TextGraph, add_reverse_relations, degree_weighted_sample, generate_synthetic, load_graph, \
    make_splits, save_graph
from .model import GMLM, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, no_grad
from .training import FinetuneConfig, PretrainConfig, run_finetuning, run_pretraining

__version__ = "0.1.0"

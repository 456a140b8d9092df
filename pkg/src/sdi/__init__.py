"""Structure discovery from interventions for discrete-variable SCMs."""

from .graphs import (auroc, edge_cross_entropy, gen_synthetic, is_dag,
                     parse_graph_name, shd, topo_order)
from .learner import (EdgeBeliefs, RunReport, TrainConfig, init_beliefs,
                      threshold_graph, train)
from .scm import (GroundTruthScm, ancestral_sample, apply_soft_intervention,
                  exact_joint, retract_intervention, scm_random_mlp)

__version__ = "0.1.0"

__all__ = [
    "auroc", "edge_cross_entropy", "gen_synthetic", "is_dag",
    "parse_graph_name", "shd", "topo_order",
    "EdgeBeliefs", "RunReport", "TrainConfig", "init_beliefs",
    "threshold_graph", "train",
    "GroundTruthScm", "ancestral_sample", "apply_soft_intervention",
    "exact_joint", "retract_intervention", "scm_random_mlp",
    "__version__",
]

"""BiFPN weighted fusion, SimAM and Shuffle Attention as NCHW operators, plus detection metrics."""
from .bifpn import (
    FusionGraph,
    FusionNode,
    default_neck,
    fuse_weighted,
    graph_execute,
    graph_simplify,
    graph_validate,
    load_graph,
)
from .io import read_bst, read_tensor, write_bst
from .metrics import average_precision, eval_dataset, iou, mean_ap, prf
from .shuffle_attention import SAConfig, SAWeights, sa_backward, sa_forward
from .simam import SimAMConfig, simam_backward, simam_energy, simam_forward, simam_oracle_min

__version__ = "0.1.0"

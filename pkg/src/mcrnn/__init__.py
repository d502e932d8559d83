"""Multi-channel recurrent networks: staggered fully-connected blocks over
shared weights, per-step channel attention, exact manual gradients.

The layer splits the usual single recurrent chain into K = n - 1 channels.
Within a channel, time is covered by fully-connected blocks of n nodes whose
boundaries are offset per channel, so every pair of nearby steps is directly
connected in some channel and the gradient path between steps i and i + l
needs at most floor(l / (n - 1)) + 1 edges. A per-step softmax over channels
aggregates the K hidden states into the layer output.
"""

from .cells import (
    LSTM,
    VANILLA,
    CellParams,
    cell_backward,
    cell_forward,
    init_cell_params,
)
from .config import RunConfig, load_config, parse_config, serialize_config
from .data import (
    SyntheticSpec,
    Vocab,
    adding_batch,
    batch_stream,
    build_vocab,
    copy_batch,
    gen_adding,
    gen_copy,
    synth_corpus,
)
from .errors import (
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    TapeMismatchError,
)
from .gradcheck import GradReport, check_gradients, check_model, numeric_grad
from .layer import (
    LayerCarry,
    LayerParams,
    init_layer_params,
    layer_backward,
    layer_forward,
    temporal_input,
)
from .model import (
    AddingBatch,
    Batch,
    Model,
    load_checkpoint,
    matched_hidden_size,
    perplexity,
    save_checkpoint,
)
from .optim import (
    MetricsLog,
    OptimConfig,
    TrainState,
    clip_gradients,
    evaluate,
    fit,
    plateau_schedule,
    sgd_step,
    train_epoch,
)
from .topology import (
    Topology,
    block_partition,
    degree_profile,
    in_degree,
    layer_shortest_path,
    path_bound,
    predecessors,
    shortest_path,
)

__version__ = "0.1.0"

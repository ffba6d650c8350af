"""High-throughput Cascade information reconciliation for DV-QKD."""

from .bitframe import (
    FRAME_BITS,
    BitVector,
    Frame,
    PermutationTable,
    apply_permutation,
    build_permutation,
    generate_bsc_pair,
    range_parity,
    segment,
)
from .cascade import (
    FrameSession,
    MsgKind,
    ProtocolMessage,
    Role,
    Status,
    frame_digest,
    lockstep_reconcile,
    shared_permutations,
)
from .metrics import (
    FrameRecord,
    ReconStats,
    aggregate,
    efficiency,
    efficiency_fer,
    efficiency_rate_form,
)
from .params import (
    BlockSchedule,
    CombinationMode,
    binary_entropy,
    build_schedule,
    compute_epsilon_bit,
    compute_k2,
    compute_k_init,
    custom_schedule,
    original_cascade_schedule,
)
from .paritytree import (
    ComparisonForest,
    ParityComparisonTree,
    ParityForest,
    ParityTree,
    init_comparison_tree,
    init_parity_tree,
)

__version__ = "0.1.0"

"""Spectral serialization of 3D point clouds for order-sensitive sequence models."""

from .errors import (
    ConvergenceError,
    DegenerateEigenvectorError,
    DegenerateGeometryError,
    InvalidArgumentError,
    IsolatedNodeError,
    PreconditionError,
    SingularMatrixError,
    SpectraverseError,
)
from .geometry import (
    PatchSet,
    PointCloud,
    RigidTransform,
    apply_rigid,
    fps,
    gen_shape,
    knn,
    load_xyz,
    patchify,
    save_xyz,
)
from .mae import MaskPlan, TokenSequence, chamfer, make_mask, rec_loss, tar_remove, tar_restore
from .spectral import (
    AdjacencyGraph,
    GraphParams,
    LaplacianOperator,
    SpectralEmbedding,
    build_graph,
    canonicalize,
    eigensolve,
    min_eigengap,
    random_walk_laplacian,
)
from .ssm import DiscreteSSM, SSMParams, SelectiveParams, discretize, scan, scan_backward, selective_scan
from .traversal import HLTCode, TraversalOrder, axis_order, hlt_codes, hlt_orders, order_agreement, sast_orders

__version__ = "0.1.0"

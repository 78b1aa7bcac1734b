"""Gaussian-splat scene tracking, skinning, map packing, and motion retargeting."""

from .core import (
    GaussianKernel,
    GaussianSet,
    NeighborGraph,
    PointCloud,
    Role,
    knn_build,
    quat_blend,
    quat_inverse,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    weight_rbf,
)
from .energy import (
    EnergyEval,
    e_arap,
    e_data_points,
    e_iso,
    e_l2_gauss,
    e_mask,
    e_sem,
    e_size,
)
from .errors import (
    CapacityError,
    DegenerateBlendError,
    FormatError,
    InvalidArgumentError,
    SplatkinError,
    TruncationError,
)
from .morton import (
    AttributeMap,
    Box,
    MortonMapping,
    build_mapping,
    locality_score,
    morton_decode,
    morton_encode,
    pack_map,
    quantize,
    unpack_map,
)
from .render import OrthoCamera, RenderOutput, project, splat
from .warp import (
    AttributeRegressor,
    FrameMotion,
    WarpFieldRegressor,
    apply_motion,
    assemble,
    baseline_regress,
    disassemble,
    pseudo_gt_attributes,
    relative_motion,
    warp_appearance,
)

__version__ = "0.1.0"

"""Dense mapping on a compact depth-code manifold for sparse SLAM.

The package turns sparse keyframe output (poses, sparse depths,
reprojection errors) into dense depth: a decoder conditioned on each
keyframe predicts depth from a small latent code, the codes of a
covisibility window are refined jointly against photometric, sparse
geometric, and reprojection factors with poses held fixed, and the
refined maps are TSDF-fused into a mesh. An exponentially-modified
Gaussian noise model reproduces the sparse front end's depth errors for
training-data generation.
"""

from .codec import (
    AffineDecoder,
    ConditioningSet,
    DEFAULT_CODE_SIZE,
    DecoderOutput,
    DepthCode,
    analytic_decoder,
    decode,
    fit_code,
    load_learned_decoder,
    recon_error,
)
from .errors import (
    BehindCameraError,
    CodemapError,
    DomainError,
    FormatError,
    InsufficientConditioningError,
    InvalidDepthError,
    OutOfViewError,
    SolverError,
)
from .factors import (
    Correspondence,
    FactorResidual,
    HuberParams,
    huber_weight,
    photometric_factor,
    reprojection_factor,
    sparse_geometric_factor,
    zero_code_prior,
)
from .fusion import TriangleMesh, TsdfVolume, extract_mesh, integrate, monocular_scale
from .geometry import (
    Intrinsics,
    Pose,
    ProximityParams,
    depth_to_proximity,
    project,
    proximity_to_depth,
    relative_pose,
    unproject,
    warp,
)
from .image import DenseImage
from .io import (
    SequenceManifest,
    load_sequence,
    read_manifest,
    read_pfm,
    read_weights,
    save_sequence,
    write_manifest,
    write_pfm,
    write_ply,
    write_weights,
)
from .noise import (
    EmgParams,
    SparseObservation,
    build_training_pair,
    perturb_along_ray,
    sample_emg,
    sparsify_depth,
)
from .optimizer import (
    SolveReport,
    SolverConfig,
    WindowProblem,
    build_problem,
    refine_window,
    solve,
)
from .pipeline import (
    DenseMapper,
    KeyframePacket,
    MapperState,
    evaluate,
    ingest,
    process_window,
    select_window,
)
from .synth import SceneSpec, box_scene, make_sequence, plane_scene, render, room_scene

__version__ = "0.1.0"

__all__ = [
    "AffineDecoder",
    "BehindCameraError",
    "CodemapError",
    "ConditioningSet",
    "Correspondence",
    "DEFAULT_CODE_SIZE",
    "DecoderOutput",
    "DenseImage",
    "DenseMapper",
    "DepthCode",
    "DomainError",
    "EmgParams",
    "FactorResidual",
    "FormatError",
    "HuberParams",
    "InsufficientConditioningError",
    "Intrinsics",
    "InvalidDepthError",
    "KeyframePacket",
    "MapperState",
    "OutOfViewError",
    "Pose",
    "ProximityParams",
    "SceneSpec",
    "SequenceManifest",
    "SolveReport",
    "SolverConfig",
    "SolverError",
    "SparseObservation",
    "TriangleMesh",
    "TsdfVolume",
    "WindowProblem",
    "analytic_decoder",
    "box_scene",
    "build_problem",
    "build_training_pair",
    "decode",
    "depth_to_proximity",
    "evaluate",
    "extract_mesh",
    "fit_code",
    "huber_weight",
    "ingest",
    "integrate",
    "load_learned_decoder",
    "load_sequence",
    "make_sequence",
    "monocular_scale",
    "perturb_along_ray",
    "photometric_factor",
    "plane_scene",
    "process_window",
    "project",
    "proximity_to_depth",
    "read_manifest",
    "read_pfm",
    "read_weights",
    "recon_error",
    "refine_window",
    "relative_pose",
    "render",
    "reprojection_factor",
    "room_scene",
    "sample_emg",
    "save_sequence",
    "select_window",
    "solve",
    "sparse_geometric_factor",
    "sparsify_depth",
    "unproject",
    "warp",
    "write_manifest",
    "write_pfm",
    "write_ply",
    "write_weights",
    "zero_code_prior",
]

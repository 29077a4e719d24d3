"""Geometry-guided purification of per-point semantic features.

A semantic field lifted from 2D views is noisy and fragmented; a small
student network distilled against a frozen geometric teacher supplies the
affinities that let iterated graph pooling denoise it. This package also
ships the synthetic benchmark (scenes, teacher oracle, corruption,
metrics), entropy-based scene subset selection, and a batch CLI.
"""

from .distill import (
    AdamWState,
    LayerRates,
    TeacherField,
    TrainConfig,
    TripletBatch,
    adamw_step,
    infonce_loss,
    lr_at,
    sample_triplets,
    train,
)
from .errors import (
    DataError,
    IntegrityError,
    ParameterError,
    PurifyError,
    UsageError,
)
from .geometry import (
    NeighborIndex,
    PointCloud,
    VoxelGrid,
    build_neighbor_index,
    estimate_normals,
    voxelize,
)
from .gpff import read_gpff, write_gpff
from .lifting import CameraView, FeatureField, lift_multiview, project_point
from .ply import read_ply, write_ply
from .pooling import AffinityGraph, PoolingConfig, build_affinity, iterate_pool, purify
from .selection import (
    SceneStats,
    filter_median,
    kmeans_histograms,
    scene_stats,
    select_subset,
)
from .student import (
    StudentNet,
    backprop_embeddings,
    embed_points,
    featurize_context,
    init_student,
    load_student,
    save_student,
)
from .synth import (
    EvalReport,
    Scene,
    SceneSpec,
    assign_labels,
    boundary_mask,
    corrupt_features,
    evaluate,
    generate_scene,
    make_prototypes,
    teacher_oracle,
)

__version__ = "0.1.0"

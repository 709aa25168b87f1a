"""BEV feature alignment under sensor asynchrony, at desk scale.

A numpy/scipy library that simulates multi-rate sensor streams over
synthetic driving scenes, generates dense ground-truth flow from tracked
boxes, estimates the residual dynamic flow between ego-motion-compensated
feature maps, warps features through look-up tables or token corrections,
and scores the result with a center-distance detection proxy split by
static/dynamic motion.
"""

from .geometry import (
    BevGridSpec,
    Box2,
    Pose2,
    apply,
    cell_center,
    compose,
    identity,
    inverse,
    points_in_box,
    world_to_cell,
)
from .scenesim import (
    BevFeatureMap,
    BoxTrack,
    EgoTrajectory,
    Scene,
    SceneConfig,
    SensorStream,
    generate_scene,
    load_scene,
    nearest_frame,
    rasterize_bev,
    save_scene,
)
from .gtflow import (
    FlowField,
    backward_warp_field,
    dense_gt_flow,
    dense_gt_flow_backward,
    emc_flow,
    emc_transform,
    load_flow,
    save_flow,
    scatter_check,
    zero_flow,
)
from .flowest import (
    FlowEstimatorSpec,
    FlowLossReport,
    TrainHyper,
    TrainingDivergedError,
    estimate_flow,
    estimate_velocity,
    flow_loss,
    gradient_check,
    init_learned_params,
    load_estimator,
    save_estimator,
    train_estimator,
)
from .warp import (
    LookupTable,
    TokenSet,
    build_lut,
    grid_sample,
    identity_lut,
    load_feature_map,
    roundtrip_check,
    save_feature_map,
    warp_tokens,
)
from .evaluation import Detection, EvalReport, attach_speeds, detect, match_and_score
from .harness import (
    ExperimentConfig,
    TrainingConfig,
    check_command,
    default_config,
    load_config,
    run_sweep,
    save_config,
    train_command,
)

__version__ = "0.1.0"

"""Self-supervised video pretraining by tracking synthetic moving patches.

Pipeline: synthesize clips with patches moving along known trajectories
(:mod:`ctp.trajsynth`, :mod:`ctp.compositor`), train a 3D encoder plus
trajectory-regression head to localize each patch from its first-frame
box (:mod:`ctp.model`, :mod:`ctp.objective`, :mod:`ctp.trainer`), and
evaluate the learned features by linear probing and clip retrieval
(:mod:`ctp.transfer`).
"""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, CtpError, DataError, NumericError
from .geometry import (
    DEFAULT_SIGMAS,
    Box,
    Sigmas,
    TargetVec,
    box_distance,
    decode_box,
    encode_targets,
    iou,
    smooth_l1,
)
from .trajsynth import (
    Trajectory,
    TrajectoryConstraints,
    interpolate_trajectory,
    sample_initial_box,
    sample_keyframe_boxes,
    sample_trajectory,
    validate_trajectory,
)
from .compositor import (
    FrameFolderSource,
    ProceduralSource,
    RawClip,
    SyntheticClip,
    composite_clip,
    crop_patch,
    generate_dataset,
    read_clip,
    sample_visibility,
    synthesize_training_clip,
    write_clip,
)
from .model import (
    CtpModel,
    EncoderSpec,
    HeadSpec,
    PixelNorm,
    TinyVideoEncoder,
    TrajectoryHead,
    pool_region,
    pool_regions,
)
from .objective import LossReport, batch_loss, trajectory_distance
from .trainer import (
    DatasetHandle,
    TrainConfig,
    evaluate_tracking,
    load_model_from_checkpoint,
    lr_at,
    pretrain,
)
from .transfer import (
    ProbeConfig,
    ToyBenchmark,
    extract_video_feature,
    linear_probe,
    make_toy_benchmark,
    retrieval_eval,
)

"""Viewpoint robustness toolkit.

Searches for adversarial viewpoint distributions against an image
classifier over an analytic volume renderer, hardens the classifier by
training against a pool of such distributions, and certifies smoothed
viewpoint robustness with exact binomial confidence bounds.
"""

__version__ = "0.1.0"

from .attack import (  # noqa: F401
    AttackConfig,
    AttackResult,
    GMVFoolAttack,
    attack_success_rate,
    nes_gradient,
    optimize_mixture,
    run_attack,
)
from .classifier import (  # noqa: F401
    TinyImageClassifier,
    load_classifier,
    pretrain_clean,
)
from .geometry import (  # noqa: F401
    CameraPose,
    Ray,
    ViewBounds,
    Viewpoint,
    camera_pose_from_viewpoint,
    pixel_ray,
    rotation_from_tait_bryan,
)
from .landscape import (  # noqa: F401
    BumpLandscape,
    four_bump_landscape,
    grid_sweep,
    single_bump_landscape,
)
from .mixture import (  # noqa: F401
    Draws,
    MixtureParams,
    entropy_estimate,
    log_density_v,
    sample_mixture,
    squash,
    unsquash,
)
from .rendering import (  # noqa: F401
    RenderConfig,
    RenderedImage,
    render_pixel,
    render_view,
    render_views,
    sample_points_stratified,
)
from .scenes import (  # noqa: F401
    NaturalViewpointSampler,
    Primitive,
    Scene,
    load_scene,
    save_scene,
    split_train_val,
    toy_suite,
)
from .smoothing import (  # noqa: F401
    ABSTAIN,
    CertificationRecord,
    Smoother,
    SmoothingConfig,
    aggregate_acr_ca,
    certify,
    clopper_pearson_lower,
    smoothed_predict,
)
from .training import (  # noqa: F401
    DistPool,
    TrainConfig,
    ViatTrainer,
    viat_train,
)
from .validation import (  # noqa: F401
    DegeneratePoseError,
    DomainError,
    ValidationError,
)

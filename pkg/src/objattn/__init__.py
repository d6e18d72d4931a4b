"""Object-centric attention over region proposals, end to end.

A scene is a set of (bounding box, feature) proposals from a task
independent stage. A learned attention matrix scores proposals per row;
the soft, probability-weighted box average trains against demonstrated
motions, and the argmax box feeds policies at execution time. A small 2-D
tabletop simulator, scripted experts, behavior cloning, an episodic RL
method, and seeded experiment runners sit on top.
"""
from .attention import (
    AttentionModel,
    TrainConfig,
    attention_probs,
    entropy_loss,
    finetune_attention,
    gradients,
    hard_observation,
    init_from_crop,
    normalize_feature,
    soft_observation,
    total_loss,
    train_attention,
)
from .core import (
    ArtifactError,
    BoundingBox,
    Demonstration,
    DemoStep,
    ObjectProposal,
    RobotState,
    Scene,
    SchemaError,
    VersionError,
    derive_seed,
    seeded_rng,
)
from .experiments import (
    ExperimentReport,
    ExperimentSpec,
    load_report,
    load_spec,
    render_report,
    resolve_spec,
    run_experiment,
    save_report,
)
from .io import load_artifact, load_demos, save_artifact, save_demos
from .policy import BCConfig, Policy, RLConfig, behavior_clone, rollout, train_rl
from .proposals import (
    FeatureBank,
    ProposerConfig,
    make_feature_bank,
    propose,
    sample_instance_feature,
)
from .sim import (
    Placement,
    TaskSpec,
    Trajectory,
    collect_demonstrations,
    observe,
    reset,
    scripted_expert,
    step,
    success,
)

__version__ = "0.1.0"

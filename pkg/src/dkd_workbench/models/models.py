from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, TypeAlias

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    model_validator,
)

# Type aliases
UnitInterval: TypeAlias = Annotated[float, Field(ge=0.0, le=1.0)]
PositiveInt: TypeAlias = Annotated[int, Field(ge=1)]
KernelSize: TypeAlias = Annotated[list[int], Field(min_length=2, max_length=2)]
Shape: TypeAlias = Annotated[list[int], Field(min_length=0)]


version = "0.1.0"

NUM_CLASSES = 10
CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_ZETA_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


class ConfiguredBaseModel(BaseModel):
    model_config = ConfigDict(
        validate_by_name=True,
        validate_assignment=True,
        validate_default=True,
        extra="forbid",
        arbitrary_types_allowed=True,
        use_enum_values=True,
        strict=False,
    )


class Architecture(str, Enum):
    """
    The network layouts that can be built
    """

    mnist = "mnist"
    """
    Four convolutions, two poolings and two 200 unit dense layers on 1x28x28
    """
    cifar10 = "cifar10"
    """
    Nine convolutions, two poolings and a global average pooling on 3x32x32
    """
    toy = "toy"
    """
    One 32 unit dense layer on 1x8x8, for oracle tests
    """
    lenet_small = "lenet-small"
    """
    Two convolutions and two dense layers, the black-box reference model
    """


class TrainingMode(str, Enum):
    """
    How the ensemble members are trained
    """

    ri = "ri"
    """
    Random initialization, every member trained independently
    """
    kd = "kd"
    """
    Knowledge distillation from the frozen predecessors' soft targets
    """
    dkd = "dkd"
    """
    Diverse knowledge distillation, latent similarity to predecessors penalized
    """


class KDTeacherSource(str, Enum):
    """
    Which predecessors provide soft targets in KD mode
    """

    mean = "mean"
    """
    The mean of the soft targets of every frozen predecessor
    """
    main = "main"
    """
    The soft targets of the main (first) model only
    """


class AttackKind(str, Enum):
    fgsm = "fgsm"
    """
    Fast gradient sign method, L-infinity budget epsilon
    """
    deepfool = "deepfool"
    """
    Iterative minimal L2 step to the nearest linearized boundary
    """
    jsma = "jsma"
    """
    Jacobian saliency map, greedy pixel pair increase
    """
    cw = "cw"
    """
    Carlini-Wagner L2 with tanh box and binary search on c
    """


class DatasetName(str, Enum):
    mnist = "mnist"
    cifar10 = "cifar10"
    synthetic_blobs = "synthetic-blobs"


class DatasetSplit(str, Enum):
    train = "train"
    test = "test"


class LayerKind(str, Enum):
    """
    The kinds of layer a network is made of
    """

    conv_relu = "conv-relu"
    max_pool = "max-pool"
    global_avg_pool = "global-avg-pool"
    dense_relu = "dense-relu"
    softmax_head = "softmax-head"


class LayerSpec(ConfiguredBaseModel):
    """
    One entry of a network layout
    """

    kind: LayerKind = Field(default=..., description="""The kind of layer""")
    width: Optional[PositiveInt] = Field(
        default=None,
        description="""Filters of a convolution or units of a dense layer""",
    )
    kernel: Optional[KernelSize] = Field(
        default=None, description="""Kernel height and width of a convolution"""
    )

    @model_validator(mode="after")
    def check_parameters(self) -> LayerSpec:
        parametric = (LayerKind.conv_relu, LayerKind.dense_relu, LayerKind.softmax_head)
        if self.kind in parametric and self.width is None:
            raise ValueError(f"{self.kind} layers need a width")
        if self.kind == LayerKind.conv_relu and self.kernel is None:
            raise ValueError("conv-relu layers need a kernel size")
        return self


class DiversityLossConfig(ConfiguredBaseModel):
    """
    Weighting of the diversity term and the KD baseline settings
    """

    zeta: UnitInterval = Field(
        default=0.9,
        description="""Weight of the diversity (or distillation) term against cross-entropy""",
    )
    tap_id: Optional[int] = Field(
        default=None,
        description="""Index of the latent layer, None for the architecture default""",
    )
    kd_temperature: float = Field(
        default=4.0, gt=0.0, description="""Softmax temperature of the KD baseline"""
    )
    kd_teacher: KDTeacherSource = Field(
        default=KDTeacherSource.mean,
        description="""Which predecessors the KD baseline distils from""",
    )


class DatasetConfig(ConfiguredBaseModel):
    """
    Which dataset to load and how much of it
    """

    name: DatasetName = Field(default=DatasetName.mnist)
    data_dir: Optional[Path] = Field(
        default=None,
        description="""Dataset root, falls back to the DKD_DATA_DIR environment variable""",
    )
    train_subset: Optional[PositiveInt] = Field(
        default=10000, description="""Training samples kept, None for all"""
    )
    test_subset: Optional[PositiveInt] = Field(
        default=2000, description="""Test samples kept, None for all"""
    )
    seed: int = Field(default=0, description="""Seed of the subset selection""")
    blob_classes: Annotated[int, Field(ge=2, le=NUM_CLASSES)] = Field(default=2)
    blob_dim: PositiveInt = Field(default=64)
    blob_per_class: PositiveInt = Field(default=200)
    blob_separation: float = Field(default=6.0, gt=0.0)
    blob_sigma: float = Field(default=1.0, gt=0.0)


class TrainConfig(ConfiguredBaseModel):
    """
    Hyperparameters of a sequential ensemble build
    """

    mode: TrainingMode = Field(default=TrainingMode.dkd)
    arch: Architecture = Field(default=Architecture.mnist)
    ensemble_size: PositiveInt = Field(default=3)
    epochs: Annotated[int, Field(ge=0)] = Field(default=15)
    batch_size: PositiveInt = Field(default=64)
    lr: float = Field(default=1e-4, gt=0.0)
    zeta: UnitInterval = Field(default=0.9)
    seed: int = Field(default=0)
    tap_id: Optional[int] = Field(default=None)
    kd_temperature: float = Field(default=4.0, gt=0.0)
    kd_teacher: KDTeacherSource = Field(default=KDTeacherSource.mean)
    validation_fraction: Annotated[float, Field(ge=0.0, lt=1.0)] = Field(default=0.1)
    dtype: Literal["float32", "float64"] = Field(default="float32")

    def loss_config(self) -> DiversityLossConfig:
        return DiversityLossConfig(
            zeta=self.zeta,
            tap_id=self.tap_id,
            kd_temperature=self.kd_temperature,
            kd_teacher=self.kd_teacher,
        )


class AttackConfig(ConfiguredBaseModel):
    """
    Settings of one adversarial attack
    """

    kind: AttackKind = Field(default=AttackKind.fgsm)
    epsilon: float = Field(
        default=0.1, ge=0.0, description="""FGSM L-infinity budget"""
    )
    iterations: PositiveInt = Field(
        default=200,
        description="""Maximum inner iterations of DeepFool, JSMA and C&W""",
    )
    cw_initial_constant: float = Field(default=10.0, gt=0.0)
    cw_learning_rate: float = Field(default=1e-2, gt=0.0)
    cw_binary_steps: PositiveInt = Field(default=5)
    cw_confidence: float = Field(default=0.0, ge=0.0)
    deepfool_overshoot: float = Field(default=0.02, ge=0.0)
    jsma_theta: float = Field(default=0.1)
    jsma_max_pixels: Optional[Annotated[int, Field(ge=0)]] = Field(
        default=None,
        description="""Pixel (pair) budget of JSMA, None to use the iteration count""",
    )
    jsma_pairwise: bool = Field(default=True)
    clip_min: float = Field(default=0.0)
    clip_max: float = Field(default=1.0)
    samples: Optional[PositiveInt] = Field(
        default=None, description="""Evaluate only the first samples of the test set"""
    )
    batch_size: PositiveInt = Field(default=100)
    save_adversarials: bool = Field(default=False)
    save_previews: bool = Field(default=False)

    @model_validator(mode="after")
    def check_box(self) -> AttackConfig:
        if self.clip_min >= self.clip_max:
            raise ValueError(
                f"pixel box [{self.clip_min}, {self.clip_max}] is empty"
            )
        return self

    @property
    def param_label(self) -> str:
        """The value shown in the parameter column of the tables"""
        if self.kind == AttackKind.fgsm:
            return f"{self.epsilon:g}"
        return str(self.iterations)


class VotingConfig(ConfiguredBaseModel):
    boost_n: Annotated[int, Field(ge=2)] = Field(
        default=3, description="""Top-n candidates per member in boosted voting"""
    )
    report_boosted: bool = Field(
        default=True,
        description="""Ensemble accuracy in reports uses boosted rather than plain voting""",
    )


class LSSConfig(ConfiguredBaseModel):
    """
    Settings of the hard-margin SVM behind latent space separation
    """

    tol: float = Field(
        default=1e-3, gt=0.0, description="""Slack below which a cloud is separable"""
    )
    c: float = Field(default=1e6, gt=0.0, description="""Soft-margin stand-in for C""")
    solver_tol: float = Field(default=1e-8, gt=0.0)
    max_iter: int = Field(
        default=10_000_000, description="""libsvm iteration cap, -1 for none"""
    )
    max_points_per_model: PositiveInt = Field(default=2000)
    seed: int = Field(default=0, description="""Seed of the point subsampling""")


class ExperimentConfig(ConfiguredBaseModel):
    """
    Everything one CLI run needs
    """

    name: str = Field(default="dkd")
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: DiversityLossConfig = Field(
        default_factory=DiversityLossConfig,
        description="""Diversity-loss settings, merged over the same keys of train""",
    )
    attack: AttackConfig = Field(default_factory=AttackConfig)
    voting: VotingConfig = Field(default_factory=VotingConfig)
    lss: LSSConfig = Field(default_factory=LSSConfig)
    output_dir: Path = Field(default=Path("runs"))
    workers: PositiveInt = Field(default=1)
    zeta_grid: list[UnitInterval] = Field(
        default_factory=lambda: list(DEFAULT_ZETA_GRID)
    )
    sweep_modes: list[TrainingMode] = Field(
        default_factory=lambda: [TrainingMode.ri, TrainingMode.kd, TrainingMode.dkd]
    )
    reference_arch: Architecture = Field(default=Architecture.lenet_small)
    reference_seed_offset: int = Field(
        default=1000, description="""Added to the training seed for the reference model"""
    )

    @model_validator(mode="before")
    @classmethod
    def merge_loss_into_train(cls, data: Any) -> Any:
        """Settle the diversity-loss keys on the train block

        Keys under loss win over the same keys under train, and loss is rebuilt
        from the merged train block so that both always hold the same values.
        """
        if not isinstance(data, dict):
            return data
        train, loss = data.get("train", {}), data.get("loss", {})
        if isinstance(train, BaseModel):
            train = train.model_dump(exclude_unset=True)
        if isinstance(loss, BaseModel):
            loss = loss.model_dump(exclude_unset=True)
        if not isinstance(train, dict) or not isinstance(loss, dict):
            return data
        keys = set(DiversityLossConfig.model_fields)
        train = {**train, **{k: v for k, v in loss.items() if k in keys}}
        # unknown loss keys stay behind for DiversityLossConfig to reject
        loss = {k: v for k, v in loss.items() if k not in keys} | {k: train[k] for k in keys if k in train}
        return {**data, "train": train, "loss": loss}


class TensorEntry(ConfiguredBaseModel):
    name: str
    shape: Shape


class CheckpointManifest(ConfiguredBaseModel):
    """
    JSON header of a member checkpoint
    """

    format_version: int = Field(default=CHECKPOINT_FORMAT_VERSION)
    arch: Architecture
    tap_id: int
    mode: TrainingMode
    zeta: UnitInterval
    member_index: int = Field(default=0, ge=0)
    seed: int = Field(default=0)
    dtype: Literal["float32", "float64"] = Field(
        default="float32", description="""Precision of the parameter blobs"""
    )
    tensors: list[TensorEntry] = Field(default_factory=list)
    blob_sha256: str = Field(default="")
    blob_bytes: int = Field(default=0, ge=0)


class MemberRecord(ConfiguredBaseModel):
    index: int = Field(ge=0)
    seed: int
    checkpoint: str
    sha256: str
    train_accuracy: float
    val_accuracy: Optional[float] = None


class RunManifest(ConfiguredBaseModel):
    """
    Manifest of an ensemble directory, used to resume a build
    """

    name: str
    mode: TrainingMode
    train: TrainConfig
    members: list[MemberRecord] = Field(default_factory=list)


class MemberMargin(ConfiguredBaseModel):
    member: int = Field(ge=0)
    lss: float = Field(ge=0.0)
    separable: bool
    points: int = Field(default=0, ge=0)


class LSSReport(ConfiguredBaseModel):
    """
    Latent space separation of an ensemble, one-vs-rest per member
    """

    zeta: Optional[float] = None
    mode: Optional[TrainingMode] = None
    tap_id: Optional[int] = None
    per_member: list[MemberMargin] = Field(default_factory=list)
    ensemble_lss: float = Field(default=0.0, ge=0.0)
    subsampled: bool = Field(
        default=False, description="""Some cloud was cut to max_points_per_model"""
    )


class CensusRow(ConfiguredBaseModel):
    """
    Failed majorities on one attack stream
    """

    mode: TrainingMode
    attack: str
    param: str
    samples: int = Field(ge=0)
    plain_failed: int = Field(ge=0)
    boosted_failed: int = Field(ge=0)
    plain_accuracy: float
    boosted_accuracy: float
    accuracy_improved: float


class AccuracyRow(ConfiguredBaseModel):
    """
    Accuracy of one defense under one attack protocol
    """

    protocol: Literal["clean", "transfer", "direct", "projected", "aggregated"]
    attack: str
    param: str
    mode: Optional[TrainingMode] = None
    samples: int = Field(ge=0)
    plain_accuracy: Optional[float] = None
    boosted_accuracy: Optional[float] = None
    reference_accuracy: Optional[float] = None
    member_accuracies: list[float] = Field(default_factory=list)


class AttackMetadata(ConfiguredBaseModel):
    """
    Sidecar of a persisted adversarial batch
    """

    attack: AttackConfig
    source_model: str
    samples: int = Field(ge=0)
    mean_linf: float
    max_linf: float
    mean_l2: float
    success_rate: float
    flagged: int = Field(default=0, ge=0)


class SweepRow(ConfiguredBaseModel):
    mode: TrainingMode
    zeta: UnitInterval
    ensemble_lss: float
    plain_accuracy: float
    boosted_accuracy: float
    mean_pairwise_cosine: float

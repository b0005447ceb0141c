from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

AUGMENT_FAMILIES = (1, 2, 3, 4, 5)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class ViTConfig(StrictModel):
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_blocks: int = 4
    heads_per_block: int = 4
    mlp_ratio: int = 4
    num_classes: int = 5
    num_styles: int = 6
    style_hidden: int = Field(64, ge=1)
    init_std: float = 0.02
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def check_geometry(self):
        if self.embed_dim % self.heads_per_block:
            raise ValueError("embed_dim must be divisible by heads_per_block")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads_per_block

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


class CausalGraphParams(StrictModel):
    num_classes: int = 5
    num_styles_z: int = 5
    confounder_strength: float = Field(0.9, ge=0.0, le=1.0)
    pairing_shift: int = 0
    noise_sigma: float = Field(0.05, ge=0.0)
    image_size: int = 32
    seed: int = 0

    @field_validator("num_styles_z")
    @classmethod
    def at_least_two_textures(cls, value):
        if value < 2:
            raise ValueError("num_styles_z must be at least 2")
        return value

    def paired_texture(self, shape: int) -> int:
        return (shape + self.pairing_shift) % self.num_styles_z


class DataConfig(StrictModel):
    source_size: int = Field(1000, gt=0)
    target_size: int = Field(1000, gt=0)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)


class AugmentParams(StrictModel):
    seed: int = 0
    families: List[int] = list(AUGMENT_FAMILIES)
    fda_radius: int = Field(3, ge=0)
    frost_strength: float = 0.25
    adain_strength: float = Field(0.5, ge=0.0, le=1.0)
    quant_levels: int = Field(4, ge=2)
    hue_max: float = 0.6
    contrast_range: float = 0.3
    reference_bank_size: int = Field(4, ge=1)
    texture_cells: int = Field(4, ge=2)

    @field_validator("families", mode="before")
    @classmethod
    def parse_families(cls, value):
        return _split_list(value)

    @field_validator("families")
    @classmethod
    def known_families(cls, value):
        unknown = [f for f in value if f not in AUGMENT_FAMILIES]
        if unknown or len(set(value)) != len(value):
            raise ValueError(f"families must be distinct ids from {AUGMENT_FAMILIES}")
        return value

    @property
    def num_styles(self) -> int:
        return len(self.families) + 1


class SelectionConfig(StrictModel):
    lam: float = Field(0.3, gt=0.0, lt=1.0)
    tau: float = 0.0
    beta_lr: float = Field(0.01, gt=0.0)
    beta_epochs: int = Field(3, ge=0)
    batch_size: int = Field(32, gt=0)


class TrainSchedule(StrictModel):
    rounds: int = Field(25, ge=0)
    pretrain_epochs: int = Field(5, ge=0)
    warmup_epochs: int = Field(1, ge=0)
    warmup_factor: float = Field(0.01, gt=0.0, le=1.0)
    task_epochs_per_round: int = Field(2, ge=1)
    style_accuracy_target: float = Field(0.80, gt=0.0, lt=1.0)
    style_max_epochs_per_round: int = Field(20, ge=1)
    vendor_lr: float = Field(5e-3, gt=0.0)
    client_lr: float = Field(1e-3, gt=0.0)
    style_lr: float = Field(5e-2, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    label_smoothing: float = Field(0.1, ge=0.0, lt=1.0)
    batch_size: int = Field(32, gt=0)
    sspl_weight: float = Field(0.3, ge=0.0)
    use_entropy: bool = True
    use_diversity: bool = True
    use_sspl: bool = True
    pseudo_label_refresh: Literal["round"] = "round"
    divergence_patience: int = Field(3, ge=1)
    style_holdout_fraction: float = Field(0.2, gt=0.0, lt=1.0)


class AblationConfig(StrictModel):
    seeds: List[int] = [0, 1, 2, 3, 4]
    sweeps: List[Literal["paired", "epochs", "lambda", "augs", "losses"]] = [
        "paired",
        "epochs",
        "lambda",
        "augs",
        "losses",
    ]
    epoch_values: List[int] = [1, 2, 3, 5]
    lambda_values: List[float] = [0.1, 0.2, 0.3, 0.4]
    aug_counts: List[int] = [2, 5]
    loss_settings: List[Literal["ent", "ent+div", "ent+div+sspl"]] = ["ent", "ent+div", "ent+div+sspl"]

    @field_validator("seeds", "sweeps", "epoch_values", "lambda_values", "aug_counts", "loss_settings", mode="before")
    @classmethod
    def parse_lists(cls, value):
        return _split_list(value)


class RunConfig(StrictModel):
    seed: int = 0
    vit: ViTConfig = Field(default_factory=ViTConfig)
    source: CausalGraphParams = Field(default_factory=CausalGraphParams)
    target: CausalGraphParams = Field(default_factory=lambda: CausalGraphParams(pairing_shift=1))
    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentParams = Field(default_factory=AugmentParams)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="after")
    def check_consistency(self):
        for role in ("source", "target"):
            graph = getattr(self, role)
            if graph.num_classes != self.vit.num_classes:
                raise ValueError(f"{role}.num_classes must equal vit.num_classes")
            if graph.image_size != self.vit.image_size:
                raise ValueError(f"{role}.image_size must equal vit.image_size")
        if self.vit.num_styles != self.augment.num_styles:
            raise ValueError("vit.num_styles must equal len(augment.families) + 1")
        return self


class MetricsRecord(BaseModel):
    stage: Literal["vendor", "client"]
    round: int
    phase: Literal["pretrain", "select", "task", "style"]
    seed: int
    loss_cls: Optional[float] = None
    loss_style: Optional[float] = None
    loss_ent: Optional[float] = None
    loss_div: Optional[float] = None
    loss_sspl: Optional[float] = None
    style_acc: Optional[float] = None
    style_capped: Optional[bool] = None
    source_acc: Optional[float] = None
    target_acc: Optional[float] = None
    pseudo_label_agreement: Optional[float] = None
    centroid_fallbacks: Optional[int] = None
    warning: Optional[str] = None


class CisReport(BaseModel):
    cis: List[List[float]]
    beta1: List[List[float]]
    tau: float
    lam: float
    mask: List[List[bool]]
    num_selected: int


class ADistanceResult(BaseModel):
    value: float = Field(ge=0.0, le=2.0)
    error: float
    n_a: int
    n_b: int
    degenerate: bool = False


class CorrelationReport(BaseModel):
    source: ADistanceResult
    target: ADistanceResult
    gap: float = Field(ge=0.0, le=2.0)


class EvalReport(BaseModel):
    stage: str
    source_acc: Optional[float] = None
    target_acc: Optional[float] = None
    target_per_class: Optional[Dict[int, float]] = None


class HealthResponse(BaseModel):
    status: str
    message: str


class RunSummary(BaseModel):
    name: str
    artifacts: List[str]

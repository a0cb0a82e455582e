"""
Common models and DTOs for the core application
"""
from typing import Dict, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


Direction = Literal["a2g", "g2a"]
Ablation = Literal["A", "B", "C", "D"]
DeformPlacement = Literal["first", "first_and_last"]

# (attention mechanism, deformable convolution, semantic-guided loss)
ABLATION_TOGGLES: Dict[str, Tuple[bool, bool, bool]] = {
    "A": (False, False, False),
    "B": (True, False, False),
    "C": (True, True, False),
    "D": (True, True, True),
}

ABLATION_METHODS: Dict[str, str] = {
    "A": "SGAN",
    "B": "SGAN + AM",
    "C": "SGAN + AM + DC",
    "D": "SGAN + AM + DC + LS",
}


class LossWeights(BaseModel):
    """Trade-off weights of the training objective and the ablation toggles"""
    lambda_adv: float = Field(default=4.0, ge=0, description="Weight of the second-stage adversarial terms")
    lambda1: float = Field(default=100.0, ge=0, description="L1 weight for (I'g, Ig)")
    lambda2: float = Field(default=1.0, ge=0, description="L1 weight for (S'g, Sg)")
    lambda3: float = Field(default=200.0, ge=0, description="L1 weight for (I''g, Ig)")
    lambda4: float = Field(default=2.0, ge=0, description="L1 weight for (S''g, Sg)")
    lambda_tv: float = Field(default=1e-6, ge=0, description="Total variation weight on I''g")
    use_attention: bool = Field(default=True, description="AM toggle")
    use_deform: bool = Field(default=True, description="DC toggle")
    use_semantic_loss: bool = Field(default=True, description="LS toggle (discriminator D2)")

    @classmethod
    def for_ablation(cls, ablation: str, **weights) -> "LossWeights":
        am, dc, ls = ABLATION_TOGGLES[ablation]
        return cls(use_attention=am, use_deform=dc, use_semantic_loss=ls, **weights)


class GeneratorConfig(BaseModel):
    """Shape of one U-shaped encoder-decoder generator"""
    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    depth: int = Field(default=3, ge=1, description="Number of down/up levels")
    base_channels: int = Field(default=32, ge=1)
    feature_channels: int = Field(default=64, ge=1, description="Channels of the exposed feature map")
    use_deform: bool = Field(default=False, description="Deformable first encoder convolution")
    deform_placement: DeformPlacement = Field(default="first")
    max_channel_multiplier: int = Field(default=4, ge=1)

    def level_channels(self, level: int) -> int:
        return self.base_channels * min(2 ** level, self.max_channel_multiplier)


class DiscriminatorConfig(BaseModel):
    """Patch classifier over condition ⊕ target"""
    in_channels: int = Field(..., ge=1, description="Condition channels + target channels")
    base_channels: int = Field(default=32, ge=1)
    n_layers: int = Field(default=3, ge=1, description="Stride-2 downsampling blocks")


class TrainConfig(BaseModel):
    """Everything a training or evaluation run depends on"""
    direction: Direction = Field(default="a2g")
    size: int = Field(default=32, description="Image size: 32, 64 or 256")
    epochs: int = Field(default=1, ge=1)
    batch_size: int = Field(default=4, ge=1)
    seed: int = Field(default=0)
    ablation: Ablation = Field(default="D")
    loss_weights: LossWeights = Field(default_factory=LossWeights)

    lr: float = Field(default=2e-4, gt=0, description="Adam learning rate")
    beta1: float = Field(default=0.5, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)

    depth: int = Field(default=3, ge=1)
    base_channels: int = Field(default=32, ge=1)
    feature_channels: int = Field(default=64, ge=1)
    attention_reduction: int = Field(default=4, ge=1)
    disc_base_channels: int = Field(default=32, ge=1)
    disc_layers: int = Field(default=3, ge=1)
    semantic_classes: int = Field(default=4, ge=2)
    deform_placement: DeformPlacement = Field(default="first")
    dtype: Literal["float64", "float32"] = Field(default="float64")

    max_iterations: Optional[int] = Field(default=None, ge=1, description="Stop after this many iterations")
    log_every: int = Field(default=10, ge=1)
    output_dir: str = Field(default="runs/default")
    write_samples: bool = Field(default=True)
    toy_samples: int = Field(default=64, ge=1, description="Samples generated when training on toy data")
    probe_iterations: int = Field(default=200, ge=0, description="Probe classifier fit after training; 0 skips it")

    @field_validator("size")
    @classmethod
    def validate_size(cls, v):
        if v not in (32, 64, 256):
            raise ValueError("Size must be one of: 32, 64, 256")
        return v

    @model_validator(mode="after")
    def apply_ablation(self) -> "TrainConfig":
        am, dc, ls = ABLATION_TOGGLES[self.ablation]
        self.loss_weights = self.loss_weights.model_copy(
            update={"use_attention": am, "use_deform": dc, "use_semantic_loss": ls}
        )
        return self

    @property
    def method(self) -> str:
        return ABLATION_METHODS[self.ablation]

    @property
    def image_channels(self) -> int:
        return 3


class LossLogRow(BaseModel):
    """One line of the per-iteration loss log"""
    iter: int = Field(..., ge=1)
    d1: float
    d2: Optional[float] = Field(None, description="Empty when the semantic-guided loss is off")
    g_adv: float
    l1_stage1: float
    l1_stage2: float
    tv: float
    total: float


class MetricRow(BaseModel):
    """One row of the evaluation report"""
    method: str
    direction: Direction
    size: int
    ssim: float
    psnr: float
    kl_mean: float
    kl_std: float
    top1: float
    top5: float


class AblationRow(BaseModel):
    """One row of the ablation table"""
    seed: str = Field(..., description="Seed the row was trained with, or 'mean'")
    baseline: Ablation
    method: str
    psnr: float
    ssim: float

    @field_validator("method")
    @classmethod
    def validate_method(cls, v):
        if v not in ABLATION_METHODS.values():
            raise ValueError(f"Method must be one of: {', '.join(ABLATION_METHODS.values())}")
        return v


class GradcheckResult(BaseModel):
    """Worst finite-difference disagreement observed for one operation"""
    module: str
    op: str
    max_rel_err: float = Field(..., ge=0)
    worst_input: str = Field(default="", description="Name of the input holding the worst entry")
    worst_index: Tuple[int, ...] = Field(default=())
    passed: bool

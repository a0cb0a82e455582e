"""
DTOs for the command-line commands
Validated views of the parsed arguments, one per subcommand
"""
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator

from app.core.data import LAYOUTS, TOY_SIZES


TOY_DATA = "toy"
GRADCHECK_MODULES = ("tensor", "deform", "attention", "losses")


class DataSource(BaseModel):
    """Either the literal 'toy' or a dataset directory"""
    data: str = Field(..., description="Dataset directory or 'toy'")
    layout: Optional[str] = Field(None, description="side-by-side | split-folders (auto-detected when omitted)")

    @field_validator("data")
    @classmethod
    def validate_data(cls, v):
        if not v or len(v.strip()) == 0:
            raise ValueError("--data cannot be empty")
        return v.strip()

    @field_validator("layout")
    @classmethod
    def validate_layout(cls, v):
        if v is not None and v not in LAYOUTS:
            raise ValueError(f"Layout must be one of: {', '.join(LAYOUTS)}")
        return v

    @property
    def is_toy(self) -> bool:
        return self.data == TOY_DATA


class TrainRequest(DataSource):
    config: Optional[str] = Field(None, description="key=value run configuration file")
    out: Optional[str] = Field(None, description="Output directory")


class EvalRequest(DataSource):
    checkpoint: str = Field(..., description="Checkpoint to evaluate")
    probe: Optional[str] = Field(None, description="Probe checkpoint, or 'uniform'")
    out: str = Field(..., description="Metric CSV to append to")
    include_stage1: bool = Field(False, description="Also append the intermediate-stage row")
    eval_samples: int = Field(16, ge=1, description="Held-out toy samples")


class GenerateRequest(DataSource):
    checkpoint: str = Field(..., description="Checkpoint to synthesise with")
    out: str = Field(..., description="Directory for the synthesised images")
    eval_samples: int = Field(16, ge=1)


class GradcheckRequest(BaseModel):
    module: Literal["tensor", "deform", "attention", "losses", "all"] = Field("all")
    seed: int = Field(0)
    max_entries: Optional[int] = Field(None, ge=1, description="Entries sampled per input tensor")


class AblateRequest(DataSource):
    config: Optional[str] = Field(None)
    out: Optional[str] = Field(None)
    seeds: int = Field(1, ge=1, description="Seeds per row")
    fraction: float = Field(1.0 / 3.0, gt=0, le=1, description="Training subset fraction")
    eval_samples: int = Field(16, ge=1)


class MakeToyRequest(BaseModel):
    out: str = Field(..., description="Dataset root to write")
    count: int = Field(64, ge=1)
    size: int = Field(32)
    seed: int = Field(0)

    @field_validator("size")
    @classmethod
    def validate_size(cls, v):
        if v not in TOY_SIZES:
            raise ValueError(f"Toy size must be one of: {', '.join(str(s) for s in TOY_SIZES)}")
        return v

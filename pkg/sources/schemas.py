from typing import ClassVar, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from sources.posenc import FORMS, NTK_DIMS, STRATEGIES
from sources.rpe2d import VARIANTS


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelSection(Section):
    patch_size: int = 2
    channels: int = 1
    hidden_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    num_classes: int = 8
    mlp_ratio: int = 4
    freq_dim: int = 256
    class_dropout: float = 0.1

    @field_validator("patch_size", "hidden_dim", "num_heads", "depth", "num_classes", "mlp_ratio", "freq_dim")
    @classmethod
    def positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be >= 1, got {value}")
        return value

    @field_validator("channels")
    @classmethod
    def known_channels(cls, value: int) -> int:
        if value not in (1, 3):
            raise ValueError(f"must be 1 or 3, got {value}")
        return value

    @field_validator("class_dropout")
    @classmethod
    def probability(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError(f"must lie in [0, 1), got {value}")
        return value


class PESection(Section):
    form: str = "rope"
    strategy: str = "rpe2d"
    base: float = 10000.0
    clamp_ratio: bool = False
    ntk_dim: str = "head"

    @field_validator("ntk_dim")
    @classmethod
    def known_ntk_dim(cls, value: str) -> str:
        if value not in NTK_DIMS:
            raise ValueError(f"unknown ntk_dim '{value}', expected one of {NTK_DIMS}")
        return value

    @field_validator("form")
    @classmethod
    def known_form(cls, value: str) -> str:
        if value not in FORMS:
            raise ValueError(f"unknown form '{value}', expected one of {FORMS}")
        return value

    @field_validator("strategy")
    @classmethod
    def known_strategy(cls, value: str) -> str:
        if value not in STRATEGIES:
            raise ValueError(f"unknown strategy '{value}', expected one of {STRATEGIES}")
        return value

    @field_validator("base")
    @classmethod
    def above_one(cls, value: float) -> float:
        if value <= 1.0:
            raise ValueError(f"must exceed 1, got {value}")
        return value


class RPESection(Section):
    variant: str = "grid"
    max_h: int = 64
    max_w: int = 64

    @field_validator("variant")
    @classmethod
    def known_variant(cls, value: str) -> str:
        if value not in VARIANTS:
            raise ValueError(f"unknown variant '{value}', expected one of {VARIANTS}")
        return value

    @field_validator("max_h", "max_w")
    @classmethod
    def positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be >= 1, got {value}")
        return value


class AugSection(Section):
    enabled: bool = True
    p_resize: float = 0.5
    min_crop_frac: float = 0.5
    base_resolution: int = 32

    @field_validator("p_resize")
    @classmethod
    def probability(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"must lie in [0, 1], got {value}")
        return value

    @field_validator("min_crop_frac")
    @classmethod
    def fraction(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError(f"must lie in (0, 1], got {value}")
        return value


class CondSection(Section):
    micro: bool = True
    dim_per_scalar: int = 32

    @field_validator("dim_per_scalar")
    @classmethod
    def positive_even(cls, value: int) -> int:
        if value < 2 or value % 2:
            raise ValueError(f"must be positive and even, got {value}")
        return value


class DiffusionSection(Section):
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @model_validator(mode="after")
    def ordered_betas(self):
        if self.timesteps < 1:
            raise ValueError(f"diffusion.timesteps: must be >= 1, got {self.timesteps}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(f"diffusion.beta_start: need 0 < beta_start <= beta_end < 1, "
                             f"got {self.beta_start}, {self.beta_end}")
        return self


class DataSection(Section):
    classes: List[int] = [0, 1, 2, 3, 4, 5]
    train_resolution: int = 16

    @field_validator("classes", mode="before")
    @classmethod
    def split_classes(cls, value):
        if isinstance(value, str):
            return [int(v) for v in value.replace(",", " ").split()]
        return value

    @field_validator("classes")
    @classmethod
    def non_empty(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("at least one class is required")
        if min(value) < 0:
            raise ValueError(f"class ids must be >= 0, got {value}")
        return value


class TrainSection(Section):
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 0.0
    checkpoint_interval: int = 500
    out_dir: str = "runs/default"
    resume: bool = False
    threads: int = 1

    @field_validator("steps")
    @classmethod
    def non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError(f"must be >= 0, got {value}")
        return value

    @field_validator("batch_size", "checkpoint_interval", "threads")
    @classmethod
    def positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be >= 1, got {value}")
        return value

    @field_validator("lr")
    @classmethod
    def positive_lr(cls, value: float) -> float:
        if value <= 0:
            raise ValueError(f"must be > 0, got {value}")
        return value


class SampleSection(Section):
    resolution: int = 32
    count: int = 64
    steps: int = 250
    cfg_scale: float = 4.0
    sampler: str = "ancestral"
    shift: bool = True
    attn_scale: bool = True
    seed: int = 0

    @field_validator("sampler")
    @classmethod
    def known_sampler(cls, value: str) -> str:
        if value not in ("ancestral", "ddim"):
            raise ValueError(f"unknown sampler '{value}', expected ancestral or ddim")
        return value

    @field_validator("cfg_scale")
    @classmethod
    def non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError(f"must be >= 0, got {value}")
        return value

    @field_validator("resolution", "count", "steps")
    @classmethod
    def positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be >= 1, got {value}")
        return value


class RunConfig(BaseModel):
    """Whole run configuration, one attribute per INI section."""
    model_config = ConfigDict(extra="forbid")

    model: ModelSection = Field(default_factory=ModelSection)
    pe: PESection = Field(default_factory=PESection)
    rpe: RPESection = Field(default_factory=RPESection)
    aug: AugSection = Field(default_factory=AugSection)
    cond: CondSection = Field(default_factory=CondSection)
    diffusion: DiffusionSection = Field(default_factory=DiffusionSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    sample: SampleSection = Field(default_factory=SampleSection)

    @model_validator(mode="after")
    def cross_checks(self):
        m = self.model
        if m.hidden_dim % m.num_heads:
            raise ValueError(f"model.hidden_dim: {m.hidden_dim} is not divisible by model.num_heads={m.num_heads}")
        head_dim = m.hidden_dim // m.num_heads
        if self.pe.form == "rope" and head_dim % 4:
            raise ValueError(f"model.num_heads: head dim {head_dim} must be divisible by 4 for RoPE-2D")
        if self.pe.form == "sinpe" and m.hidden_dim % 4:
            raise ValueError(f"model.hidden_dim: {m.hidden_dim} must be divisible by 4 for 2-D SinPE")
        if self.data.train_resolution % m.patch_size:
            raise ValueError(f"data.train_resolution: {self.data.train_resolution} is not divisible by "
                             f"model.patch_size={m.patch_size}")
        if self.sample.resolution % m.patch_size:
            raise ValueError(f"sample.resolution: {self.sample.resolution} is not divisible by "
                             f"model.patch_size={m.patch_size}")
        if self.aug.base_resolution < self.data.train_resolution:
            raise ValueError(f"aug.base_resolution: {self.aug.base_resolution} is below "
                             f"data.train_resolution={self.data.train_resolution}")
        h_train = self.data.train_resolution // m.patch_size
        if self.pe.strategy == "rpe2d":
            if self.rpe.max_h < h_train:
                raise ValueError(f"rpe.max_h: {self.rpe.max_h} is below the training patch grid {h_train}")
            if self.rpe.max_w < h_train:
                raise ValueError(f"rpe.max_w: {self.rpe.max_w} is below the training patch grid {h_train}")
        if max(self.data.classes) >= m.num_classes:
            raise ValueError(f"data.classes: class {max(self.data.classes)} exceeds model.num_classes={m.num_classes}")
        if self.sample.steps > self.diffusion.timesteps:
            raise ValueError(f"sample.steps: {self.sample.steps} exceeds diffusion.timesteps={self.diffusion.timesteps}")
        return self

    @property
    def h_train(self) -> int:
        return self.data.train_resolution // self.model.patch_size


class EvalRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    class_id: int
    family: str
    samples: int
    resolution: int
    spectral_error: Optional[float] = None
    w1: float
    blob_accuracy: Optional[float] = None

    def to_tsv(self) -> str:
        def fmt(value: Optional[float]) -> str:
            return "-" if value is None else f"{value:.6f}"
        return "\t".join([str(self.class_id), self.family, str(self.samples), str(self.resolution),
                          fmt(self.spectral_error), fmt(self.w1), fmt(self.blob_accuracy)])


class EvalReport(BaseModel):
    """
    Per-class metrics of one sample set.

    Tabular form: a header line followed by one row per class, tab separated,
    with '-' where a metric is not defined for the class family.
    """
    model_config = ConfigDict(extra="forbid")

    resolution: int
    sample_count: int
    rows: List[EvalRow]

    HEADER: ClassVar[str] = "class\tfamily\tsamples\tresolution\tspectral_error\tw1\tblob_accuracy"

    def to_tsv(self) -> str:
        return "\n".join([self.HEADER] + [row.to_tsv() for row in self.rows]) + "\n"

    @property
    def mean_spectral_error(self) -> Optional[float]:
        values = [r.spectral_error for r in self.rows if r.spectral_error is not None]
        return sum(values) / len(values) if values else None

    @property
    def mean_w1(self) -> float:
        return sum(r.w1 for r in self.rows) / len(self.rows) if self.rows else 0.0

    @property
    def combined_score(self) -> float:
        """mean spectral error + mean histogram W1, lower is better"""
        return (self.mean_spectral_error or 0.0) + self.mean_w1

    def __str__(self):
        return f"EvalReport(resolution={self.resolution}, samples={self.sample_count}, score={self.combined_score:.4f})"

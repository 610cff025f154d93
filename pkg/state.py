"""
State Models for the AMP Laboratory LangGraph Pipeline
Defines the experiment configuration schema, per-cell pipeline state and stage plans
"""

from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from core.amp_engine import OnsagerVariant
from core.density_evolution import ExpectationMethod
from core.matrix_sampler import EntryFamily


class StageStatus(str, Enum):
    """Stage and cell status enumeration"""
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"


class ProfileFamily(str, Enum):
    """Variance profile builders"""
    DENSE = "dense"
    BLOCK = "block"
    MULTIBLOCK = "multiblock"
    DREGULAR = "d-regular"
    FILE = "file"


class StrictModel(BaseModel):
    """Config models reject unknown keys"""
    model_config = ConfigDict(extra="forbid")


class ProfileSpec(StrictModel):
    """Variance profile S; block sizes are fractions of n"""
    family: ProfileFamily = ProfileFamily.DENSE
    zero_diagonal: bool = False
    block_fractions: List[float] = Field(default_factory=lambda: [0.5, 0.5])
    degree: Optional[int] = Field(default=None, ge=1)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check_family_params(self):
        if self.family == ProfileFamily.DREGULAR and self.degree is None:
            raise ValueError("d-regular profiles need 'degree'")
        if self.family == ProfileFamily.FILE and not self.path:
            raise ValueError("file profiles need 'path'")
        if any(f < 0 for f in self.block_fractions) or abs(sum(self.block_fractions) - 1.0) > 1e-9:
            raise ValueError("block_fractions must be non-negative and sum to 1")
        return self

    def block_sizes(self, n: int) -> List[int]:
        """Block sizes summing to n; the last block takes the rounding remainder"""
        sizes = [int(round(f * n)) for f in self.block_fractions[:-1]]
        return sizes + [n - sum(sizes)]


class CorrelationSpec(StrictModel):
    """Correlation profile T: a constant rho or a K x K block matrix"""
    rho: float = Field(default=0.0, ge=-1.0, le=1.0)
    rho_matrix: Optional[List[List[float]]] = None

    @field_validator("rho_matrix")
    @classmethod
    def _check_rho_matrix(cls, value):
        if value is None:
            return value
        array = np.asarray(value, dtype=float)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise ValueError("rho_matrix must be square")
        if not np.allclose(array, array.T):
            raise ValueError("rho_matrix must be symmetric")
        if np.any(np.abs(array) > 1.0):
            raise ValueError("rho_matrix entries must lie in [-1, 1]")
        return value


class ActivationSpec(StrictModel):
    family: Literal["identity", "positive_part", "tanh", "polynomial"] = "identity"
    eta_mode: Literal["none", "shift", "scale"] = "none"
    coefficients: Optional[List[float]] = None
    coefficient_file: Optional[str] = None
    bound: Optional[float] = Field(default=None, gt=0)


class VectorSpec(StrictModel):
    """Constant vector or one value per line in a file"""
    kind: Literal["constant", "file"] = "constant"
    value: float = 1.0
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check_path(self):
        if self.kind == "file" and not self.path:
            raise ValueError("file vectors need 'path'")
        return self

    def resolve(self, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, self.value)
        values = np.loadtxt(Path(self.path), dtype=float, ndmin=1)
        if values.shape != (n,):
            raise ValueError(f"{self.path} holds {values.size} values, expected {n}")
        return values


class EngineSpec(StrictModel):
    method: ExpectationMethod = ExpectationMethod.GAUSS_HERMITE
    nodes: int = Field(default=40, ge=2)
    mc_samples: int = Field(default=100_000, ge=100)
    seed: int = Field(default=0, ge=0)


class SpikeSpec(StrictModel):
    """A = strength * u v^T + W with u = v = 1/sqrt(n)"""
    strength: float = 1.0


class TestFunctionSpec(StrictModel):
    __test__ = False

    tag: Literal["coordinate-power", "product-pair", "absolute-value", "indicator-smoothed"]
    params: Dict[str, float] = Field(default_factory=dict)


class VerificationSpec(StrictModel):
    test_functions: List[TestFunctionSpec] = Field(
        default_factory=lambda: [TestFunctionSpec(tag="coordinate-power", params={"t": 1})])
    beta: Optional[VectorSpec] = None
    mc_samples: int = Field(default=100_000, ge=100)
    compare_variants: bool = True


class TreeOracleSpec(StrictModel):
    n: int = Field(default=4, ge=2, le=6)
    t: int = Field(default=2, ge=1, le=3)
    coefficients: List[float] = Field(default_factory=lambda: [0.0, 1.0])
    fresh_matrices: bool = True
    moment_samples: int = Field(default=0, ge=0)


class LotkaVolterraSpec(StrictModel):
    interaction_scale: float = 0.5
    tol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=10_000, ge=1)
    relaxation: float = Field(default=0.5, gt=0, le=1)


class ExperimentConfig(StrictModel):
    """Declarative description of one experiment"""
    experiment_id: str = "experiment"
    profile: ProfileSpec = Field(default_factory=ProfileSpec)
    correlation: CorrelationSpec = Field(default_factory=CorrelationSpec)
    distribution: EntryFamily = EntryFamily.GAUSSIAN
    activation: ActivationSpec = Field(default_factory=ActivationSpec)
    x0: VectorSpec = Field(default_factory=VectorSpec)
    eta: Optional[VectorSpec] = None
    variant: OnsagerVariant = OnsagerVariant.AMPZ
    t_max: int = Field(default=2, ge=1)
    n: List[int] = Field(default_factory=lambda: [100], min_length=1)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    engine: EngineSpec = Field(default_factory=EngineSpec)
    spike: Optional[SpikeSpec] = None
    verification: VerificationSpec = Field(default_factory=VerificationSpec)
    tree_oracle: TreeOracleSpec = Field(default_factory=TreeOracleSpec)
    lotka_volterra: LotkaVolterraSpec = Field(default_factory=LotkaVolterraSpec)
    spectral_norm: bool = True
    # cells with n at most this size get a triplet dump of W
    dump_matrix_max_n: int = Field(default=200, ge=0)
    output_dir: str = "results"

    @field_validator("n")
    @classmethod
    def _check_sizes(cls, value):
        if any(n < 2 for n in value):
            raise ValueError("every n must be at least 2")
        return value

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, value):
        if any(seed < 0 for seed in value):
            raise ValueError("seeds must be non-negative")
        return value

    @model_validator(mode="after")
    def _check_correlation_blocks(self):
        if (self.correlation.rho_matrix is not None
                and len(self.correlation.rho_matrix) != len(self.profile.block_fractions)):
            raise ValueError("rho_matrix size must match profile.block_fractions")
        return self


class StageRecord(BaseModel):
    """Audit entry of one stage attempt"""
    cell_id: str
    timestamp: datetime = Field(default_factory=datetime.now)
    stage_name: str
    action: str
    status: StageStatus
    details: Dict[str, Any] = {}
    duration_ms: Optional[int] = None
    error_message: Optional[str] = None


class StageMetrics(BaseModel):
    stage_name: str
    executions: int = 0
    successes: int = 0
    failures: int = 0
    average_duration_ms: float = 0.0


class ExperimentState(BaseModel):
    """State of one (n, seed) cell flowing through the pipeline"""

    # Core identifiers
    experiment_id: str
    n: int
    seed: int
    config: ExperimentConfig
    config_hash: str
    output_dir: str

    # Pipeline control
    plan: str = "full"
    planned_stages: List[str] = []
    completed_stages: List[str] = []
    current_stage: Optional[str] = None
    overall_status: StageStatus = StageStatus.PENDING
    failed_stage: Optional[str] = None

    # Outputs
    artifacts: Dict[str, str] = {}
    checks: Dict[str, float] = {}

    # Audit and tracking
    stage_records: List[StageRecord] = []
    stage_metrics: Dict[str, StageMetrics] = {}

    created_at: datetime = Field(default_factory=datetime.now)
    updated_at: datetime = Field(default_factory=datetime.now)
    completed_at: Optional[datetime] = None

    @property
    def cell_id(self) -> str:
        return f"n{self.n}_seed{self.seed}"

    @property
    def cell_dir(self) -> Path:
        return Path(self.output_dir) / "cells" / self.cell_id

    def add_stage_record(self, stage_name: str, action: str, status: StageStatus,
                         details: Dict[str, Any] = None, error_message: str = None,
                         duration_ms: int = None):
        """Add an audit entry"""
        self.stage_records.append(StageRecord(
            cell_id=self.cell_id,
            stage_name=stage_name,
            action=action,
            status=status,
            details=details or {},
            duration_ms=duration_ms,
            error_message=error_message,
        ))
        self.updated_at = datetime.now()

    def update_stage_metrics(self, stage_name: str, success: bool, duration_ms: int):
        if stage_name not in self.stage_metrics:
            self.stage_metrics[stage_name] = StageMetrics(stage_name=stage_name)

        metrics = self.stage_metrics[stage_name]
        metrics.executions += 1
        if success:
            metrics.successes += 1
        else:
            metrics.failures += 1
        metrics.average_duration_ms += (duration_ms - metrics.average_duration_ms) / metrics.executions

    def next_stage(self) -> Optional[str]:
        """First planned stage not completed yet, or None when the cell is done or failed"""
        if self.overall_status == StageStatus.FAILED:
            return None
        for stage in self.planned_stages:
            if stage not in self.completed_stages:
                return stage
        return None

    def get_summary(self) -> Dict[str, Any]:
        return {
            "cell_id": self.cell_id,
            "n": self.n,
            "seed": self.seed,
            "plan": self.plan,
            "overall_status": self.overall_status.value,
            "completed_stages": self.completed_stages,
            "failed_stage": self.failed_stage,
            "artifacts": sorted(self.artifacts),
        }


class StagePlan(BaseModel):
    """Ordered stages run by one subcommand"""
    plan_name: str
    stages: List[str]
    description: str = ""


STAGE_ORDER = ["sample", "density_evolution", "amp", "verification", "tree_oracle", "lotka_volterra"]

# Predefined stage plans, one per subcommand
STAGE_PLANS = {
    "sample": StagePlan(
        plan_name="sample",
        stages=["sample"],
        description="profiles, matrix samples and spectral norms",
    ),
    "de": StagePlan(
        plan_name="de",
        stages=["density_evolution"],
        description="density evolution covariances and mean schedule",
    ),
    "amp": StagePlan(
        plan_name="amp",
        stages=["sample", "density_evolution", "amp"],
        description="AMP trajectories",
    ),
    "verify": StagePlan(
        plan_name="verify",
        stages=["sample", "density_evolution", "amp", "verification"],
        description="AMP trajectories checked against density evolution",
    ),
    "tree-oracle": StagePlan(
        plan_name="tree-oracle",
        stages=["tree_oracle"],
        description="tree-sum identity and desk-scale moment checks",
    ),
    "lv": StagePlan(
        plan_name="lv",
        stages=["sample", "lotka_volterra"],
        description="Lotka-Volterra equilibria",
    ),
    "full": StagePlan(
        plan_name="full",
        stages=list(STAGE_ORDER),
        description="every stage",
    ),
}

"""
Base Stage Class for the AMP Laboratory Pipeline
Provides the common run wrapper (timing, audit entries, metrics, failure capture)
and the per-cell context that carries numerical objects between stages
"""

import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from core.activations import Activation, make_activation
from core.amp_engine import Trajectory
from core.density_evolution import DEState, GaussianExpectationConfig
from core.matrix_sampler import EntryDistribution, SampledMatrix, SpikedMatrix
from core.profiles import CorrelationProfile, VarianceProfile
from state import ExperimentState, StageStatus
from utils.artifacts import stamp, write_csv
from utils.logger import StructuredLogger, get_logger


@dataclass
class CellContext:
    """Numerical objects of one (n, seed) cell; kept out of the graph state"""
    cell_id: str
    S: Optional[VarianceProfile] = None
    T: Optional[CorrelationProfile] = None
    W: Optional[SampledMatrix] = None
    A: Optional[SpikedMatrix] = None
    h: Optional[Activation] = None
    x0: Any = None
    eta: Any = None
    de: Optional[DEState] = None
    trajectory: Optional[Trajectory] = None
    variant_runs: Dict[str, Trajectory] = field(default_factory=dict)

    def release_matrices(self):
        """Drop the sampled matrices once the cell is done; trajectories stay for cross-seed reports"""
        self.W = None
        self.A = None


class CellStore:
    """Thread-safe registry of cell contexts"""

    def __init__(self):
        self._cells: Dict[str, CellContext] = {}
        self._lock = threading.Lock()

    def get(self, cell_id: str) -> CellContext:
        with self._lock:
            if cell_id not in self._cells:
                self._cells[cell_id] = CellContext(cell_id=cell_id)
            return self._cells[cell_id]

    def peek(self, cell_id: str) -> Optional[CellContext]:
        with self._lock:
            return self._cells.get(cell_id)

    def clear(self):
        with self._lock:
            self._cells.clear()


# Global cell store instance
cell_store = CellStore()


class BaseStage(ABC):
    """
    Abstract base class for pipeline stages
    Subclasses implement execute(); run() adds logging, audit records and failure capture
    """

    def __init__(self, stage_name: str, config: Dict[str, Any] = None):
        self.stage_name = stage_name
        self.config = config or {}
        self.logger = get_logger(f"stage.{stage_name}")
        self.events = StructuredLogger(f"stage.{stage_name}")
        self.execution_count = 0
        self.success_count = 0
        self.failure_count = 0

    @abstractmethod
    def execute(self, state: ExperimentState, context: CellContext) -> ExperimentState:
        """Run the stage's numerical work for one cell"""

    def run(self, state: ExperimentState) -> ExperimentState:
        """
        Execution wrapper: a raised exception marks the cell FAILED with this stage
        named as the failed one; numerical stages are deterministic and are not retried
        """
        start_time = time.time()
        self.execution_count += 1
        context = cell_store.get(state.cell_id)

        try:
            self.events.log_stage_start(self.stage_name, state.cell_id, n=state.n, seed=state.seed)
            state.current_stage = self.stage_name
            state.overall_status = StageStatus.IN_PROGRESS
            state.add_stage_record(self.stage_name, "started", StageStatus.IN_PROGRESS,
                                   details={"execution_count": self.execution_count})

            if not self._validate_preconditions(state, context):
                raise ValueError(f"Preconditions not met for {self.stage_name}")

            updated_state = self.execute(state, context)

            if not self._validate_postconditions(updated_state, context):
                raise ValueError(f"Postconditions not met for {self.stage_name}")

            duration_ms = int((time.time() - start_time) * 1000)
            self.success_count += 1
            updated_state.update_stage_metrics(self.stage_name, True, duration_ms)
            updated_state.completed_stages.append(self.stage_name)
            updated_state.add_stage_record(self.stage_name, "completed", StageStatus.COMPLETED,
                                           duration_ms=duration_ms)
            self.events.log_stage_complete(self.stage_name, state.cell_id, duration_ms)
            return updated_state

        except Exception as e:
            duration_ms = int((time.time() - start_time) * 1000)
            self.failure_count += 1
            state.update_stage_metrics(self.stage_name, False, duration_ms)
            state.add_stage_record(
                self.stage_name, "failed", StageStatus.FAILED,
                details={"error_type": type(e).__name__},
                error_message=str(e),
                duration_ms=duration_ms,
            )
            state.overall_status = StageStatus.FAILED
            state.failed_stage = self.stage_name
            self.events.log_stage_error(self.stage_name, state.cell_id, e)
            return state

    def _validate_preconditions(self, state: ExperimentState, context: CellContext) -> bool:
        return True

    def _validate_postconditions(self, state: ExperimentState, context: CellContext) -> bool:
        return True

    def write_table(self, state: ExperimentState, name: str, frame: pd.DataFrame,
                    leading: Optional[Dict[str, Any]] = None):
        """Stamp and write a per-cell table, recording it in the state's artifacts"""
        path = write_csv(stamp(frame, state.config_hash, leading), state.cell_dir / f"{name}.csv")
        state.artifacts[name] = str(path)
        return path

    def record_check(self, state: ExperimentState, check: str, value: float,
                     passed: Optional[bool] = None):
        state.checks[check] = float(value)
        if passed is not None:
            self.events.log_check(self.stage_name, state.cell_id, check, passed, value)

    def get_metrics(self) -> Dict[str, Any]:
        success_rate = self.success_count / self.execution_count if self.execution_count > 0 else 0
        return {
            "stage_name": self.stage_name,
            "execution_count": self.execution_count,
            "success_count": self.success_count,
            "failure_count": self.failure_count,
            "success_rate": success_rate,
        }


def build_activation(state: ExperimentState) -> Activation:
    spec = state.config.activation
    return make_activation(spec.family, spec.eta_mode, coefficients=spec.coefficients,
                           coefficient_file=spec.coefficient_file, bound=spec.bound)


def build_engine(state: ExperimentState) -> GaussianExpectationConfig:
    spec = state.config.engine
    return GaussianExpectationConfig(method=spec.method, nodes=spec.nodes,
                                     mc_samples=spec.mc_samples, seed=spec.seed)


def build_distribution(state: ExperimentState) -> EntryDistribution:
    return EntryDistribution(state.config.distribution)


def resolve_inputs(state: ExperimentState, context: CellContext):
    """x0 and eta vectors of the cell, cached on the context"""
    if context.x0 is None:
        context.x0 = state.config.x0.resolve(state.n)
        context.eta = None if state.config.eta is None else state.config.eta.resolve(state.n)
    return context.x0, context.eta


class StageRegistry:
    """Registry for managing stage instances"""

    def __init__(self):
        self._stages: Dict[str, BaseStage] = {}

    def register(self, stage: BaseStage):
        self._stages[stage.stage_name] = stage

    def get(self, stage_name: str) -> Optional[BaseStage]:
        return self._stages.get(stage_name)

    def list_stages(self) -> List[str]:
        return list(self._stages.keys())

    def get_all_metrics(self) -> Dict[str, Dict[str, Any]]:
        return {name: stage.get_metrics() for name, stage in self._stages.items()}


# Global stage registry instance
stage_registry = StageRegistry()


def spike_vectors(n: int):
    """Unit-norm u = v with entries 1/sqrt(n)"""
    u = np.full(n, 1.0 / np.sqrt(n))
    return u, u.copy()

"""
LangGraph Workflow Orchestrator for the AMP Laboratory
Runs every (n, seed) cell through the planned stages, then assembles the
experiment-level tables, the cross-seed gap report and the MANIFEST
"""

import asyncio
import time
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from langgraph.checkpoint.memory import MemorySaver
from langgraph.graph import END, START, StateGraph

from core.verification import convergence_gap, gap_decreases_with_n
from nodes import (
    amp_node, density_evolution_node, lotka_volterra_node, sample_node, tree_oracle_node,
    verification_node
)
from stages.base_stage import cell_store, stage_registry
from stages.verification_stage import build_test_functions
from state import STAGE_ORDER, STAGE_PLANS, ExperimentConfig, ExperimentState, StageStatus
from utils.artifacts import aggregate_csv, config_hash, stamp, write_csv, write_manifest
from utils.logger import StructuredLogger

# tables that depend on n only; one copy per n is kept when aggregating
PER_N_TABLES = ("de_state", "de_summary", "mu_schedule")

GAP_COLUMNS = ["n", "t", "phi_tag", "variant", "empirical", "reference", "gap", "se", "seeds"]


class ExperimentGraph:
    """
    LangGraph-based orchestrator for AMP experiments
    Each cell walks the planned stages; a failed stage routes the cell to END
    """

    def __init__(self, config: Dict[str, Any] = None):
        self.config = config or {}
        self.logger = StructuredLogger("experiment_graph")

        self.graph = self._create_workflow_graph()

        # Add memory for state persistence
        self.memory = MemorySaver()
        self.compiled_graph = self.graph.compile(checkpointer=self.memory)
        self.logger.logger.info(f"Initialized {len(stage_registry.list_stages())} stages")

    def _create_workflow_graph(self) -> StateGraph:
        workflow = StateGraph(ExperimentState)

        workflow.add_node("sample", sample_node)
        workflow.add_node("density_evolution", density_evolution_node)
        workflow.add_node("amp", amp_node)
        workflow.add_node("verification", verification_node)
        workflow.add_node("tree_oracle", tree_oracle_node)
        workflow.add_node("lotka_volterra", lotka_volterra_node)

        routes = {stage: stage for stage in STAGE_ORDER}
        routes["end"] = END

        workflow.add_conditional_edges(START, self._route_next_stage, routes)
        for stage in STAGE_ORDER:
            workflow.add_conditional_edges(stage, self._route_next_stage, routes)

        return workflow

    def _route_next_stage(self, state: ExperimentState) -> str:
        """Next planned stage, or end once the plan is done or a stage failed"""
        next_stage = state.next_stage()
        return "end" if next_stage is None else next_stage

    def create_state(self, config: ExperimentConfig, n: int, seed: int, plan: str = "full",
                     output_dir: Optional[str] = None) -> ExperimentState:
        if plan not in STAGE_PLANS:
            raise ValueError(f"Unknown stage plan '{plan}'; choose from {sorted(STAGE_PLANS)}")
        return ExperimentState(
            experiment_id=config.experiment_id,
            n=n,
            seed=seed,
            config=config,
            config_hash=config_hash(config),
            output_dir=output_dir or config.output_dir,
            plan=plan,
            planned_stages=list(STAGE_PLANS[plan].stages),
        )

    async def run_cell(self, config: ExperimentConfig, n: int, seed: int, plan: str = "full",
                       output_dir: Optional[str] = None) -> ExperimentState:
        """
        Run one (n, seed) cell through the graph

        Returns:
            Final cell state; on failure failed_stage names the stage that raised
        """
        initial_state = self.create_state(config, n, seed, plan, output_dir)
        thread_id = f"{config.experiment_id}:{plan}:{initial_state.cell_id}:{uuid.uuid4().hex[:8]}"

        try:
            result = await self.compiled_graph.ainvoke(initial_state,
                                                       config={"configurable": {"thread_id": thread_id}})
            final_state = self._extract_final_state(result, initial_state)
        except Exception as e:
            self.logger.logger.error(f"Cell {initial_state.cell_id} failed outside its stages: {e}")
            initial_state.overall_status = StageStatus.FAILED
            initial_state.failed_stage = initial_state.current_stage or "graph"
            initial_state.add_stage_record("graph", "cell_failed", StageStatus.FAILED,
                                           error_message=str(e))
            final_state = initial_state

        if final_state.overall_status != StageStatus.FAILED:
            final_state.overall_status = StageStatus.COMPLETED
            final_state.completed_at = datetime.now()
        context = cell_store.peek(final_state.cell_id)
        if context is not None:
            context.release_matrices()
        return final_state

    async def run_experiment(self, config: ExperimentConfig, plan: str = "full",
                             output_dir: Optional[str] = None, workers: int = 1) -> Dict[str, Any]:
        """
        Run every (n, seed) cell with at most `workers` cells in flight, then write the
        experiment-level tables and MANIFEST.json

        Returns:
            Summary with 'status' ('completed' | 'failed'), 'failed_stage' and 'manifest'
        """
        started_at = datetime.now()
        start_time = time.time()
        out = Path(output_dir or config.output_dir)
        cells = [(n, seed) for n in config.n for seed in config.seeds]
        semaphore = asyncio.Semaphore(max(1, workers))
        cell_store.clear()

        self.logger.log_experiment_start(config.experiment_id, len(cells), plan=plan, workers=workers)

        async def run_single(n: int, seed: int) -> ExperimentState:
            async with semaphore:
                return await self.run_cell(config, n, seed, plan, str(out))

        states = await asyncio.gather(*[run_single(n, seed) for n, seed in cells])
        states = sorted(states, key=lambda s: (s.n, s.seed))

        failed = [s for s in states if s.overall_status == StageStatus.FAILED]
        failed_stage = failed[0].failed_stage if failed else None

        tables = self._aggregate_tables(states, out)
        extra: Dict[str, Any] = {"plan": plan, "stage_metrics": stage_registry.get_all_metrics()}

        if not failed and "verification" in STAGE_PLANS[plan].stages:
            try:
                gap_path, trend = self._write_gap_report(config, states, out)
                tables["gap_report"] = str(gap_path)
                extra["gap_decreases_with_n"] = trend
            except Exception as e:
                self.logger.logger.error(f"Cross-seed gap report failed: {e}", exc_info=True)
                failed_stage = "verification"

        manifest = write_manifest(
            out / "MANIFEST.json", config.experiment_id, config_hash(config),
            cells={s.cell_id: s.get_summary() for s in states},
            failed_stage=failed_stage, tables=tables, started_at=started_at, extra=extra,
        )
        cell_store.clear()

        duration_ms = int((time.time() - start_time) * 1000)
        status = "failed" if failed_stage else "completed"
        self.logger.log_experiment_complete(config.experiment_id, duration_ms, status=status,
                                            failed_cells=len(failed))
        return {"status": status, "failed_stage": failed_stage, "manifest": str(manifest),
                "cells": [s.get_summary() for s in states]}

    def _aggregate_tables(self, states: List[ExperimentState], out: Path) -> Dict[str, str]:
        """Concatenate per-cell CSVs into experiment-level CSVs in (n, seed) order"""
        names = sorted({name for s in states for name, path in s.artifacts.items()
                        if path.endswith(".csv")})
        first_seed = {}
        for s in states:
            first_seed.setdefault(s.n, s.seed)

        tables = {}
        for name in names:
            paths = [s.artifacts[name] for s in states if name in s.artifacts
                     and (name not in PER_N_TABLES or s.seed == first_seed[s.n])]
            path = aggregate_csv(paths, out / f"{name}.csv")
            if path is not None:
                tables[name] = str(path)
        return tables

    def _write_gap_report(self, config: ExperimentConfig, states: List[ExperimentState], out: Path):
        """gap_report.csv: per n and test function, the seed-median gap to the DE reference"""
        spec = config.verification
        phis = build_test_functions(config)
        reports = {phi.tag: [] for phi in phis}
        rows = []

        for n in config.n:
            contexts = [cell_store.peek(s.cell_id) for s in states if s.n == n]
            trajectories = [c.trajectory for c in contexts if c is not None and c.trajectory is not None]
            if not trajectories:
                continue
            de = contexts[0].de
            beta = None if spec.beta is None else spec.beta.resolve(n)
            for phi in phis:
                report = convergence_gap(trajectories, de, phi, beta=beta, mu=de.mu,
                                         mc_samples=spec.mc_samples, seed=config.engine.seed,
                                         experiment_id=config.experiment_id)
                reports[phi.tag].append(report)
                self.logger.log_metric(f"gap:{phi.tag}", report.gap, n=n)
                row = report.model_dump(include=set(GAP_COLUMNS))
                row["seeds"] = ";".join(str(seed) for seed in report.seeds)
                rows.append(row)

        trend = {tag: gap_decreases_with_n(items) for tag, items in reports.items() if items}
        frame = stamp(pd.DataFrame.from_records(rows, columns=GAP_COLUMNS), config_hash(config),
                      leading={"experiment_id": config.experiment_id})
        return write_csv(frame, out / "gap_report.csv"), trend

    def _extract_final_state(self, result, initial_state: ExperimentState) -> ExperimentState:
        """LangGraph hands back the state as a dict-like of field values"""
        if isinstance(result, ExperimentState):
            return result
        try:
            return ExperimentState.model_validate(dict(result))
        except Exception as e:
            self.logger.logger.warning(f"Could not rebuild final state: {e}, using initial state")
            initial_state.updated_at = datetime.now()
            return initial_state


# Global workflow instance
experiment_graph = None


def get_graph(config: Dict[str, Any] = None) -> ExperimentGraph:
    """Get or create global graph instance"""
    global experiment_graph
    if experiment_graph is None:
        experiment_graph = ExperimentGraph(config)
    return experiment_graph

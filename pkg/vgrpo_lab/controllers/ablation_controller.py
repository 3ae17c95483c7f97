"""
Named ablation grids.

Each cell is a full post-training run in its own directory under the grid
root, started from one shared base checkpoint. The grid root gets a
``summary.json`` collecting the per-cell outcomes.
"""
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

from ..config import ConfigManager
from ..utils.exceptions import ConfigurationError
from ..utils.metrics import METRICS_SCHEMA_VERSION
from .experiment_controller import ExperimentController, write_json

logger = logging.getLogger(__name__)

Cell = Tuple[str, Dict[str, Any]]

_SDE_ROLLOUTS = {"sampler.kind": "sde_first_order", "sampler.noise_level": 0.7}

GRIDS: Dict[str, List[Cell]] = {
    "variance_reduction": [
        ("shared_stratified", {"surrogate.shared_pairs": True, "surrogate.stratified": True}),
        ("shared_uniform", {"surrogate.shared_pairs": True, "surrogate.stratified": False}),
        ("independent_stratified", {"surrogate.shared_pairs": False, "surrogate.stratified": True}),
        ("independent_uniform", {"surrogate.shared_pairs": False, "surrogate.stratified": False}),
    ],
    "weighting": [
        ("adaptive", {"surrogate.weighting": "adaptive"}),
        ("generic_uniform", {"surrogate.weighting": "generic", "surrogate.weight_fn": "uniform"}),
        ("generic_elbo", {"surrogate.weighting": "generic", "surrogate.weight_fn": "elbo"}),
    ],
    "n_mc": [
        ("n_mc_2", {"surrogate.n_mc": 2}),
        ("n_mc_4", {"surrogate.n_mc": 4}),
        ("n_mc_8", {"surrogate.n_mc": 8}),
    ],
    "regulation": [
        ("ratio_clip", {"grpo.preset": "ratio_clip",
                        "rewards.terms": [{"kind": "region_indicator"}]}),
        ("adv_soft_clip", {"grpo.preset": "adv_soft_clip",
                           "rewards.terms": [{"kind": "region_indicator"}]}),
    ],
    # With one gradient step per iteration the ratio is exactly 1, so the clip never binds.
    "on_policy": [
        ("soft_clip", {"grpo.steps_per_iteration": 1, "grpo.preset": "adv_soft_clip"}),
        ("unregulated", {"grpo.steps_per_iteration": 1, "grpo.preset": "ratio_clip"}),
    ],
    "prediction_space": [
        ("x", {"surrogate.adaptive_space": "x"}),
        ("v", {"surrogate.adaptive_space": "v"}),
        ("eps", {"surrogate.adaptive_space": "eps"}),
    ],
    "baseline": [
        ("vgrpo", dict(_SDE_ROLLOUTS, **{"grpo.algorithm": "vgrpo"})),
        ("mdp", dict(_SDE_ROLLOUTS, **{"grpo.algorithm": "mdp"})),
    ],
}


def grid_cells(name: str) -> List[Cell]:
    """
    Raises:
        ConfigurationError: For an unknown grid name
    """
    if name not in GRIDS:
        raise ConfigurationError(f"unknown ablation grid {name!r}; choose from {sorted(GRIDS)}")
    return GRIDS[name]


class AblationController:
    """
    Runs every cell of one named grid.
    """

    def __init__(self, grid: str, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        """
        Args:
            grid: Grid name, one of ``GRIDS``
            config_file: Base configuration shared by all cells
            overrides: Command-line overrides applied to every cell
        """
        self.grid = grid
        self.cells = grid_cells(grid)
        self.config_file = config_file
        self.overrides = dict(overrides or {})
        self.base_manager = ConfigManager(config_file, self.overrides)
        self.root = os.path.join(self.base_manager.get("run.output_dir"), grid)

    def _base_checkpoint(self) -> str:
        """Shared starting point: the configured base checkpoint, or one pretrained at the grid root."""
        configured = self.base_manager.get("pretrain.checkpoint")
        if configured:
            return configured
        path = os.path.join(self.root, "checkpoints", "base.ckpt")
        if not os.path.exists(path) and not self.base_manager.get("run.resume"):
            logger.info(f"Pretraining the shared base model for grid {self.grid}")
            manager = ConfigManager(self.config_file, dict(self.overrides, **{
                "run.output_dir": os.path.join(self.root, "base"), "pretrain.checkpoint": path}))
            ExperimentController(manager).run_pretrain()
        return path

    def cell_manager(self, name: str, cell_overrides: Dict[str, Any], base_checkpoint: str) -> ConfigManager:
        overrides = dict(self.overrides)
        overrides.update(cell_overrides)
        overrides["run.output_dir"] = os.path.join(self.root, name)
        overrides["pretrain.checkpoint"] = base_checkpoint
        return ConfigManager(self.config_file, overrides)

    def run(self) -> Dict:
        """
        Run every cell and write the grid summary.

        Returns:
            Dict: The grid summary
        """
        base_checkpoint = self._base_checkpoint()
        cells = {}
        for name, cell_overrides in self.cells:
            logger.info(f"Ablation {self.grid}: running cell {name}")
            summary = ExperimentController(self.cell_manager(name, cell_overrides, base_checkpoint)).run_posttrain()
            cells[name] = {
                "overrides": cell_overrides,
                "run_dir": os.path.join(self.root, name),
                "final_heldout_reward": summary["final_heldout_reward"],
                "initial_heldout_reward": summary["initial_heldout_reward"],
                "relative_improvement": summary["relative_improvement"],
                "mean_within_group_cv": summary["mean_within_group_cv"],
                "incidents": len(summary["incidents"]),
                "collapse_events": summary["collapse_events"],
                "reward_threshold": summary["reward_threshold"],
                "steps_to_threshold": summary["steps_to_threshold"],
                "gradient_steps": summary["gradient_steps"],
                "nfe_old_total": summary["nfe_old_total"],
                "nfe_new_total": summary["nfe_new_total"],
            }

        report = {
            "metrics_schema": METRICS_SCHEMA_VERSION,
            "grid": self.grid,
            "base_checkpoint": base_checkpoint,
            "cells": cells,
        }
        if self.grid == "baseline":
            vgrpo, mdp = cells["vgrpo"]["steps_to_threshold"], cells["mdp"]["steps_to_threshold"]
            report["steps_to_threshold_ratio"] = mdp / vgrpo if vgrpo and mdp is not None else None
        os.makedirs(self.root, exist_ok=True)
        write_json(os.path.join(self.root, "summary.json"), report)
        logger.info(f"Ablation {self.grid} finished: {len(cells)} cells")
        return report

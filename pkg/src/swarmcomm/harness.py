"""Evaluation, baseline comparison, hyperparameter sweep, and reporting.

Losses are negative rewards averaged over the horizon; communication cost is
the per-step maximum degree of the realized (post link-failure) communication
graph, time-averaged within each rollout and then aggregated over rollouts.
Full-communication policies report zeroed degree columns behind a flag instead
of their trivial all-pairs degrees.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .dsl import CommGraph, degree_stats
from .env import Policy, RewardParams, TaskConfig, rollout, spawn_rollout_rngs
from .synth import SynthConfig, SynthDataset, SynthResult, mcmc_synthesize

Array = np.ndarray

CSV_COLUMNS = [
    "policy",
    "task",
    "seed",
    "loss_mean",
    "loss_std",
    "in_deg_mean",
    "in_deg_std",
    "out_deg_mean",
    "out_deg_std",
    "total_deg_mean",
    "total_deg_std",
    "combined_J",
]


class HarnessError(RuntimeError):
    pass


@dataclass
class Metrics:
    policy: str
    task: str
    seed: int
    n_rollouts: int
    loss_mean: float
    loss_std: float
    in_deg_mean: float
    in_deg_std: float
    out_deg_mean: float
    out_deg_std: float
    total_deg_mean: float
    total_deg_std: float
    combined_J: float
    comm_weight: float
    full_comm: bool = False
    # whole-rollout max degree (vs the time-averaged per-step max above);
    # logged in the JSON only, the CSV schema stays fixed
    rollout_max_deg_mean: float = 0.0

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Metrics":
        return cls(**doc)

    def csv_row(self) -> list:
        return [
            self.policy,
            self.task,
            self.seed,
            repr(self.loss_mean),
            repr(self.loss_std),
            repr(self.in_deg_mean),
            repr(self.in_deg_std),
            repr(self.out_deg_mean),
            repr(self.out_deg_std),
            repr(self.total_deg_mean),
            repr(self.total_deg_std),
            repr(self.combined_J),
        ]


def _recount_degrees(graph: CommGraph) -> tuple[int, int, int]:
    """Independent brute-force adjacency recount used in verification mode."""
    adj = np.zeros((graph.n_agents, graph.n_agents), dtype=np.int64)
    for j, i in graph.edges:
        adj[j, i] = 1
    indeg = adj.sum(axis=0)
    outdeg = adj.sum(axis=1)
    return int(indeg.max()), int(outdeg.max()), int((indeg + outdeg).max())


def evaluate(
    policy: Policy,
    cfg: TaskConfig,
    n_rollouts: int,
    comm_weight: float,
    rng_or_seed: Union[np.random.Generator, int],
    reward_params: Optional[RewardParams] = None,
    gamma: float = 0.99,
    seed_label: int = 0,
    verify_degrees: bool = False,
) -> Metrics:
    """Run evaluation rollouts and aggregate loss and degree statistics.

    The combined objective is the discounted cumulative reward minus
    comm_weight times the summed per-step max degree, averaged over rollouts.
    """
    if n_rollouts < 1:
        raise HarnessError("n_rollouts must be >= 1")
    if isinstance(rng_or_seed, (int, np.integer)):
        rngs = spawn_rollout_rngs(int(rng_or_seed), n_rollouts)
        seed_label = int(rng_or_seed)
    else:
        rngs = [rng_or_seed] * n_rollouts  # one stream, consumed sequentially
    full = bool(getattr(policy, "full_comm", False))
    losses, in_degs, out_degs, tot_degs, peak_degs, rewards_disc, comm_sums = [], [], [], [], [], [], []
    for k in range(n_rollouts):
        try:
            traj = rollout(policy, cfg, rngs[k], reward_params)
        except Exception as exc:
            raise HarnessError(f"rollout {k} failed: {exc}") from exc
        step_in, step_out, step_tot = [], [], []
        for step in traj.steps:
            d_in, d_out, d_tot = degree_stats(step.graph)
            if verify_degrees:
                recount = _recount_degrees(step.graph)
                if (d_in, d_out, d_tot) != recount:
                    raise HarnessError(f"degree mismatch: {(d_in, d_out, d_tot)} vs {recount}")
            step_in.append(d_in)
            step_out.append(d_out)
            step_tot.append(d_tot)
        horizon = len(traj.steps)
        losses.append(-traj.total_reward() / horizon)
        in_degs.append(float(np.mean(step_in)))
        out_degs.append(float(np.mean(step_out)))
        tot_degs.append(float(np.mean(step_tot)))
        peak_degs.append(float(np.max(step_tot)))
        rewards_disc.append(traj.discounted_reward(gamma))
        comm_sums.append(float(np.sum(step_tot)))

    def stats(xs: Sequence[float]) -> tuple[float, float]:
        arr = np.asarray(xs)
        return float(arr.mean()), float(arr.std())

    loss_mean, loss_std = stats(losses)
    if full:
        # all-pairs communication: degrees are reported as zeros behind the flag
        # and the combined objective carries no degree term
        in_mean = in_std = out_mean = out_std = tot_mean = tot_std = 0.0
        peak_mean = 0.0
        combined_j = float(np.mean(rewards_disc))
    else:
        in_mean, in_std = stats(in_degs)
        out_mean, out_std = stats(out_degs)
        tot_mean, tot_std = stats(tot_degs)
        peak_mean = float(np.mean(peak_degs))
        combined_j = float(np.mean([r - comm_weight * c for r, c in zip(rewards_disc, comm_sums)]))
    return Metrics(
        policy=getattr(policy, "name", type(policy).__name__),
        task=cfg.task_kind,
        seed=seed_label,
        n_rollouts=n_rollouts,
        loss_mean=loss_mean,
        loss_std=loss_std,
        in_deg_mean=in_mean,
        in_deg_std=in_std,
        out_deg_mean=out_mean,
        out_deg_std=out_std,
        total_deg_mean=tot_mean,
        total_deg_std=tot_std,
        combined_J=combined_j,
        comm_weight=comm_weight,
        full_comm=full,
        rollout_max_deg_mean=peak_mean,
    )


# ---------------------------------------------------------------------------
# hyperparameter sweep
# ---------------------------------------------------------------------------

DEFAULT_GRID = {
    "degree_weight": (0.3, 0.5, 0.7, 1.0),
    "n_rules": (2, 3, 4, 5),
    "feature_version": ("v1", "v2"),
}


@dataclass
class SweepCell:
    degree_weight: float
    n_rules: int
    feature_version: str
    result: SynthResult
    metrics: Metrics


@dataclass
class SweepResult:
    best: SweepCell
    cells: list[SweepCell]


def select_best_cell(cells: Sequence[SweepCell], near_tie: float = 0.05) -> SweepCell:
    """Lowest validation loss; near-ties resolved by lowest mean max degree."""
    if not cells:
        raise HarnessError("no sweep cells")
    best_loss = min(c.metrics.loss_mean for c in cells)
    contenders = [c for c in cells if c.metrics.loss_mean <= best_loss * (1.0 + near_tie)]
    return min(contenders, key=lambda c: (c.metrics.total_deg_mean, c.metrics.loss_mean))


def sweep(
    dataset: SynthDataset,
    make_policy,
    base_cfg: SynthConfig,
    task_cfg: TaskConfig,
    rng: np.random.Generator,
    n_val_rollouts: int = 20,
    comm_weight: float = 1.0,
    grid: Optional[dict] = None,
    reward_params: Optional[RewardParams] = None,
    near_tie: float = 0.05,
) -> SweepResult:
    """Synthesize per grid cell, evaluate on validation rollouts, pick the winner.

    Lowest validation loss wins; cells within `near_tie` of the best loss are
    re-ranked by lowest mean max degree. `make_policy(programs)` builds the
    evaluated policy from one cell's synthesized programs.
    """
    grid = grid or DEFAULT_GRID
    cells: list[SweepCell] = []
    combos = [
        (lam, k, fv)
        for lam in grid["degree_weight"]
        for k in grid["n_rules"]
        for fv in grid["feature_version"]
    ]
    if not combos:
        raise HarnessError("empty sweep grid")
    val_seed = int(rng.integers(0, 2**31 - 1))
    for lam, k, fv in combos:
        cell_cfg = SynthConfig(
            degree_weight=lam,
            mcmc_steps=base_cfg.mcmc_steps,
            inv_temperature=base_cfg.inv_temperature,
            n_rules=k,
            feature_version=fv,
            allow_random_rules=base_cfg.allow_random_rules,
            rand_rule_samples=base_cfg.rand_rule_samples,
            seed=base_cfg.seed,
        )
        if dataset.rounds == 1:
            results = [mcmc_synthesize(dataset, cell_cfg, rng)]
        else:
            from .synth import synthesize_multiround

            results = synthesize_multiround(dataset, cell_cfg, rng)
        programs = [r.program for r in results]
        policy = make_policy(programs)
        metrics = evaluate(
            policy, task_cfg, n_val_rollouts, comm_weight, val_seed, reward_params
        )
        cells.append(SweepCell(lam, k, fv, results[0], metrics))
    return SweepResult(select_best_cell(cells, near_tie), cells)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def metrics_to_json(metrics: Sequence[Metrics]) -> str:
    return json.dumps([m.to_json_dict() for m in metrics], indent=2, sort_keys=True) + "\n"


def metrics_from_json(text: str) -> list[Metrics]:
    return [Metrics.from_json_dict(doc) for doc in json.loads(text)]


def metrics_to_csv(metrics: Sequence[Metrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    for m in metrics:
        writer.writerow(m.csv_row())
    return buf.getvalue()


def _svg_bar_chart(
    title: str,
    labels: Sequence[str],
    means: Sequence[float],
    stds: Sequence[float],
    width: int = 480,
    height: int = 300,
) -> str:
    """Minimal hand-written grouped bar chart with error bars."""
    margin = 50
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    top = max((m + s) for m, s in zip(means, stds)) if means else 1.0
    top = top if top > 0 else 1.0
    bar_w = plot_w / max(1, len(means)) * 0.6
    gap = plot_w / max(1, len(means))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin - 8}" y="{margin}" text-anchor="end" font-size="10">{top:.3g}</text>',
        f'<text x="{margin - 8}" y="{height - margin}" text-anchor="end" font-size="10">0</text>',
    ]
    for idx, (label, mean, std) in enumerate(zip(labels, means, stds)):
        x = margin + idx * gap + (gap - bar_w) / 2
        h = plot_h * (mean / top) if top else 0.0
        y = height - margin - h
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{h:.1f}" fill="#4878a8"/>'
        )
        if std > 0:
            cx = x + bar_w / 2
            y_lo = height - margin - plot_h * max(0.0, (mean - std)) / top
            y_hi = height - margin - plot_h * min(top, (mean + std)) / top
            parts.append(f'<line x1="{cx:.1f}" y1="{y_lo:.1f}" x2="{cx:.1f}" y2="{y_hi:.1f}" stroke="black"/>')
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{height - margin + 14}" text-anchor="middle" font-size="10">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report(metrics: Sequence[Metrics], out_dir: Union[str, Path]) -> dict[str, Path]:
    """Write metrics JSON + CSV and the loss / degree bar-chart SVGs."""
    if not metrics:
        raise HarnessError("report needs at least one policy's metrics")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / "metrics.json",
        "csv": out / "metrics.csv",
        "loss_svg": out / "loss.svg",
        "degree_svg": out / "degree.svg",
    }
    paths["json"].write_text(metrics_to_json(metrics))
    paths["csv"].write_text(metrics_to_csv(metrics))
    labels = [m.policy for m in metrics]
    paths["loss_svg"].write_text(
        _svg_bar_chart(
            "cumulative loss (per step)",
            labels,
            [m.loss_mean for m in metrics],
            [m.loss_std for m in metrics],
        )
    )
    deg_items = [m for m in metrics if not m.full_comm]
    paths["degree_svg"].write_text(
        _svg_bar_chart(
            "mean max total degree",
            [m.policy for m in deg_items],
            [m.total_deg_mean for m in deg_items],
            [m.total_deg_std for m in deg_items],
        )
    )
    return paths


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    args: dict
    seed: int
    input_hashes: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    created_unix: float = field(default_factory=time.time)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        doc = json.loads(Path(path).read_text())
        return cls(**doc)

    @classmethod
    def capture(
        cls, command: str, args: dict, seed: int, inputs: Sequence[Union[str, Path]]
    ) -> "RunManifest":
        hashes = {str(p): file_sha256(p) for p in inputs if Path(p).exists()}
        return cls(command=command, args=dict(args), seed=seed, input_hashes=hashes)


def resolve_seed(cli_seed: Optional[int], default: int = 0) -> int:
    """CLI seed, overridable by the SWARM_SEED environment variable."""
    env_seed = os.environ.get("SWARM_SEED")
    if env_seed is not None:
        return int(env_seed)
    if cli_seed is not None:
        return int(cli_seed)
    return default

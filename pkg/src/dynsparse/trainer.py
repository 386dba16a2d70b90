"""Two-stage toy training harness.

A small DiT-like stack (attention + MLP blocks over a flattened 3D token
grid) is trained with a linear-interpolant flow-matching objective on
synthetic smooth latents. Stage 1 runs full attention everywhere while
per-block low-rank predictors learn to track each block's pre-softmax
Q K^T; once their rolling mean loss clears the threshold the run enters
stage 2, where the dispatcher gates each block between full and sparse
attention from profiled sparsity and a calibrated cost table.

The predictors live entirely in numpy (float64) next to the torch model,
so predictor updates structurally cannot touch main-model parameters.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import predictor as predictor_mod
from . import profiler as profiler_mod
from .dispatcher import CostProfileTable, DispatchDecision, decide
from .grid import TokenGrid
from .selection import k_from_sparsity
from .synthetic import smooth_latents
from .validate import NumericalError


@dataclass
class ToyDiTConfig:
    blocks: int = 4
    heads: int = 4
    d_k: int = 4
    hidden: int = 32
    channels: int = 4
    grid: tuple = (8, 8, 8)
    lr: float = 1e-4
    predictor_lr: float = 3e-3
    d_lr: int = 16
    seed: int = 0
    theta: float = 0.9
    stage1_threshold: float = 0.01
    transition_window: int = 100
    batch_size: int = 4
    sample_factor: int = 16
    stage1_period: int = 50
    stage2_period: int = 500
    predictor_update_period: int = 1   # stage-2 predictor cadence
    total_iterations: int = 1500
    pool_size: int = 32
    mem_budget: int = 1 << 30
    threads: int = 1
    ema_alpha: float = 0.1

    def __post_init__(self):
        if min(self.blocks, self.heads, self.d_k, self.hidden, self.channels) < 1:
            raise ValueError("model dimensions must be positive")
        if self.stage1_threshold <= 0:
            raise ValueError("stage-1 loss threshold must be positive")
        if self.d_lr >= self.hidden:
            raise ValueError("d_lr must be below the hidden size")

    @property
    def token_grid(self) -> TokenGrid:
        return TokenGrid(*self.grid)

    @property
    def inner(self) -> int:
        return self.heads * self.d_k

    @classmethod
    def from_json(cls, data: dict) -> "ToyDiTConfig":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in data.items() if k in known}
        if "grid" in kwargs:
            kwargs["grid"] = tuple(kwargs["grid"])
        return cls(**kwargs)


def flow_matching_loss(model_out, noise, latent, t) -> torch.Tensor:
    """MSE against the linear-interpolant velocity target (noise - latent)."""
    del t  # constant-velocity interpolant; kept for interface symmetry
    return ((model_out - (noise - latent)) ** 2).mean()


class _Block(nn.Module):
    def __init__(self, cfg: ToyDiTConfig):
        super().__init__()
        self.heads = cfg.heads
        self.d_k = cfg.d_k
        self.ln1 = nn.LayerNorm(cfg.hidden)
        self.qkv = nn.Linear(cfg.hidden, 3 * cfg.inner)
        self.proj = nn.Linear(cfg.inner, cfg.hidden)
        self.ln2 = nn.LayerNorm(cfg.hidden)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden, 4 * cfg.hidden),
            nn.GELU(),
            nn.Linear(4 * cfg.hidden, cfg.hidden),
        )

    def attention(self, x, idx=None):
        b, s, _ = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.heads, self.d_k)
        q, k, v = (t.transpose(1, 2) for t in qkv.unbind(2))  # [B, H, S, dk]
        if idx is None:
            out = F.scaled_dot_product_attention(q, k, v)
        else:
            # idx: [B, S, k] key indices shared across heads; gradients flow
            # only through the gathered pairs
            k_sel = torch.stack([k[i][:, idx[i]] for i in range(b)])  # [B,H,S,k,dk]
            v_sel = torch.stack([v[i][:, idx[i]] for i in range(b)])
            logits = torch.einsum("bhqd,bhqkd->bhqk", q, k_sel) / math.sqrt(self.d_k)
            weights = torch.softmax(logits, dim=-1)
            out = torch.einsum("bhqk,bhqkd->bhqd", weights, v_sel)
        return out.transpose(1, 2).reshape(b, s, self.heads * self.d_k)


class ToyDiT(nn.Module):
    """Input proj + additive time conditioning + attention/MLP blocks."""

    def __init__(self, cfg: ToyDiTConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.channels, cfg.hidden)
        self.time_mlp = nn.Sequential(
            nn.Linear(1, cfg.hidden), nn.SiLU(), nn.Linear(cfg.hidden, cfg.hidden)
        )
        self.blocks = nn.ModuleList([_Block(cfg) for _ in range(cfg.blocks)])
        self.out_ln = nn.LayerNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.channels)

    def forward(self, x_t, t, set_provider=None):
        """set_provider(block_index, detached LN1 output) -> [B, S, k] or None."""
        h = self.input_proj(x_t) + self.time_mlp(t.reshape(-1, 1, 1))
        block_inputs = []
        for bi, block in enumerate(self.blocks):
            x_ln = block.ln1(h)
            idx = set_provider(bi, x_ln.detach()) if set_provider else None
            h = h + block.proj(block.attention(x_ln, idx))
            h = h + block.mlp(block.ln2(h))
            block_inputs.append(x_ln.detach())
        return self.head(self.out_ln(h)), block_inputs

    def block_score_weights(self, bi: int):
        """Detached (W_q, W_k) of block bi as numpy [inner, hidden]."""
        w = self.blocks[bi].qkv.weight.detach().double().numpy()
        inner = self.cfg.inner
        return w[:inner], w[inner: 2 * inner]


@dataclass
class TrainState:
    stage: int = 1
    iteration: int = 0
    transition_iteration: int | None = None
    decisions: dict = field(default_factory=dict)  # block -> DispatchDecision
    task_losses: list = field(default_factory=list)
    predictor_losses: dict = field(default_factory=dict)  # block -> [totals]
    profile_series: list = field(default_factory=list)
    decision_log: list = field(default_factory=list)
    sparse_iterations: int = 0


class TwoStageTrainer:
    """Owns the model, predictors, profiler state, and the stage machine."""

    def __init__(self, cfg: ToyDiTConfig, dispatch_table: CostProfileTable | None = None,
                 force_full: bool = False):
        try:
            import threadpoolctl
            threadpoolctl.ThreadpoolController().limit(limits=1, user_api="blas")
        except ImportError:
            pass
        torch.set_num_threads(cfg.threads)
        self.cfg = cfg
        self.table = dispatch_table
        self.force_full = force_full
        self.torch_gen = torch.Generator().manual_seed(cfg.seed)
        torch.manual_seed(cfg.seed)
        self.model = ToyDiT(cfg)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.pool = torch.tensor(
            smooth_latents(cfg.token_grid, cfg.channels, cfg.pool_size,
                           np.random.default_rng(cfg.seed + 2)),
            dtype=torch.float32,
        )
        self.predictors = [
            predictor_mod.PredictorParams.initialize(
                cfg.hidden, cfg.d_lr, seed=cfg.seed * 1000 + bi, lr=cfg.predictor_lr
            )
            for bi in range(cfg.blocks)
        ]
        self.profile = profiler_mod.SparsityProfile(alpha=cfg.ema_alpha)
        self.sample_cfg = profiler_mod.SampleConfig(
            factor=cfg.sample_factor, seed=cfg.seed,
            stage1_period=cfg.stage1_period, stage2_period=cfg.stage2_period,
        )
        self.state = TrainState()
        self.state.predictor_losses = {bi: [] for bi in range(cfg.blocks)}

    # --- data -------------------------------------------------------------

    def next_batch(self):
        idx = self.rng.integers(0, self.cfg.pool_size, self.cfg.batch_size)
        x0 = self.pool[idx]
        x1 = torch.randn(x0.shape, generator=self.torch_gen)
        t = torch.rand(self.cfg.batch_size, generator=self.torch_gen)
        return x0, x1, t

    # --- shared pieces ------------------------------------------------------

    def _main_update(self, x0, x1, t, set_provider=None):
        x_t = (1.0 - t.reshape(-1, 1, 1)) * x0 + t.reshape(-1, 1, 1) * x1
        out, block_inputs = self.model(x_t, t, set_provider=set_provider)
        loss = flow_matching_loss(out, x1, x0, t)
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite task loss at iteration {self.state.iteration}"
            )
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return float(loss.item()), block_inputs

    def _update_predictors(self, block_inputs):
        """One predictor step per block on sampled rows of one batch sample."""
        s = self.cfg.token_grid.size
        sample_of_iter = self.state.iteration % self.cfg.batch_size
        for bi in range(self.cfg.blocks):
            x = block_inputs[bi][sample_of_iter].double().numpy()
            w_q, w_k = self.model.block_score_weights(bi)
            rows = profiler_mod.sample_queries(
                s, self.sample_cfg,
                seed=self.cfg.seed * 7919 + self.state.iteration * 31 + bi,
            )
            target = (x[rows] @ w_q.T) @ (x @ w_k.T).T
            report = predictor_mod.train_step(self.predictors[bi], x, target, rows=rows)
            self.state.predictor_losses[bi].append(report.total)

    def _profile_blocks(self, block_inputs):
        for bi in range(self.cfg.blocks):
            x = block_inputs[bi][0].double().numpy()
            w_q, w_k = self.model.block_score_weights(bi)
            q_full = x @ w_q.T
            k_full = x @ w_k.T
            qs = [q_full[:, h * self.cfg.d_k:(h + 1) * self.cfg.d_k]
                  for h in range(self.cfg.heads)]
            ks = [k_full[:, h * self.cfg.d_k:(h + 1) * self.cfg.d_k]
                  for h in range(self.cfg.heads)]
            samples = profiler_mod.measure_block_sparsity(
                qs, ks, self.cfg.theta, self.sample_cfg,
                seed=self.cfg.seed * 104729 + self.state.iteration * 13 + bi,
            )
            self.profile.update_block(bi, samples, self.state.iteration)
        self.state.profile_series.append({
            "iteration": self.state.iteration,
            "profile": self.profile.snapshot(),
        })

    # --- stage machine ------------------------------------------------------

    def check_transition(self) -> None:
        """Enter stage 2 once the blockwise rolling mean clears the threshold."""
        if self.state.stage != 1:
            return
        window = self.cfg.transition_window
        means = []
        for bi in range(self.cfg.blocks):
            losses = self.state.predictor_losses[bi]
            if not losses:
                return
            means.append(float(np.mean(losses[-window:])))
        if float(np.mean(means)) < self.cfg.stage1_threshold:
            self.state.stage = 2
            self.state.transition_iteration = self.state.iteration
            self.state.decision_log.append({
                "iteration": self.state.iteration,
                "event": "stage_transition",
                "mean_predictor_loss": float(np.mean(means)),
            })

    def _refresh_decisions(self):
        if self.table is None or self.force_full:
            return
        s = self.cfg.token_grid.size
        for bi in range(self.cfg.blocks):
            try:
                sparsity = self.profile.block_mean(bi)
            except ValueError:
                continue
            decision = decide(min(sparsity, 1.0 - 1e-9), s, self.cfg.mem_budget,
                              self.table, block=bi)
            previous = self.state.decisions.get(bi)
            self.state.decisions[bi] = decision
            if previous is None or previous.enabled != decision.enabled:
                self.state.decision_log.append({
                    "iteration": self.state.iteration,
                    "event": "dispatch",
                    "block": bi,
                    "enabled": decision.enabled,
                    "reason": decision.reason,
                    "k": decision.k,
                })

    def _sparse_set_provider(self):
        """Returns the per-block callback mapping LN output -> index tensor."""
        if self.force_full or self.table is None:
            return None
        decisions = self.state.decisions

        def provider(bi, x_ln):
            decision = decisions.get(bi)
            if decision is None or not decision.enabled:
                return None
            b, s, _ = x_ln.shape
            idx = np.empty((b, s, decision.k), dtype=np.int64)
            for sample in range(b):
                est = predictor_mod.estimate_critical(
                    self.predictors[bi], x_ln[sample].double().numpy(), k=decision.k
                )
                idx[sample] = est.as_array()
            return torch.from_numpy(idx)

        return provider

    def stage1_step(self) -> float:
        assert self.state.stage == 1
        self.state.iteration += 1
        x0, x1, t = self.next_batch()
        loss, block_inputs = self._main_update(x0, x1, t, set_provider=None)
        self.state.task_losses.append(loss)
        self._update_predictors(block_inputs)
        if self.state.iteration % self.cfg.stage1_period == 0:
            self._profile_blocks(block_inputs)
        self.check_transition()
        return loss

    def stage2_step(self) -> float:
        assert self.state.stage == 2
        self.state.iteration += 1
        if (self.state.iteration % self.cfg.stage2_period == 0
                or not self.state.decisions):
            self._refresh_decisions()
        provider = self._sparse_set_provider()
        x0, x1, t = self.next_batch()
        loss, block_inputs = self._main_update(x0, x1, t, set_provider=provider)
        self.state.task_losses.append(loss)
        if any(d.enabled for d in self.state.decisions.values()):
            self.state.sparse_iterations += 1
        if self.state.iteration % self.cfg.predictor_update_period == 0:
            self._update_predictors(block_inputs)
        if self.state.iteration % self.cfg.stage2_period == 0:
            self._profile_blocks(block_inputs)
        return loss

    def step(self) -> float:
        return self.stage1_step() if self.state.stage == 1 else self.stage2_step()

    def run(self, n_iterations: int | None = None) -> TrainState:
        n = self.cfg.total_iterations if n_iterations is None else n_iterations
        for _ in range(n):
            self.step()
        return self.state

    # --- persistence ----------------------------------------------------------

    def mean_predictor_loss(self, window: int | None = None) -> float:
        window = window or self.cfg.transition_window
        return float(np.mean([
            np.mean(self.state.predictor_losses[bi][-window:])
            for bi in range(self.cfg.blocks)
        ]))

    def save_checkpoint(self, directory) -> None:
        from pathlib import Path

        from . import serialize

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {}
        for name, tensor in sorted(self.model.state_dict().items()):
            fname = f"main.{name}.bin"
            serialize.save_tensor(directory / fname, tensor.detach().numpy())
            index[name] = fname
        (directory / "model.json").write_text(serialize.canonical_json({
            "config": {**self.cfg.__dict__, "grid": list(self.cfg.grid)},
            "tensors": index,
            "iteration": self.state.iteration,
            "stage": self.state.stage,
        }))
        for bi, params in enumerate(self.predictors):
            predictor_mod.save_checkpoint(params, directory, bi)


def load_model_checkpoint(directory):
    """Rebuild a ToyDiT (eval mode) from a trainer checkpoint directory."""
    import json
    from pathlib import Path

    from . import serialize

    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    cfg = ToyDiTConfig.from_json(meta["config"])
    model = ToyDiT(cfg)
    state = {
        name: torch.tensor(serialize.load_tensor(directory / fname))
        for name, fname in meta["tensors"].items()
    }
    model.load_state_dict(state)
    model.eval()
    return model, cfg


def required_index_k(cfg: ToyDiTConfig, sparsity: float) -> int:
    return k_from_sparsity(sparsity, cfg.token_grid.size)

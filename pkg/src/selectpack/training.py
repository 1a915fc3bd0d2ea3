"""Training harness: SGD with momentum and cosine decay, per-epoch metrics,
evaluation passes, and the ablation grid comparing selection strategies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import batch_arrays
from .model import DENSE_BASELINE_STAGE, SelectPackTransformer, select_ratio_report, total_loss
from .numerics import MacCounter, NonFiniteError, Tensor, use_mac_counter
from .types import ModelConfig, validate_config


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries where and what blew up."""


@dataclass
class RunMetrics:
    """One epoch of training as seen from outside."""

    epoch: int
    l_task: float
    l_select: float
    l_total: float
    top1: float
    ratios: list
    ratio_mean: float
    macs: int

    def csv_row(self) -> str:
        ratio_cols = ",".join(f"{r:.6f}" for r in self.ratios)
        return (
            f"{self.epoch},{self.l_task:.6f},{self.l_select:.6f},{self.l_total:.6f},"
            f"{self.top1:.6f},{ratio_cols},{self.ratio_mean:.6f},{self.macs}"
        )


def metrics_csv_header(num_blocks: int) -> str:
    ratio_cols = ",".join(f"ratio_block_{i + 1}" for i in range(num_blocks))
    return f"epoch,l_task,l_select,l_total,top1,{ratio_cols},ratio_mean,macs"


class SGD:
    """Plain SGD with momentum 0.9 and warmup-then-cosine learning rate."""

    def __init__(self, params, lr: float, momentum: float = 0.9, total_steps: int | None = None, warmup_frac: float = 0.1):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.total_steps = total_steps
        self.warmup_steps = max(1, int(warmup_frac * total_steps)) if total_steps else 0
        self.step_count = 0
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        t = min(self.step_count, self.total_steps)
        if t < self.warmup_steps:
            return self.lr * (t + 1) / self.warmup_steps
        frac = (t - self.warmup_steps) / max(1, self.total_steps - self.warmup_steps)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    def step(self) -> None:
        lr = self.current_lr()
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
        self.step_count += 1

    def zero_grad(self) -> None:
        nm.zero_grads(self.params)


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(model: SelectPackTransformer, samples, batch_size: int = 8, selector: str = "gumbel"):
    """Noise-free accuracy, per-block select ratios, and forward MACs.

    Returns (top1, ratios list, ratio mean, MacCounter). Dense baselines
    report ratio 1.0 for every-token attention by definition.
    """
    counter = MacCounter()
    correct = 0
    ratio_acc = None
    num_batches = 0
    with use_mac_counter(counter), nm.no_grad():
        for idx in _batches(len(samples), batch_size, None):
            x, y, labels = batch_arrays([samples[i] for i in idx])
            res = model.forward(x, labels=labels, mode="eval", selector=selector)
            correct += int((res.logits.data.argmax(axis=1) == y).sum())
            if res.selections:
                rep = select_ratio_report(res.selections)
                ratio_acc = rep.per_block if ratio_acc is None else [a + b for a, b in zip(ratio_acc, rep.per_block)]
            num_batches += 1
    if ratio_acc is None:
        ratios = [1.0]
        mean = 1.0
    else:
        ratios = [r / num_batches for r in ratio_acc]
        mean = float(np.mean(ratios))
    return correct / len(samples), ratios, mean, counter


def train(
    model: SelectPackTransformer,
    samples,
    cfg: ModelConfig,
    epochs: int,
    lr: float = 0.05,
    batch_size: int = 8,
    alpha: float | None = None,
    eval_samples=None,
    selector: str = "gumbel",
    log=None,
) -> list:
    """Minimize task + alpha * selection loss; one RunMetrics per epoch.

    ``alpha`` defaults to the config's; pass 0.0 for the unsupervised
    ablation. top1 is measured on ``eval_samples`` when given, else on the
    training set; ratios always come from a noise-free eval pass.
    """
    validate_config(cfg)
    if alpha is None:
        alpha = cfg.alpha
    steps_per_epoch = -(-len(samples) // batch_size)
    opt = SGD(model.parameters(), lr=lr, total_steps=epochs * steps_per_epoch)
    history = []
    for epoch in range(epochs):
        shuffle_rng = np.random.default_rng([cfg.seed, 7919, epoch])
        counter = MacCounter()
        sums = np.zeros(3)
        steps = 0
        with use_mac_counter(counter):
            for idx in _batches(len(samples), batch_size, shuffle_rng):
                x, y, labels = batch_arrays([samples[i] for i in idx])
                step_rng = np.random.default_rng([cfg.seed, epoch, steps])
                try:
                    res = model.forward(x, labels=labels, mode="train", rng=step_rng, selector=selector)
                    l_total, l_task, l_select = total_loss(res, y, labels, alpha)
                    opt.zero_grad()
                    nm.backward(l_total)
                except NonFiniteError as e:
                    raise TrainingDiverged(f"epoch {epoch} step {steps}: {e} (lr={opt.current_lr():.4g})") from e
                opt.step()
                sums += (l_task.item(), l_select.item(), l_total.item())
                steps += 1
        top1, ratios, ratio_mean, _ = evaluate(model, eval_samples or samples, batch_size, selector=selector)
        m = RunMetrics(
            epoch=epoch,
            l_task=sums[0] / steps,
            l_select=sums[1] / steps,
            l_total=sums[2] / steps,
            top1=top1,
            ratios=ratios,
            ratio_mean=ratio_mean,
            macs=counter.total,
        )
        history.append(m)
        if log:
            log(m)
    return history


# ---------------------------------------------------------------------------
# Ablation grid


@dataclass
class AblationRow:
    name: str
    top1: float
    ratio_mean: float
    macs: int
    attention_macs: int


ABLATION_CSV_HEADER = "variant,top1,ratio_mean,macs,attention_macs"


def ablation_runs(train_samples, eval_samples, cfg: ModelConfig, epochs: int, lr: float = 0.05, batch_size: int = 8, variants=None) -> list:
    """Train one model per selection strategy on identical data and report
    held-out accuracy, mean select ratio, and measured eval MACs."""
    grid = {
        "dense": dict(onset=DENSE_BASELINE_STAGE, alpha=0.0, selector="gumbel"),
        "topk50": dict(onset=cfg.select_start_stage, alpha=0.0, selector="topk"),
        "select_no_loss": dict(onset=cfg.select_start_stage, alpha=0.0, selector="gumbel"),
        "select_with_loss": dict(onset=cfg.select_start_stage, alpha=cfg.alpha, selector="gumbel"),
        "onset2": dict(onset=2, alpha=cfg.alpha, selector="gumbel"),
        "onset3": dict(onset=3, alpha=cfg.alpha, selector="gumbel"),
        "onset4": dict(onset=4, alpha=cfg.alpha, selector="gumbel"),
    }
    rows = []
    for name in variants or grid:
        spec = grid[name]
        from dataclasses import replace

        run_cfg = replace(cfg, select_start_stage=spec["onset"])
        model = SelectPackTransformer(run_cfg)
        train(model, train_samples, run_cfg, epochs, lr=lr, batch_size=batch_size, alpha=spec["alpha"], selector=spec["selector"])
        top1, _, ratio_mean, counter = evaluate(model, eval_samples, batch_size, selector=spec["selector"])
        if name == "dense":
            ratio_mean = 1.0  # every token attends, by definition
        if name == "topk50":
            ratio_mean = 0.5  # fixed uniform ratio, by construction
        rows.append(AblationRow(name, top1, ratio_mean, counter.total, counter.by_scope.get("attention", 0)))
    return rows

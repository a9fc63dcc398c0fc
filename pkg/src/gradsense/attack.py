"""MAGIA and DLG attack loops.

Inputs are the observed :class:`~gradsense.victim.TargetGradient`, the victim
model (architecture and parameters) and an :class:`AttackConfig`; nothing about
the private batch is reachable from here.
"""
import time
from dataclasses import dataclass, field, replace

import numpy as np

from gradsense import autodiff as ad
from gradsense.objective import (
    MixParams,
    ScheduleSpec,
    dlg_total,
    magia_total,
    sample_subset,
    schedule_subset_size,
)
from gradsense.optim import adam_step, lbfgs_step, parse_optimizer

__all__ = ["AttackError", "AttackConfig", "AttackResult", "DummyBatch", "init_dummy", "run_magia", "run_dlg"]


class AttackError(RuntimeError):
    def __init__(self, message, iteration=None):
        self.iteration = iteration
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")


@dataclass
class AttackConfig:
    batch_size: int
    iterations: int = 300
    alpha: float = 0.999
    tv_weight: float = 0.005
    schedule: ScheduleSpec = None
    optimizer: str = "lbfgs"
    seed: int = 0
    clamp_images: bool = False
    record_every: int = 50
    keep_iterates: bool = False

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = ScheduleSpec("constant", constant_S=min(2, self.batch_size))
        if self.iterations >= 1 and self.schedule.total_iters != self.iterations:
            self.schedule = replace(self.schedule, total_iters=self.iterations)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.record_every < 0:
            raise ValueError("record_every must be >= 0")
        MixParams(self.alpha, self.tv_weight)
        self.schedule.validate_for(self.batch_size)
        parse_optimizer(self.optimizer)

    @property
    def mix(self):
        return MixParams(self.alpha, self.tv_weight)


@dataclass
class DummyBatch:
    images: ad.Variable
    label_logits: ad.Variable

    @property
    def batch_size(self):
        return self.images.shape[0]

    def label_distributions(self):
        z = self.label_logits.value
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)


@dataclass
class AttackResult:
    method: str
    final_images: np.ndarray
    final_label_distributions: np.ndarray
    loss_trace: np.ndarray
    per_iteration_S: list
    wall_time: np.ndarray
    seed: int
    snapshots: dict = field(default_factory=dict)
    iterates: list = field(default_factory=list)

    @property
    def final_loss(self):
        return float(self.loss_trace[-1]) if len(self.loss_trace) else float("nan")


def init_dummy(rng, B, arch):
    """Images ~ U(0, 1), label logits ~ N(0, 1)."""
    if B < 1:
        raise ValueError("B must be >= 1")
    images = rng.uniform(0.0, 1.0, size=(B,) + tuple(arch.input_shape))
    logits = rng.standard_normal((B, arch.num_classes))
    return DummyBatch(ad.Variable(images), ad.Variable(logits))


def _check_inputs(config, g_star, model):
    if len(g_star) != model.param_count:
        raise ValueError(f"target gradient has {len(g_star)} entries, model has {model.param_count} parameters")
    if g_star.batch_size != config.batch_size:
        raise ValueError(f"config batch_size {config.batch_size} != observed batch size {g_star.batch_size}")


def _run(method, config, g_star, model):
    _check_inputs(config, g_star, model)
    B, E = config.batch_size, config.iterations
    init_seq, subset_seq = np.random.SeedSequence(config.seed).spawn(2)
    dummy = init_dummy(np.random.default_rng(init_seq), B, model.arch)
    subset_rng = np.random.default_rng(subset_seq)
    n_img = dummy.images.size
    variables = [dummy.images, dummy.label_logits]
    opt = parse_optimizer(config.optimizer)
    state = opt.new_state()
    mix = config.mix

    x = np.concatenate([dummy.images.value.ravel(), dummy.label_logits.value.ravel()])
    trace, sizes, walls, iterates = [], [], [], []
    snapshots = {}

    def unpack(vec):
        dummy.images.data = vec[:n_img].reshape(dummy.images.shape)
        dummy.label_logits.data = vec[n_img:].reshape(dummy.label_logits.shape)

    for e in range(E):
        t0 = time.perf_counter()
        if method == "magia":
            S = schedule_subset_size(config.schedule, e, B)
            subset = sample_subset(subset_rng, B, S)

            def build():
                return magia_total(model, dummy, subset, g_star, mix, S, B)
        else:
            S = B

            def build():
                return dlg_total(model, dummy, g_star, config.tv_weight)

        def objective(vec):
            unpack(vec)
            total = build()
            grads = ad.differentiate(total, variables)
            return total.item(), np.concatenate([g.value.ravel() for g in grads])

        try:
            if opt.kind == "lbfgs":
                state, x, value = lbfgs_step(state, objective, x)
            else:
                value, grad = objective(x)
                state, x = adam_step(state, grad, x)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise AttackError(str(exc), e) from exc
        if not np.isfinite(value):
            raise AttackError(f"non-finite loss in {method}", e)
        if config.clamp_images:
            x[:n_img] = np.clip(x[:n_img], 0.0, 1.0)

        trace.append(value)
        sizes.append(S)
        walls.append(time.perf_counter() - t0)
        if config.keep_iterates:
            iterates.append(x.copy())
        if config.record_every and (e + 1) % config.record_every == 0:
            snapshots[e + 1] = x[:n_img].reshape(dummy.images.shape).copy()

    unpack(x)
    return AttackResult(
        method=method,
        final_images=dummy.images.value.copy(),
        final_label_distributions=dummy.label_distributions(),
        loss_trace=np.asarray(trace, dtype=np.float64),
        per_iteration_S=sizes,
        wall_time=np.asarray(walls),
        seed=config.seed,
        snapshots=snapshots,
        iterates=iterates,
    )


def run_magia(config, g_star, model):
    """Subset-probing attack with the adaptive coefficient and momentum mixing."""
    return _run("magia", config, g_star, model)


def run_dlg(config, g_star, model):
    """Whole-batch gradient matching plus ``tv_weight`` * TV."""
    return _run("dlg", config, g_star, model)

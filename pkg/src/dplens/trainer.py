"""Training loops: DP and plain SGD/momentum/Adam, mixed gradients, the
public-then-private continual pre-training state machine, and the
Monte-Carlo oracle that validates the closed-form improvement predictors.

Determinism contract: every stochastic choice flows through caller-owned
generators; identical seeds and configurations produce bit-identical runs.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .clipping import ClippingRule, privatize_gradient, privatize_gradient_many
from .hessian import HessianStats, stats_snapshot
from .model import DifferentiableTask, QuadraticTask
from .predictor import AlphaSchedule, alpha_schedule_value

Array = np.ndarray

RESET_POLICIES = ("none", "reset_m", "reset_v", "reset_t")


@dataclass(frozen=True)
class OptimizerConfig:
    """First-order optimizer settings shared by DP and non-DP loops."""

    kind: str = "sgd"  # sgd | sgd_momentum | adam
    eta: float = 0.1
    mu: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stabilizer: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.eta <= 0:
            raise ValueError("learning rate must be positive")
        for name in ("mu", "beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")


@dataclass
class OptimizerState:
    """Step counter plus Adam moments and the momentum buffer."""

    t: int
    m: Array
    v: Array
    b: Array

    @classmethod
    def zeros(cls, d: int) -> "OptimizerState":
        return cls(t=0, m=np.zeros(d), v=np.zeros(d), b=np.zeros(d))

    def copy(self) -> "OptimizerState":
        return OptimizerState(t=self.t, m=self.m.copy(), v=self.v.copy(), b=self.b.copy())

    def check_dim(self, d: int) -> None:
        for name in ("m", "v", "b"):
            if getattr(self, name).shape != (d,):
                raise ValueError(f"state {name} has wrong shape")

    def apply_reset(self, policy: str) -> None:
        """Re-initialise part of the state when switching training phases."""
        if policy not in RESET_POLICIES:
            raise ValueError(f"unknown reset policy {policy!r}")
        if policy == "reset_m":
            self.m = np.zeros_like(self.m)
            self.b = np.zeros_like(self.b)
        elif policy == "reset_v":
            self.v = np.zeros_like(self.v)
        elif policy == "reset_t":
            self.t = 0


def optimizer_direction(
    g: Array, w: Array, config: OptimizerConfig, state: OptimizerState
) -> tuple[Array, OptimizerState]:
    """Post-process a gradient into an update direction, advancing the state."""
    g = np.asarray(g, dtype=float)
    if config.weight_decay > 0:
        g = g + config.weight_decay * w
    new = state.copy()
    new.t = state.t + 1
    if config.kind == "sgd":
        return g, new
    if config.kind == "sgd_momentum":
        new.b = config.mu * state.b + g
        return new.b, new
    new.m = config.beta1 * state.m + (1.0 - config.beta1) * g
    new.v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
    m_hat = new.m / (1.0 - config.beta1**new.t)
    v_hat = new.v / (1.0 - config.beta2**new.t)
    return m_hat / (np.sqrt(v_hat) + config.epsilon_stabilizer), new


def dp_sgd_step(
    task: DifferentiableTask,
    w: Array,
    batch: Any,
    rule: ClippingRule | None,
    sigma: float,
    config: OptimizerConfig,
    rng: np.random.Generator | None,
) -> Array:
    """One plain-SGD step on the privatized batch gradient."""
    grads = task.per_sample_gradients(w, batch)
    g = privatize_gradient(grads, rule, sigma, rng)
    if config.weight_decay > 0:
        g = g + config.weight_decay * w
    return w - config.eta * g


def dp_adam_step(
    task: DifferentiableTask,
    w: Array,
    batch: Any,
    rule: ClippingRule | None,
    sigma: float,
    config: OptimizerConfig,
    state: OptimizerState,
    rng: np.random.Generator | None,
) -> tuple[Array, OptimizerState]:
    """One stateful step (Adam or momentum SGD) on the privatized gradient."""
    if config.kind not in ("adam", "sgd_momentum"):
        raise ValueError("stateful step requires kind 'adam' or 'sgd_momentum'")
    state.check_dim(task.dimension)
    grads = task.per_sample_gradients(w, batch)
    g = privatize_gradient(grads, rule, sigma, rng)
    direction, new_state = optimizer_direction(g, w, config, state)
    return w - config.eta * direction, new_state


def mixed_gradient(
    public_batch_grads: Array | None,
    private_batch_grads: Array | None,
    alpha: float,
    rule: ClippingRule | None,
    sigma: float,
    rng: np.random.Generator | None,
) -> Array:
    """Convex combination of a public mean gradient and a privatized one.

    g = alpha * mean(public) + (1 - alpha) * privatized(private).  A side
    with zero weight may be omitted entirely.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")

    def _nonempty(grads):
        return grads is not None and np.atleast_2d(np.asarray(grads)).shape[0] > 0

    result = None
    if alpha > 0.0:
        if not _nonempty(public_batch_grads):
            raise ValueError("public batch required when alpha > 0")
        pub = np.atleast_2d(np.asarray(public_batch_grads, dtype=float)).mean(axis=0)
        result = alpha * pub
    if alpha < 1.0:
        if not _nonempty(private_batch_grads):
            raise ValueError("private batch required when alpha < 1")
        priv = privatize_gradient(private_batch_grads, rule, sigma, rng)
        result = (1.0 - alpha) * priv if result is None else result + (1.0 - alpha) * priv
    return result


@dataclass
class SwitchPolicy:
    """Early-stopping trigger that flips training from public to private.

    A reading strictly worse than the previous one lengthens the
    non-improvement streak; a new best resets it; anything in between leaves
    it unchanged.  The policy fires once, when the streak reaches
    ``patience``.  With patience 1 this is exactly the single-step rule
    "switch when the loss goes up".  Alternatively, a measured optimal
    private batch size can trigger the switch when it drops to
    ``b_star_threshold``.
    """

    patience: int = 1
    b_star_threshold: float | None = None
    _prev: float | None = field(default=None, repr=False)
    _best: float = field(default=math.inf, repr=False)
    _streak: int = field(default=0, repr=False)
    fired: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    def observe(self, value: float) -> bool:
        """Feed one validation reading; True exactly when the switch fires."""
        if self.fired:
            return False
        if self._prev is not None:
            if value > self._prev:
                self._streak += 1
            elif value < self._best:
                self._streak = 0
        if value < self._best:
            self._best = value
        self._prev = value
        if self._streak >= self.patience:
            self.fired = True
            return True
        return False

    def observe_b_star(self, b_star: float) -> bool:
        """Feed a measured B*; True exactly when it first drops to threshold."""
        if self.b_star_threshold is None:
            raise ValueError("no B* threshold configured")
        if self.fired:
            return False
        if b_star <= self.b_star_threshold:
            self.fired = True
            return True
        return False


@dataclass
class IterationRecord:
    iteration: int
    phase: str  # public | private
    alpha: float
    train_loss: float
    val_loss: float | None
    sigma: float
    hessian: HessianStats | None = None


TRAIN_CSV_HEADER = "iter,phase,alpha,train_loss,val_loss,sigma"
_HESSIAN_COLUMNS = ",tr_H,tr_H_Sigma,gHg,g_norm_sq,decelerator"


@dataclass
class TrainRun:
    """Per-iteration log of one training run."""

    records: list[IterationRecord] = field(default_factory=list)
    switch_iteration: int | None = None
    reset_policy: str | None = None
    momentum_norm_before_reset: float | None = None
    momentum_norm_after_reset: float | None = None
    aborted: bool = False
    abort_reason: str | None = None

    def phases(self) -> list[str]:
        return [r.phase for r in self.records]

    def audit_phase_order(self) -> bool:
        """True when the phase log never returns from private to public."""
        seen_private = False
        for record in self.records:
            if record.phase == "private":
                seen_private = True
            elif seen_private:
                return False
        return True

    def final_train_loss(self) -> float:
        if not self.records:
            raise ValueError("empty run")
        return self.records[-1].train_loss

    def final_val_loss(self) -> float:
        for record in reversed(self.records):
            if record.val_loss is not None:
                return record.val_loss
        raise ValueError("run has no validation readings")

    def to_csv(self, decelerator_of=None) -> str:
        """CSV per-iteration log; Hessian columns appear when any are present.

        ``decelerator_of`` maps an IterationRecord with Hessian stats to the
        decelerator value for that iteration (defaults to 0 when absent).
        """
        with_hessian = any(r.hessian is not None for r in self.records)
        out = io.StringIO()
        out.write(TRAIN_CSV_HEADER + (_HESSIAN_COLUMNS if with_hessian else "") + "\n")
        for r in self.records:
            val = "" if r.val_loss is None else repr(r.val_loss)
            out.write(
                f"{r.iteration},{r.phase},{r.alpha!r},{r.train_loss!r},{val},{r.sigma!r}"
            )
            if with_hessian:
                if r.hessian is None:
                    out.write(",,,,,")
                else:
                    h = r.hessian
                    decel = decelerator_of(r) if decelerator_of is not None else 0.0
                    out.write(
                        f",{h.tr_h!r},{h.tr_h_sigma!r},{h.g_h_g!r},"
                        f"{h.g_norm_sq!r},{decel!r}"
                    )
            out.write("\n")
        return out.getvalue()


def _initial_parameters(
    task: DifferentiableTask, rng: np.random.Generator, w0: Array | None
) -> Array:
    if w0 is not None:
        return np.asarray(w0, dtype=float).copy()
    initializer = getattr(task, "random_parameters", None)
    if initializer is not None:
        return initializer(rng)
    return 0.1 * rng.standard_normal(task.dimension)


def continual_pretrain(
    task_public: DifferentiableTask,
    task_private: DifferentiableTask,
    config: OptimizerConfig,
    switch: SwitchPolicy,
    sigma: float,
    epochs: int,
    rng: np.random.Generator,
    *,
    batch_size: int = 32,
    steps_per_epoch: int = 50,
    rule: ClippingRule | None = None,
    schedule: AlphaSchedule | None = None,
    reset_policy: str = "reset_m",
    head_reinit: bool = False,
    val_size: int = 1024,
    w0: Array | None = None,
    hessian_probes: int = 0,
) -> TrainRun:
    """Two-phase training: public steps, then a permanent switch to DP steps.

    The public phase ends when the validation loss (mean loss on a held-out
    set of ``val_size`` public samples, evaluated once per epoch) fails to
    improve per the switch policy; at the switch the optimizer state is
    partially re-initialised per ``reset_policy`` (first moment by default)
    and, optionally, the task's output-parameter block is re-drawn.  Passing
    a binary alpha schedule instead forces the phase change at a fixed
    iteration with no early stopping.  Training aborts with a diagnostic
    record if the loss turns non-finite.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if epochs < 1 or steps_per_epoch < 1 or batch_size < 1:
        raise ValueError("epochs, steps_per_epoch and batch_size must be positive")
    if reset_policy not in RESET_POLICIES:
        raise ValueError(f"unknown reset policy {reset_policy!r}")
    if schedule is not None and schedule.kind not in (
        "indicator",
        "only_public",
        "only_private",
    ):
        raise ValueError("only binary alpha schedules drive the two-phase loop")
    if rule is None:
        rule = ClippingRule.reparam(1.0)

    total_steps = epochs * steps_per_epoch
    init_rng, val_rng, data_rng, noise_rng, probe_rng, head_rng = rng.spawn(6)
    w = _initial_parameters(task_public, init_rng, w0)
    val_set = task_public.draw_batch(val_rng, val_size)
    state = OptimizerState.zeros(task_public.dimension)
    run = TrainRun(reset_policy=reset_policy)
    phase = "public"
    if schedule is not None and alpha_schedule_value(schedule, 0) == 0.0:
        phase = "private"

    def _switch(now: int) -> None:
        nonlocal phase
        run.switch_iteration = now
        run.momentum_norm_before_reset = float(np.linalg.norm(state.m))
        state.apply_reset(reset_policy)
        run.momentum_norm_after_reset = float(np.linalg.norm(state.m))
        if head_reinit:
            _reinit_head(task_private, w, head_rng)
        phase = "private"

    for t in range(total_steps):
        if schedule is not None and phase == "public":
            if alpha_schedule_value(schedule, t) == 0.0:
                _switch(t)
        task = task_public if phase == "public" else task_private
        batch = task.draw_batch(data_rng, batch_size)
        train_loss = task.batch_loss(w, batch)
        if not math.isfinite(train_loss):
            run.aborted = True
            run.abort_reason = f"non-finite training loss at iteration {t}"
            break
        grads = task.per_sample_gradients(w, batch)
        if phase == "public":
            g = grads.mean(axis=0)
            sigma_t = 0.0
        else:
            g = privatize_gradient(grads, rule, sigma, noise_rng)
            sigma_t = sigma
        direction, state = optimizer_direction(g, w, config, state)
        w = w - config.eta * direction

        stats = None
        if hessian_probes > 0:
            stats = stats_snapshot(task, w, batch, hessian_probes, probe_rng)
        val_loss = None
        if (t + 1) % steps_per_epoch == 0:
            val_loss = task_public.batch_loss(w, val_set)
        run.records.append(
            IterationRecord(
                iteration=t,
                phase=phase,
                alpha=1.0 if phase == "public" else 0.0,
                train_loss=train_loss,
                val_loss=val_loss,
                sigma=sigma_t,
                hessian=stats,
            )
        )
        if (
            schedule is None
            and val_loss is not None
            and phase == "public"
            and switch.observe(val_loss)
        ):
            _switch(t + 1)
    return run


def _reinit_head(task, w: Array, rng: np.random.Generator) -> None:
    """Re-draw the output-layer block in place, for tasks that expose one."""
    head = getattr(task, "head_slice", None)
    if head is None:
        return
    sl = head()
    w[sl] = 0.1 * rng.standard_normal(sl.stop - sl.start)


@dataclass(frozen=True)
class OracleResult:
    mean_improvement: float
    standard_error: float


def empirical_improvement_oracle(
    task: QuadraticTask,
    w: Array,
    eta: float,
    b: int,
    rule: ClippingRule | None,
    sigma: float,
    trials: int,
    rng: np.random.Generator,
) -> OracleResult:
    """Monte-Carlo estimate of the expected one-step population-loss drop.

    Each trial draws a fresh batch and noise, takes one privatized SGD step,
    and evaluates the exact population loss before and after; the quadratic
    task makes both evaluations closed-form, so the only error is sampling
    noise.  This is the toolkit's independent check of the improvement
    predictors.
    """
    if not isinstance(task, QuadraticTask):
        raise TypeError("the improvement oracle requires a QuadraticTask")
    if trials < 100:
        raise ValueError("need at least 100 trials")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    w = np.asarray(w, dtype=float)
    d = task.dimension
    loss_before = task.population_loss(w)
    chunk = max(1, int(2_000_000 / (b * d)))  # bound transient memory
    pieces = []
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        samples = task.draw_batch(rng, n * b).reshape(n, b, d)
        grads = task.per_sample_gradients(w, samples.reshape(-1, d)).reshape(n, b, d)
        steps = privatize_gradient_many(grads, rule, sigma, rng)
        w_next = w[None, :] - eta * steps
        pieces.append(loss_before - task.population_losses(w_next))
        done += n
    improvements = np.concatenate(pieces)
    return OracleResult(
        mean_improvement=float(improvements.mean()),
        standard_error=float(improvements.std(ddof=1) / np.sqrt(trials)),
    )


FOUR_WAY_ARMS = ("sgd", "sgd_clip", "sgd_noise", "dp_sgd")


def four_way_comparison(
    task: DifferentiableTask,
    config: OptimizerConfig,
    sigma: float,
    rule: ClippingRule,
    steps: int,
    rng: np.random.Generator,
    *,
    batch_size: int = 32,
    w0: Array | None = None,
    eval_size: int = 512,
) -> dict[str, TrainRun]:
    """Four training arms on one shared data stream.

    Arms: plain SGD, clipped SGD without noise, noisy SGD without clipping,
    and full DP-SGD.  All arms consume the identical batch sequence and
    start from the same parameters; each noisy arm owns a separate noise
    substream, so arms differ only where the algorithm differs.  A shared
    held-out set is evaluated at the final iterate of each arm.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive to make the noisy arms distinct")
    if steps < 1:
        raise ValueError("need at least one step")
    init_rng, data_rng, eval_rng, *noise_rngs = rng.spawn(3 + len(FOUR_WAY_ARMS))
    w_init = _initial_parameters(task, init_rng, w0)
    batches = [task.draw_batch(data_rng, batch_size) for _ in range(steps)]
    eval_set = task.draw_batch(eval_rng, eval_size)

    arms = {
        "sgd": (None, 0.0),
        "sgd_clip": (rule, 0.0),
        "sgd_noise": (None, sigma),
        "dp_sgd": (rule, sigma),
    }
    runs: dict[str, TrainRun] = {}
    for (name, (arm_rule, arm_sigma)), noise_rng in zip(arms.items(), noise_rngs):
        w = w_init.copy()
        state = OptimizerState.zeros(task.dimension)
        run = TrainRun()
        phase = "public" if arm_rule is None and arm_sigma == 0.0 else "private"
        for t, batch in enumerate(batches):
            train_loss = task.batch_loss(w, batch)
            if not math.isfinite(train_loss):
                run.aborted = True
                run.abort_reason = f"non-finite training loss at iteration {t}"
                break
            grads = task.per_sample_gradients(w, batch)
            g = privatize_gradient(grads, arm_rule, arm_sigma, noise_rng)
            direction, state = optimizer_direction(g, w, config, state)
            w = w - config.eta * direction
            val = task.batch_loss(w, eval_set) if t == steps - 1 else None
            run.records.append(
                IterationRecord(
                    iteration=t,
                    phase=phase,
                    alpha=1.0 if phase == "public" else 0.0,
                    train_loss=train_loss,
                    val_loss=val,
                    sigma=arm_sigma,
                )
            )
        runs[name] = run
    return runs

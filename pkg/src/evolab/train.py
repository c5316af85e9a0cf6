"""The training loop, per-epoch metrics, evaluation and run output."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import evt
from .cmdp import ProcessedBatch, StepRecord, Trajectory, cumulative_cost, process_trajectories
from .config import TrainConfig
from .envs import Env, make_env
from .errors import EvoError, InsufficientDataError, DegenerateDataError, InvalidInputError
from .evt import GpdParams, TailModel
from .policy import (
    SurrogateBatch,
    ValueFunction,
    fisher_vector_product,
    kl_divergence,
    make_policy,
    save_checkpoint,
    surrogate_gradients,
    surrogate_values,
    value_update,
)
from .replay import ReplayBuffer, ReplayEntry, priorities, reweigh_entries, sample_indices
from .trustregion import (
    StepProblem,
    adapt_nu,
    bound_terms,
    compute_nu0,
    line_search,
    max_state_mean_advantage,
    propose_step,
    tv_term_estimate,
    violation_prob_bound,
)

log = logging.getLogger(__name__)

# stream tags for the per-epoch RNG substreams
_ENV, _ACT, _VALUE, _REPLAY, _INIT, _EVAL = 0, 1, 2, 3, 4, 5


@dataclass
class EpochMetrics:
    epoch: int
    mean_return: float
    mean_cost: float
    violation_rate: float
    nu: float
    mu_hat: float
    xi: float
    sigma: float
    risk_boundary: float
    nu0: float
    prob_bound: float
    ks_gpd: float
    ks_gauss: float
    wall_time: float


METRIC_FIELDS = tuple(f.name for f in fields(EpochMetrics))


class TrainingError(EvoError):
    """A failure inside an epoch; ``epoch`` records where it happened."""

    def __init__(self, epoch: int, cause: BaseException):
        super().__init__(f"epoch {epoch}: {type(cause).__name__}: {cause}")
        self.epoch = epoch
        self.cause = cause


def ratio_metric(mean_return: float, violation_rate: float, eps_stability: float = 0.01) -> float:
    """Return per unit of violation, stabilised by ``eps_stability``."""
    if not eps_stability > 0:
        raise InvalidInputError("eps_stability must be > 0")
    return mean_return / (violation_rate + eps_stability)


def _episode_seed(seed: int, epoch: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, _ENV, episode]).generate_state(1)[0])


def run_episode(env: Env, policy, theta, env_seed: int, rng: np.random.Generator | None,
                ) -> Trajectory:
    """One episode under ``theta``; ``rng=None`` acts greedily."""
    obs = env.reset(env_seed)
    steps = []
    done = False
    while not done:
        if rng is None:
            raw = env_action = policy.mode(theta, obs[None, :])
            logp = 0.0
        else:
            raw, env_action, logp = policy.sample_with_log_prob(theta, obs[None, :], rng)
        nxt, r, c, done = env.step(env_action)
        steps.append(StepRecord(obs, raw, r, c, logp, done and env.terminal))
        obs = nxt
    return Trajectory(steps, final_state=obs)


def rollout(env: Env, policy, theta, n_steps: int, seed: int, epoch: int) -> list[Trajectory]:
    """Whole episodes until at least ``n_steps`` transitions are collected."""
    trajs, total, ep = [], 0, 0
    while total < n_steps:
        rng = np.random.default_rng([seed, epoch, _ACT, ep])
        traj = run_episode(env, policy, theta, _episode_seed(seed, epoch, ep), rng)
        trajs.append(traj)
        total += len(traj)
        ep += 1
    return trajs


def _values(vf: ValueFunction, params, trajs: list[Trajectory]) -> list[np.ndarray]:
    states = np.concatenate([np.vstack([t.states, t.final_state[None, :]]) for t in trajs])
    pred = vf.predict(params, states)
    out, k = [], 0
    for t in trajs:
        out.append(pred[k:k + len(t) + 1])
        k += len(t) + 1
    return out


def _fit_or_none(samples, threshold, min_peaks, previous):
    try:
        params, reused = evt.fit_tail(samples, threshold, min_peaks, previous)
    except (InsufficientDataError, DegenerateDataError):
        return None
    return params


def _cap(values: np.ndarray, n_on: int, fraction: float) -> np.ndarray:
    """Keep the newest off-policy values so they make up at most ``fraction``."""
    if fraction <= 0 or values.size == 0:
        return values[:0]
    limit = int(math.floor(fraction / (1.0 - fraction) * n_on))
    return values[values.size - limit:] if limit < values.size else values


class Trainer:
    """Algorithm state carried across epochs."""

    def __init__(self, config: TrainConfig):
        self.cfg = config
        self.env = make_env(config.env_id, **config.env_kwargs())
        self.policy = make_policy(self.env.spec)
        self.vf = ValueFunction(self.env.spec.observation_dim)
        init = np.random.default_rng([config.seed, _INIT])
        self.theta = self.policy.init_params(init)
        self.vr = self.vf.init_params(init)
        self.vc = self.vf.init_params(init)
        self.nu = 0.0 if self.cpo else config.nu_init
        self.buffer = ReplayBuffer(config.replay_capacity)
        self.cost_gpd: GpdParams | None = None
        self.reward_gpd: GpdParams | None = None
        self.transform = evt.get_transform(config.tail_transform)

    @property
    def cpo(self) -> bool:
        return self.cfg.mode == "cpo-ablation"

    @property
    def uses_replay(self) -> bool:
        return self.cfg.mode not in ("cpo-ablation", "no-offpolicy-ablation")

    def _offpolicy(self, epoch: int):
        """Importance-reweighted (A_R', C') from older buffer entries."""
        cfg = self.cfg
        self.buffer.evict_older_than(epoch, cfg.k_age)
        old = [e for e in self.buffer if e.epoch_id < epoch]
        if not old:
            return np.zeros(0), np.zeros(0)
        logp = lambda s, a: self.policy.log_prob(self.theta, s, a)
        adv, costs, _ = reweigh_entries(old, logp, cfg.is_ratio_mode, (cfg.clip_low, cfg.clip_high))
        return adv, costs

    def epoch(self, epoch: int) -> EpochMetrics:
        cfg = self.cfg
        t0 = time.perf_counter()
        d = cfg.cost_limit

        # rollout and advantages
        trajs = rollout(self.env, self.policy, self.theta, cfg.epoch_batch_steps, cfg.seed, epoch)
        batch = process_trajectories(trajs, _values(self.vf, self.vr, trajs),
                                     _values(self.vf, self.vc, trajs), cfg.gamma, cfg.gae_lambda)
        costs = batch.cumulative_costs
        j_c = float(costs.mean())
        mean_return = float(batch.episode_returns.mean())
        violation_rate = float(np.mean(costs > d))

        # value regression
        vrng = np.random.default_rng([cfg.seed, epoch, _VALUE])
        self.vr = value_update(self.vf, self.vr, batch.states, batch.reward_returns,
                               cfg.value_lr, cfg.value_iters, cfg.value_batch, vrng)
        self.vc = value_update(self.vf, self.vc, batch.states, batch.cost_returns,
                               cfg.value_lr, cfg.value_iters, cfg.value_batch, vrng)

        # tail fits on on-policy plus reweighted off-policy samples
        if self.uses_replay:
            off_adv, off_cost = self._offpolicy(epoch)
        else:
            off_adv, off_cost = np.zeros(0), np.zeros(0)
        cost_samples = self.transform(np.concatenate(
            [costs, _cap(off_cost, costs.size, cfg.offpolicy_fraction)]))
        raw_adv = batch.raw_reward_advantages
        adv_samples = self.transform(np.concatenate(
            [raw_adv, _cap(off_adv, raw_adv.size, cfg.offpolicy_fraction)]))
        q_mu = j_c
        self.cost_gpd = _fit_or_none(cost_samples, q_mu, cfg.min_peaks, self.cost_gpd)
        self.reward_gpd = _fit_or_none(adv_samples, None, cfg.min_peaks, self.reward_gpd)

        gpd = self.cost_gpd
        if gpd is not None:
            mu_hat = 1.0 - gpd.exceedance
            nu_eff = min(self.nu, 0.999 * gpd.exceedance)
            model = TailModel(gpd, self.reward_gpd or gpd, nu_eff)
            risk_b = evt.risk_boundary(model)
        else:
            # no usable tail: every trajectory sits at or below the boundary
            mu_hat = float(np.mean(cost_samples <= q_mu))
            nu_eff, model, risk_b = 0.0, None, q_mu

        # replay bookkeeping and prioritised weights
        weights = None
        if not self.cpo:
            prio = self._priorities(batch, model)
            entries = self._entries(batch, epoch, prio)
            if self.uses_replay:
                self.buffer.extend(entries)
            rrng = np.random.default_rng([cfg.seed, epoch, _REPLAY])
            draws = sample_indices(prio / prio.sum(), rrng, cfg.replay_batch)
            weights = 1.0 + np.bincount(draws, minlength=batch.n_steps)

        # constraint value
        if cfg.mode == "constant-quantile-ablation":
            level = min(mu_hat + nu_eff, 1.0)
            c = float(np.quantile(costs, level)) - d
        else:
            c = risk_b - d

        # trust-region policy update
        sb = SurrogateBatch.from_processed(batch, weights)
        g, g_c = surrogate_gradients(self.policy, self.theta, sb)
        theta_k = self.theta
        hvp = lambda v: fisher_vector_product(self.policy, theta_k, batch.states, v, cfg.cg_damping)
        problem = StepProblem(g, g_c, hvp, c, cfg.delta, cfg.cg_iters, cfg.cg_tol)
        step, recovery = propose_step(problem)
        self.theta, _ = line_search(
            theta_k, step,
            kl_fn=lambda th: kl_divergence(self.policy, th, theta_k, batch.states),
            surrogate_fn=lambda th: surrogate_values(self.policy, th, sb),
            delta=cfg.delta, c=c, recovery=recovery)
        cost_change = surrogate_values(self.policy, self.theta, sb)[1] - \
            surrogate_values(self.policy, theta_k, sb)[1]

        # theory diagnostics
        nu0 = prob_bound = ks_gpd = ks_gauss = math.nan
        if gpd is not None:
            eps_c = max_state_mean_advantage(batch.states, batch.cost_advantages)
            tv = tv_term_estimate(eps_c, cfg.delta, cfg.gamma)
            nu0 = compute_nu0(gpd, tv, cfg.gamma)
            j_terms, e_term = bound_terms(gpd, j_c, cost_change, tv, cfg.gamma)
            if j_terms > 0 and e_term >= 0:
                prob_bound = violation_prob_bound(gpd, j_terms, e_term)
            ks_gpd, ks_gauss = evt.tail_fit_scores(evt.extract_peaks(cost_samples, q_mu), gpd)

        nu_logged = self.nu
        if not self.cpo:
            self.nu = adapt_nu(self.nu, j_c, d, cfg.alpha_nu, mu_hat)

        return EpochMetrics(
            epoch=epoch, mean_return=mean_return, mean_cost=j_c,
            violation_rate=violation_rate, nu=nu_logged, mu_hat=mu_hat,
            xi=gpd.xi if gpd else math.nan, sigma=gpd.sigma if gpd else math.nan,
            risk_boundary=risk_b, nu0=nu0, prob_bound=prob_bound,
            ks_gpd=ks_gpd, ks_gauss=ks_gauss, wall_time=time.perf_counter() - t0)

    def _priorities(self, batch: ProcessedBatch, model: TailModel | None) -> np.ndarray:
        cfg = self.cfg
        n = batch.n_steps
        if cfg.mode == "no-prioritization-ablation" or model is None or self.reward_gpd is None:
            return np.ones(n)
        traj_cost = batch.cumulative_costs[batch.traj_index]
        return priorities(batch.raw_reward_advantages, traj_cost, model, cfg.p_floor)

    def _entries(self, batch: ProcessedBatch, epoch: int, prio: np.ndarray) -> list[ReplayEntry]:
        traj_cost = batch.cumulative_costs[batch.traj_index]
        return [ReplayEntry(batch.states[i], batch.actions[i], float(batch.raw_reward_advantages[i]),
                            float(traj_cost[i]), float(batch.log_probs[i]), epoch,
                            float(prio[i]), int(batch.traj_index[i]))
                for i in range(batch.n_steps)]


def metrics_row(m: EpochMetrics, with_wall_time: bool) -> list[str]:
    vals = astuple(m)
    out = [str(m.epoch)]
    for name, v in zip(METRIC_FIELDS[1:], vals[1:]):
        if name == "wall_time" and not with_wall_time:
            v = 0.0
        out.append(format(v, ".17g"))
    return out


def write_metrics(path, metrics: list[EpochMetrics], with_wall_time: bool = False) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for m in metrics:
        w.writerow(metrics_row(m, with_wall_time))
    Path(path).write_text(buf.getvalue())


def read_metrics(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochMetrics(int(r["epoch"]), *(float(r[k]) for k in METRIC_FIELDS[1:])) for r in rows]


def _checkpoint(trainer: Trainer, path: Path, epoch: int) -> None:
    cfg = trainer.cfg
    save_checkpoint(path, trainer.theta, {
        "env_id": cfg.env_id, "env_kwargs": cfg.env_kwargs(), "epoch": epoch,
        "mode": cfg.mode, "seed": cfg.seed, "cost_limit": cfg.cost_limit,
        "gamma": cfg.gamma, "nu": trainer.nu})


def train(config: TrainConfig, write: bool = True,
          callback: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
    """Run ``total_steps // epoch_batch_steps`` epochs of the algorithm.

    With ``write`` the run directory ``run_dir/<name>`` receives
    metrics.csv, timing.csv, config.txt and checkpoints/.
    """
    trainer = Trainer(config)
    n_epochs = config.total_steps // config.epoch_batch_steps
    out = None
    if write:
        out = Path(config.run_dir) / config.run_name
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
        write_metrics(out / "metrics.csv", [], config.log_wall_time)
    metrics: list[EpochMetrics] = []
    for epoch in range(n_epochs):
        try:
            m = trainer.epoch(epoch)
        except (EvoError, ArithmeticError, ValueError) as exc:
            raise TrainingError(epoch, exc) from exc
        metrics.append(m)
        if callback is not None:
            callback(m)
        if out is not None:
            write_metrics(out / "metrics.csv", metrics, config.log_wall_time)
            (out / "timing.csv").write_text(
                "epoch,wall_time\n" + "".join(f"{x.epoch},{x.wall_time:.6f}\n" for x in metrics))
            if (epoch + 1) % config.checkpoint_every == 0 or epoch == n_epochs - 1:
                _checkpoint(trainer, out / "checkpoints" / f"epoch_{epoch:04d}.ckpt", epoch)
    return metrics


def evaluate(policy, theta, env_id: str, episodes: int, seed: int = 0,
             cost_limit: float = 25.0, gamma: float = 0.99, env_kwargs: dict | None = None,
             ) -> tuple[float, float, float]:
    """Greedy rollouts; returns (mean_return, mean_cost, violation_rate).

    ``mean_cost`` is the mean discounted cumulative cost, the same quantity
    the constraint is placed on during training.
    """
    if episodes < 1:
        raise InvalidInputError("episodes must be >= 1")
    env = make_env(env_id, **(env_kwargs or {}))
    rets, costs = [], []
    for ep in range(episodes):
        env_seed = int(np.random.SeedSequence([seed, _EVAL, ep]).generate_state(1)[0])
        traj = run_episode(env, policy, theta, env_seed, None)
        rets.append(float(traj.rewards.sum()))
        costs.append(cumulative_cost(traj, gamma))
    costs = np.array(costs)
    return float(np.mean(rets)), float(costs.mean()), float(np.mean(costs > cost_limit))

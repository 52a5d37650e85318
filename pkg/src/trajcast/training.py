"""Training: the beta-weighted evidence bound over latent chains, adaptive
moment estimation with gradient clipping, and the alternating schedule that
updates the posterior side (encoders, posterior, decoder, observation noise)
on even steps and the prior side on odd steps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from trajcast import diffcore as dc
from trajcast import model as md
from trajcast import scene_data as sd


class TrainError(RuntimeError):
    """Aborted training run (divergence or invalid configuration)."""


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "joint_beta_cvae"
    beta: float = 0.10
    lr: float = 3e-3
    lr_decay: float = 0.9999  # multiplicative, per step
    steps: int = 400
    batch_scenes: int = 8
    seed: int = 0
    ego_conditioning: bool = True
    grad_clip: float = 10.0
    eval_every: int = 0  # 0 disables validation scoring
    eval_samples: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    latent_dim: int = 32
    rnn_hidden: int = 128
    attn_hidden: int = 64
    ctx_dim: int = 64
    head_hidden: int = 128

    def validate(self):
        if self.beta <= 0:
            raise TrainError(f"beta must be > 0, got {self.beta}")
        if self.lr <= 0:
            raise TrainError(f"lr must be > 0, got {self.lr}")
        if not (0.0 < self.lr_decay <= 1.0):
            raise TrainError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.steps < 0 or self.batch_scenes < 1:
            raise TrainError("steps must be >= 0 and batch_scenes >= 1")
        md.canonical_variant(self.variant)

    def effective_beta(self) -> float:
        # the plain conditional VAE is the unweighted objective
        return 1.0 if md.canonical_variant(self.variant) == "cvae" else self.beta

    def model_hyper(self) -> dict:
        return dict(
            latent_dim=self.latent_dim, rnn_hidden=self.rnn_hidden,
            attn_hidden=self.attn_hidden, ctx_dim=self.ctx_dim,
            head_hidden=self.head_hidden, ego_conditioning=self.ego_conditioning,
        )


@dataclass
class StepRecord:
    step: int
    phase: str
    loss: float
    recon: float
    kl: float
    lr: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)  # (step, best-of-N fde)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "phase", "loss", "recon", "kl", "lr"])
            for r in self.steps:
                w.writerow([r.step, r.phase, repr(r.loss), repr(r.recon), repr(r.kl), repr(r.lr)])

    def save_val(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "val_fde"])
            for step, fde in self.val:
                w.writerow([step, repr(fde)])


# ---------------------------------------------------------------------------
# objective


@dataclass
class AgentTerms:
    agent_id: int
    loglik: float
    kl: float
    log_q: float  # log q(z_i | Z_<i, X, Y) at the drawn sample
    log_p: float  # log p(z_i | Z_<i, X) at the drawn sample


@dataclass
class ElboResult:
    loss: dc.Tensor  # scalar, -ELBO
    recon: float  # sum of log-likelihood terms
    kl: float  # sum of KL terms
    per_agent: list[AgentTerms]
    z_values: list[np.ndarray]

    @property
    def loss_value(self) -> float:
        return float(self.loss.value)


def _noise_matrix(noise, n_agents: int, latent_dim: int) -> np.ndarray:
    if isinstance(noise, np.random.Generator):
        return noise.standard_normal((n_agents, latent_dim))
    eps = np.asarray(noise, dtype=np.float64)
    if eps.shape != (n_agents, latent_dim):
        raise TrainError(f"noise shape {eps.shape} != {(n_agents, latent_dim)}")
    return eps


def elbo(scene: sd.Scene, params: md.ModelParams, noise, config: TrainConfig,
         ctx: md.PassContext | None = None) -> ElboResult:
    """Single-sample negative evidence bound for one scene.

    Walks agents in canonical chain order; draws each latent from its
    posterior conditional, scores the future under the decoder, and adds the
    beta-weighted KL against the prior conditional.
    """
    if ctx is None:
        ctx = md.new_pass(params)
    chain = md.chain_view(scene, params.config.ego_conditioning)
    if chain.n_agents == 0:
        raise TrainError(f"scene {scene.scene_id}: empty chain (ego-only scene "
                         "with ego conditioning off)")
    eps = _noise_matrix(noise, chain.n_agents, params.config.latent_dim)
    embeddings = md.encode_past(chain, ctx)
    md.encode_future(chain, ctx, embeddings)
    beta = config.effective_beta()
    log_sigma2 = ctx.leaf("log_sigma2")

    zs: list[dc.Tensor] = []
    prior_latents: list[md.GaussianLatent] = []
    loss = None
    recon_total = 0.0
    kl_total = 0.0
    per_agent: list[AgentTerms] = []
    for i, agent in enumerate(chain.agents):
        q_i = md.posterior_step(i, zs, embeddings, ctx)
        z_i = md.sample_latent(q_i, eps[i])
        zs.append(z_i)
        p_i = md.prior_step(i, zs[:i], embeddings, ctx)
        prior_latents.append(p_i)
        kl_i = md.kl_divergence(q_i, p_i)
        decoded = md.decode(i, zs, embeddings, ctx, chain.pred_len)
        target = agent.future(chain.obs_len, chain.pred_len)
        ll_i = md.recon_loglik(decoded, target, log_sigma2)
        term = dc.add(dc.mul(ll_i, -1.0), dc.mul(kl_i, beta))
        loss = term if loss is None else dc.add(loss, term)
        recon_total += float(ll_i.value)
        kl_total += float(kl_i.value)
        per_agent.append(AgentTerms(
            agent_id=agent.id,
            loglik=float(ll_i.value),
            kl=float(kl_i.value),
            log_q=md.gaussian_logpdf(z_i.value, q_i.mean_value, q_i.log_var_value),
            log_p=md.gaussian_logpdf(z_i.value, p_i.mean_value, p_i.log_var_value),
        ))
    return ElboResult(loss=loss, recon=recon_total, kl=kl_total,
                      per_agent=per_agent, z_values=[z.value for z in zs])


def joint_posterior_logpdf(scene: sd.Scene, params: md.ModelParams,
                           z_values: list[np.ndarray]) -> float:
    """log q(Z | X, Y) of a full latent chain, evaluated jointly by re-running
    the chain with the given samples held fixed."""
    ctx = md.new_pass(params, record=False)
    chain = md.chain_view(scene, params.config.ego_conditioning)
    embeddings = md.encode_past(chain, ctx)
    md.encode_future(chain, ctx, embeddings)
    total = 0.0
    zs = []
    for i in range(chain.n_agents):
        q_i = md.posterior_step(i, zs, embeddings, ctx)
        total += md.gaussian_logpdf(z_values[i], q_i.mean_value, q_i.log_var_value)
        zs.append(ctx.tape.leaf(z_values[i]))
    return total


def importance_weighted_bound(scene: sd.Scene, params: md.ModelParams,
                              config: TrainConfig, k: int, seed: int = 0
                              ) -> tuple[float, float]:
    """K-sample importance-weighted bound and the mean single-sample bound
    over the same chains. The first majorizes the second for any draw set
    (Jensen), which the validity tests rely on."""
    rng = np.random.default_rng([seed, 515151])
    weights = []
    for _ in range(k):
        res = elbo(scene, params, rng, config)
        weights.append(sum(t.loglik + t.log_p - t.log_q for t in res.per_agent))
    weights = np.asarray(weights)
    m = weights.max()
    iw = float(m + np.log(np.exp(weights - m).mean()))
    return iw, float(weights.mean())


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment estimation with per-parameter step counts, so the two
    alternating phases each see proper bias correction."""

    def __init__(self, names, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}
        self.t = {n: 0 for n in names}

    def update(self, params: md.ModelParams, grads: dict[str, np.ndarray],
               names, lr: float) -> None:
        for n in names:
            g = grads[n]
            if self.m[n] is None:
                self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
            self.t[n] += 1
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
            m_hat = self.m[n] / (1 - self.beta1 ** self.t[n])
            v_hat = self.v[n] / (1 - self.beta2 ** self.t[n])
            params.values[n] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(grads: dict[str, np.ndarray], names, max_norm: float) -> float:
    """Scale the named gradients to a global norm of at most max_norm."""
    sq = 0.0
    for n in names:
        g = grads[n]
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for n in names:
            grads[n] = grads[n] * scale
    return norm


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: md.ModelParams  # best-val checkpoint when validation ran, else final
    final_params: md.ModelParams
    log: TrainLog
    best_val_fde: float | None = None


def train(data: sd.SplitDataset, config: TrainConfig) -> TrainResult:
    """Maximize the evidence bound over the train split.

    Even steps update encoders, posterior, decoder and observation noise with
    the prior frozen; odd steps update only prior-side parameters. Runs are
    bit-reproducible for a fixed (seed, config).
    """
    config.validate()
    if not data.train:
        raise TrainError("empty train split")
    params = md.build_variant(config.variant, seed=config.seed, **config.model_hyper())
    adam = Adam(params.trainable_names(), config.adam_beta1, config.adam_beta2,
                config.adam_eps)
    batch_rng = np.random.default_rng([config.seed, 101])
    log = TrainLog()
    best_val = None
    best_params = None
    train_scenes = list(data.train)

    for step in range(config.steps):
        phase = "A" if step % 2 == 0 else "B"
        lr = config.lr * (config.lr_decay ** step)
        n_batch = min(config.batch_scenes, len(train_scenes))
        picks = batch_rng.choice(len(train_scenes), size=n_batch, replace=False)
        grads: dict[str, np.ndarray] = {}
        loss_sum = recon_sum = kl_sum = 0.0
        for slot, scene_idx in enumerate(picks):
            scene = train_scenes[int(scene_idx)]
            ctx = md.new_pass(params)
            res, g = _scene_grads_with_ctx(scene, params, config, step, slot, ctx)
            loss_sum += res.loss_value
            recon_sum += res.recon
            kl_sum += res.kl
            for name, leaf in ctx.leaves.items():
                contrib = g[leaf] / n_batch
                if name in grads:
                    grads[name] += contrib
                else:
                    grads[name] = contrib
        loss_mean = loss_sum / n_batch
        if not math.isfinite(loss_mean) or loss_mean > 1e6:
            raise TrainError(f"divergence at step {step}: batch loss {loss_mean}")
        active = params.phase_names(phase)
        clip_gradients(grads, active, config.grad_clip)
        adam.update(params, grads, active, lr)
        params.clamp_constraints()
        log.steps.append(StepRecord(step=step, phase=phase, loss=loss_mean,
                                    recon=recon_sum / n_batch, kl=kl_sum / n_batch, lr=lr))
        if config.eval_every and data.val and (step + 1) % config.eval_every == 0:
            fde = _validation_fde(data.val, params, config, step)
            log.val.append((step, fde))
            if best_val is None or fde < best_val:
                best_val = fde
                best_params = params.copy()

    final = params.copy()
    chosen = best_params if best_params is not None else final
    return TrainResult(params=chosen, final_params=final, log=log, best_val_fde=best_val)


def _scene_grads_with_ctx(scene, params, config, step, slot, ctx):
    rng = np.random.default_rng([config.seed, 202, step, slot])
    try:
        res = elbo(scene, params, rng, config, ctx=ctx)
    except dc.DiffError as err:
        raise TrainError(
            f"numerical failure at step {step} on scene {scene.scene_id}: {err}"
        ) from err
    if not math.isfinite(res.loss_value):
        raise TrainError(
            f"non-finite loss at step {step} on scene {scene.scene_id} "
            f"(recon {res.recon}, kl {res.kl})"
        )
    return res, dc.backward(res.loss)


def _validation_fde(val_scenes, params, config, step) -> float:
    from trajcast import inference, metrics

    errors = []
    for idx, scene in enumerate(val_scenes):
        seed = int(np.random.SeedSequence([config.seed, 301, step, idx]).generate_state(1)[0])
        pred = inference.predict(scene, params, config.eval_samples, seed)
        ordered = sd.order_agents(scene)
        for agent in ordered.non_ego():
            if agent.id not in pred.samples:
                continue
            gt = agent.future(scene.obs_len, scene.pred_len)
            errors.append(metrics.fde_best_of_n(pred.samples[agent.id], gt, scene.pred_len - 1))
    return float(np.mean(errors)) if errors else float("inf")

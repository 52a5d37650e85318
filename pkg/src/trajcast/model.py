"""The trajectory model: per-agent recurrent encoders, an autoregressive
posterior/prior pair over a latent chain shared across agents, cross-agent
attention, and a recurrent displacement decoder with a learned observation
noise.

Three variants share one parameterization:

  cvae            per-agent independent latents, KL weight 1, fixed unit
                  observation noise
  beta_cvae       per-agent independent latents, weighted KL, learned noise
  joint_beta_cvae adds cross-agent attention so agent i's latent conditions
                  on the latents and encodings of agents ordered before it

The independent variants route every attention context through a learned
null vector, so a joint model whose attention is forced to the null context
computes exactly the same function given identical shared parameters.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from trajcast import diffcore as dc
from trajcast import scene_data as sd

VARIANTS = ("cvae", "beta_cvae", "joint_beta_cvae")
VARIANT_ALIASES = {"joint": "joint_beta_cvae"}

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 4.0
LOG_SIGMA2_MIN, LOG_SIGMA2_MAX = math.log(1e-3), math.log(1.0)
LN_2PI = math.log(2.0 * math.pi)

# positions and velocities are fed to the networks in decameters so typical
# urban coordinates land in the active range of tanh/sigmoid units
INPUT_SCALE = 0.1

_KIND_INDEX = {k: i for i, k in enumerate(sd.AGENT_KINDS)}


class ModelError(ValueError):
    """Invalid model configuration, wiring, or checkpoint."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "joint_beta_cvae"
    latent_dim: int = 32
    rnn_hidden: int = 128
    attn_hidden: int = 64
    ctx_dim: int = 64
    head_hidden: int = 128
    ego_conditioning: bool = True

    @property
    def use_attention(self) -> bool:
        return self.variant == "joint_beta_cvae"

    @property
    def learn_sigma(self) -> bool:
        return self.variant != "cvae"


def canonical_variant(kind: str) -> str:
    kind = VARIANT_ALIASES.get(kind, kind)
    if kind not in VARIANTS:
        raise ModelError(f"unknown model variant {kind!r}; expected one of {VARIANTS}")
    return kind


FEATURE_DIM = 7  # x, y, vx, vy, one-hot agent kind


def _param_template(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, L = cfg.rnn_hidden, cfg.latent_dim
    A, C, HH = cfg.attn_hidden, cfg.ctx_dim, cfg.head_hidden
    F = FEATURE_DIM
    shapes: dict[str, tuple[int, ...]] = {}
    for enc in ("enc_past", "enc_fut"):
        shapes[f"{enc}.w_x"] = (3 * H, F)
        shapes[f"{enc}.w_h"] = (3 * H, H)
        shapes[f"{enc}.b"] = (3 * H,)

    def attention(prefix: str, q_dim: int, k_dim: int, v_dim: int):
        if cfg.use_attention:
            shapes[f"{prefix}.attn_score_w1"] = (A, q_dim + k_dim + 2)
            shapes[f"{prefix}.attn_score_b1"] = (A,)
            shapes[f"{prefix}.attn_score_w2"] = (1, A)
            shapes[f"{prefix}.attn_score_b2"] = (1,)
            shapes[f"{prefix}.attn_value_w"] = (C, v_dim)
            shapes[f"{prefix}.attn_value_b"] = (C,)
        shapes[f"{prefix}.null_ctx"] = (C,)

    attention("post", 2 * H, 2 * H, L + 2 * H)
    shapes["post.head_w1"] = (HH, 2 * H + C)
    shapes["post.head_b1"] = (HH,)
    shapes["post.head_w2"] = (2 * L, HH)
    shapes["post.head_b2"] = (2 * L,)

    attention("prior", H, H, L + H)
    shapes["prior.head_w1"] = (HH, H + C)
    shapes["prior.head_b1"] = (HH,)
    shapes["prior.head_w2"] = (2 * L, HH)
    shapes["prior.head_b2"] = (2 * L,)

    attention("dec", H, H, L + H)
    shapes["dec.init_w"] = (H, H + L + C)
    shapes["dec.init_b"] = (H,)
    shapes["dec.gru_w_x"] = (3 * H, 2 + L)
    shapes["dec.gru_w_h"] = (3 * H, H)
    shapes["dec.gru_b"] = (3 * H,)
    shapes["dec.out_w"] = (2, H)
    shapes["dec.out_b"] = (2,)
    shapes["log_sigma2"] = (2,)
    return shapes


# output heads and all biases start at zero so fresh models predict constant
# positions and unit-Gaussian latents; recurrent matrices are orthogonal
_ZERO_LAST = {
    "b", "gru_b", "init_b", "head_b1", "attn_score_b1", "attn_value_b",
    "head_w2", "head_b2", "out_w", "out_b", "attn_score_w2", "attn_score_b2",
    "null_ctx", "log_sigma2",
}
_ORTHOGONAL_LAST = {"w_h", "gru_w_h"}


def _orthogonal_blocks(rng, rows: int, cols: int) -> np.ndarray:
    """Stacked per-gate orthogonal blocks for recurrent matrices."""
    out = np.empty((rows, cols))
    for k in range(rows // cols):
        m = rng.normal(size=(cols, cols))
        q, r = np.linalg.qr(m)
        q = q * np.sign(np.diag(r))
        out[k * cols:(k + 1) * cols] = q
    return out


def _init_value(name: str, shape: tuple[int, ...], rng) -> np.ndarray:
    last = name.rsplit(".", 1)[-1]
    if last in _ZERO_LAST:
        return np.zeros(shape)
    if last in _ORTHOGONAL_LAST:
        return _orthogonal_blocks(rng, *shape)
    bound = 1.0 / math.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Named parameter arrays plus the configuration that shaped them.

    Names prefixed "prior." are the prior side of the model; everything else
    (encoders, posterior, decoder, observation noise) is the other phase of
    the alternating optimization.
    """

    def __init__(self, config: ModelConfig, values: dict[str, np.ndarray]):
        self.config = config
        self.values = values

    @property
    def variant(self) -> str:
        return self.config.variant

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.values.items()})

    def leaves(self, tape: dc.Tape) -> dict[str, dc.Tensor]:
        return {name: tape.leaf(value) for name, value in self.values.items()}

    def trainable_names(self) -> list[str]:
        names = list(self.values)
        if not self.config.learn_sigma:
            names.remove("log_sigma2")
        return names

    def phase_names(self, phase: str) -> list[str]:
        prior = [n for n in self.trainable_names() if n.startswith("prior.")]
        if phase == "B":
            return prior
        if phase == "A":
            return [n for n in self.trainable_names() if not n.startswith("prior.")]
        raise ModelError(f"unknown phase {phase!r}")

    def digest(self, names=None) -> str:
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self.values):
            h.update(name.encode())
            h.update(self.values[name].tobytes())
        return h.hexdigest()

    def clamp_constraints(self) -> None:
        np.clip(self.values["log_sigma2"], LOG_SIGMA2_MIN, LOG_SIGMA2_MAX,
                out=self.values["log_sigma2"])


def build_variant(kind: str, seed: int = 0, **hyper) -> ModelParams:
    """Instantiate a model variant with deterministic initialization."""
    cfg = ModelConfig(variant=canonical_variant(kind), **hyper)
    rng = np.random.default_rng([seed, 424243])
    values = {name: _init_value(name, shape, rng)
              for name, shape in _param_template(cfg).items()}
    return ModelParams(cfg, values)


# ---------------------------------------------------------------------------
# checkpoint I/O

CHECKPOINT_FORMAT = "trajcast-checkpoint"
CHECKPOINT_VERSION = 1


def save_params(params: ModelParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "values": {
            name: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for name, v in params.values.items()
        },
    }
    path.write_text(json.dumps(obj, separators=(",", ":")), encoding="utf-8")


def load_params(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"checkpoint not found: {path}")
    obj = json.loads(path.read_text(encoding="utf-8"))
    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = ModelConfig(**obj["config"])
    template = _param_template(cfg)
    if set(obj["values"]) != set(template):
        raise ModelError(f"{path}: parameter names do not match the {cfg.variant} layout")
    values = {}
    for name, spec in obj["values"].items():
        shape = tuple(spec["shape"])
        if shape != template[name]:
            raise ModelError(
                f"{path}: parameter {name} has shape {shape}, expected {template[name]}"
            )
        values[name] = np.asarray(spec["data"], dtype=np.float64).reshape(shape)
    # keep canonical insertion order
    return ModelParams(cfg, {name: values[name] for name in template})


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class AgentEmbedding:
    agent_id: int
    kind: str
    past_code: dc.Tensor
    location: np.ndarray  # last observed position, meters
    future_code: dc.Tensor | None = None


@dataclass(frozen=True)
class GaussianLatent:
    mean: dc.Tensor
    log_var: dc.Tensor

    @property
    def mean_value(self) -> np.ndarray:
        return self.mean.value

    @property
    def log_var_value(self) -> np.ndarray:
        return self.log_var.value


class PassContext:
    """One differentiable pass: a tape plus the parameter leaves on it."""

    def __init__(self, params: ModelParams, tape: dc.Tape | None = None):
        self.params = params
        self.config = params.config
        self.tape = tape if tape is not None else dc.Tape()
        self.leaves = params.leaves(self.tape)

    def leaf(self, name: str) -> dc.Tensor:
        return self.leaves[name]


def new_pass(params: ModelParams, record: bool = True) -> PassContext:
    return PassContext(params, dc.Tape(record=record))


def chain_view(scene: sd.Scene, ego_conditioning: bool = True) -> sd.Scene:
    """Canonically ordered scene, with the ego removed from the processing
    chain when ego conditioning is off (the scene itself keeps the ego)."""
    ordered = sd.order_agents(scene)
    if not ego_conditioning:
        ordered = replace(ordered, agents=ordered.non_ego())
    return ordered


def _step_features(points: np.ndarray, dt: float, kind: str,
                   prev_point: np.ndarray | None = None) -> np.ndarray:
    """Per-step inputs: scaled position, backward-difference velocity, kind."""
    T = points.shape[0]
    feats = np.zeros((T, FEATURE_DIM))
    feats[:, 0:2] = points * INPUT_SCALE
    vel = np.zeros_like(points)
    if T > 1:
        vel[1:] = (points[1:] - points[:-1]) / dt
    if prev_point is not None:
        vel[0] = (points[0] - prev_point) / dt
    elif T > 1:
        vel[0] = vel[1]
    feats[:, 2:4] = vel * INPUT_SCALE
    feats[:, 4 + _KIND_INDEX[kind]] = 1.0
    return feats


def _run_gru(feats: np.ndarray, ctx: PassContext, prefix: str) -> dc.Tensor:
    H = ctx.config.rnn_hidden
    w_x, w_h, b = ctx.leaf(f"{prefix}.w_x"), ctx.leaf(f"{prefix}.w_h"), ctx.leaf(f"{prefix}.b")
    h = ctx.tape.leaf(np.zeros(H))
    for t in range(feats.shape[0]):
        h = dc.gru_cell(feats[t], h, w_x, w_h, b)
    return h


def encode_past(scene: sd.Scene, ctx: PassContext) -> list[AgentEmbedding]:
    """Shared-weight recurrent encoding of every agent's observed steps."""
    out = []
    for agent in scene.agents:
        past = agent.past(scene.obs_len)
        feats = _step_features(past, scene.dt, agent.kind)
        out.append(AgentEmbedding(
            agent_id=agent.id,
            kind=agent.kind,
            past_code=_run_gru(feats, ctx, "enc_past"),
            location=past[-1].copy(),
        ))
    return out


def encode_future(scene: sd.Scene, ctx: PassContext,
                  embeddings: list[AgentEmbedding]) -> None:
    """Posterior-side encoding of ground-truth futures (train time only)."""
    for agent, emb in zip(scene.agents, embeddings):
        future = agent.future(scene.obs_len, scene.pred_len)
        feats = _step_features(future, scene.dt, agent.kind,
                               prev_point=agent.positions[scene.obs_len - 1])
        emb.future_code = _run_gru(feats, ctx, "enc_fut")


def _attention(ctx: PassContext, prefix: str, query: dc.Tensor,
               entries: list[tuple]) -> dc.Tensor:
    """Scalar-scored attention over earlier agents; softmax-normalized.

    entries: (key_code, rel_location, value_feats) per earlier agent. With no
    entries (first agent, or the independent variants) the learned null
    context is returned.
    """
    if not entries or not ctx.config.use_attention:
        return ctx.leaf(f"{prefix}.null_ctx")
    w1, b1 = ctx.leaf(f"{prefix}.attn_score_w1"), ctx.leaf(f"{prefix}.attn_score_b1")
    w2, b2 = ctx.leaf(f"{prefix}.attn_score_w2"), ctx.leaf(f"{prefix}.attn_score_b2")
    vw, vb = ctx.leaf(f"{prefix}.attn_value_w"), ctx.leaf(f"{prefix}.attn_value_b")
    scores = []
    values = []
    for key_code, rel_loc, value_feats in entries:
        score_in = dc.concat([query, key_code, rel_loc * INPUT_SCALE])
        hidden = dc.tanh(dc.add(dc.matmul(w1, score_in), b1))
        scores.append(dc.add(dc.matmul(w2, hidden), b2))
        values.append(dc.add(dc.matmul(vw, value_feats), vb))
    weights = dc.softmax(dc.concat(scores))
    out = None
    for j, value in enumerate(values):
        w_j = dc.reshape(dc.narrow(weights, 0, j, 1), ())
        term = dc.mul(value, w_j)
        out = term if out is None else dc.add(out, term)
    return out


def posterior_step(i: int, z_prev: list[dc.Tensor], embeddings: list[AgentEmbedding],
                   ctx: PassContext) -> GaussianLatent:
    """Latent conditional for agent i given earlier agents' sampled latents
    and both past and future encodings."""
    emb = embeddings[i]
    if emb.future_code is None:
        raise ModelError("posterior_step: future encodings missing "
                         "(the posterior is a train-time object)")
    query = dc.concat([emb.past_code, emb.future_code])
    entries = []
    for j in range(i):
        other = embeddings[j]
        entries.append((
            dc.concat([other.past_code, other.future_code]),
            other.location - emb.location,
            dc.concat([z_prev[j], other.past_code, other.future_code]),
        ))
    ctx_vec = _attention(ctx, "post", query, entries)
    return _gaussian_head(ctx, "post", dc.concat([query, ctx_vec]))


def prior_step(i: int, z_prev: list[dc.Tensor], embeddings: list[AgentEmbedding],
               ctx: PassContext) -> GaussianLatent:
    """Latent conditional for agent i from past encodings only."""
    emb = embeddings[i]
    entries = []
    for j in range(i):
        other = embeddings[j]
        entries.append((
            other.past_code,
            other.location - emb.location,
            dc.concat([z_prev[j], other.past_code]),
        ))
    ctx_vec = _attention(ctx, "prior", emb.past_code, entries)
    return _gaussian_head(ctx, "prior", dc.concat([emb.past_code, ctx_vec]))


def _gaussian_head(ctx: PassContext, prefix: str, inputs: dc.Tensor) -> GaussianLatent:
    L = ctx.config.latent_dim
    hidden = dc.tanh(dc.add(dc.matmul(ctx.leaf(f"{prefix}.head_w1"), inputs),
                            ctx.leaf(f"{prefix}.head_b1")))
    out = dc.add(dc.matmul(ctx.leaf(f"{prefix}.head_w2"), hidden),
                 ctx.leaf(f"{prefix}.head_b2"))
    mean = dc.narrow(out, 0, 0, L)
    log_var = dc.clip(dc.narrow(out, 0, L, L), LOG_VAR_MIN, LOG_VAR_MAX)
    return GaussianLatent(mean=mean, log_var=log_var)


def sample_latent(g: GaussianLatent, noise: np.ndarray) -> dc.Tensor:
    """Reparameterized draw z = mean + exp(log_var / 2) * noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.value.shape:
        raise ModelError(f"sample_latent: noise shape {noise.shape} != latent "
                         f"shape {g.mean.value.shape}")
    return dc.add(g.mean, dc.mul(dc.exp(dc.mul(g.log_var, 0.5)), noise))


@dataclass
class DecodeResult:
    displacements: list[dc.Tensor]  # (2,) per future step
    positions: list[dc.Tensor]  # cumulative from the last observed position

    def positions_array(self) -> np.ndarray:
        return np.stack([p.value for p in self.positions])


def decode(i: int, zs: list[dc.Tensor], embeddings: list[AgentEmbedding],
           ctx: PassContext, pred_len: int) -> DecodeResult:
    """Recurrent displacement decoder for agent i, conditioned on its latent,
    its past encoding, and (in the joint variant) earlier agents."""
    emb = embeddings[i]
    z_i = zs[i]
    entries = []
    for j in range(i):
        other = embeddings[j]
        entries.append((
            other.past_code,
            other.location - emb.location,
            dc.concat([zs[j], other.past_code]),
        ))
    ctx_vec = _attention(ctx, "dec", emb.past_code, entries)
    h = dc.tanh(dc.add(dc.matmul(ctx.leaf("dec.init_w"),
                                 dc.concat([emb.past_code, z_i, ctx_vec])),
                       ctx.leaf("dec.init_b")))
    w_x, w_h, b = ctx.leaf("dec.gru_w_x"), ctx.leaf("dec.gru_w_h"), ctx.leaf("dec.gru_b")
    out_w, out_b = ctx.leaf("dec.out_w"), ctx.leaf("dec.out_b")
    displacements: list[dc.Tensor] = []
    positions: list[dc.Tensor] = []
    prev_disp = None
    prev_pos = None
    for _ in range(pred_len):
        if prev_disp is None:
            inp = dc.concat([np.zeros(2), z_i])
        else:
            inp = dc.concat([dc.mul(prev_disp, INPUT_SCALE), z_i])
        h = dc.gru_cell(inp, h, w_x, w_h, b)
        disp = dc.add(dc.matmul(out_w, h), out_b)
        pos = dc.add(disp, emb.location if prev_pos is None else prev_pos)
        displacements.append(disp)
        positions.append(pos)
        prev_disp, prev_pos = disp, pos
    return DecodeResult(displacements=displacements, positions=positions)


def recon_loglik(result: DecodeResult, target: np.ndarray,
                 log_sigma2: dc.Tensor) -> dc.Tensor:
    """Log-likelihood of a ground-truth future under the decoder's
    per-coordinate Gaussian with variance exp(log_sigma2)."""
    inv_var = dc.exp(dc.mul(log_sigma2, -1.0))
    norm = dc.mul(dc.sum(dc.add(log_sigma2, LN_2PI)), -0.5)
    total = dc.mul(norm, float(len(result.positions)))
    for t, pos in enumerate(result.positions):
        err = dc.square(dc.sub(pos, target[t]))
        total = dc.add(total, dc.mul(dc.sum(dc.mul(err, inv_var)), -0.5))
    return total


def kl_divergence(q: GaussianLatent, p: GaussianLatent) -> dc.Tensor:
    """Closed-form KL between diagonal Gaussians, as a scalar tensor."""
    if q.mean.value.shape != p.mean.value.shape:
        raise ModelError("kl_divergence: dimension mismatch")
    diff_lv = dc.sub(q.log_var, p.log_var)
    var_ratio = dc.exp(diff_lv)
    mahal = dc.mul(dc.square(dc.sub(q.mean, p.mean)), dc.exp(dc.mul(p.log_var, -1.0)))
    inner = dc.sub(dc.add(var_ratio, mahal), dc.add(diff_lv, 1.0))
    return dc.mul(dc.sum(inner), 0.5)


# ---------------------------------------------------------------------------
# numpy-side density helpers (no gradients)


def gaussian_logpdf(z: np.ndarray, mean: np.ndarray, log_var: np.ndarray) -> float:
    """Diagonal-Gaussian log density."""
    delta = np.asarray(z) - np.asarray(mean)
    return float(-0.5 * np.sum(LN_2PI + log_var + delta * delta * np.exp(-log_var)))


def recon_loglik_value(pred: np.ndarray, target: np.ndarray,
                       log_sigma2: np.ndarray) -> float:
    """Closed-form value of recon_loglik on plain arrays."""
    err2 = (np.asarray(pred) - np.asarray(target)) ** 2
    inv = np.exp(-log_sigma2)
    steps = pred.shape[0]
    return float(-0.5 * (err2 * inv).sum() - 0.5 * steps * (LN_2PI + log_sigma2).sum())

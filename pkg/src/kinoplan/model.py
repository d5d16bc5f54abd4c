"""The learned internal model: recurrent memory, stochastic latent, explicit
kinodynamic state, and the heads that make it a dynamics/return oracle.

Components: observation preprocessing (proprio MLP + scan conv stack) into an
embedding e; a GRU core updating memory h from (state features, latent,
action); an encoder pair estimating (z, x) from (e, h); a dynamics pair
predicting (z, x) from h alone, with x advanced by a learned wrench through
the fixed semi-implicit integrator; a decoder reconstructing the observation
vector; reward/value heads; and an internal policy used to drive imagined
rollouts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import DataError, DimensionError, TrainingError
from .nn import (Conv1d, Dense, DiagonalGaussian, GaussianHead, GruCell, MLP, Module)
from .state import (BodyParams, FEATURE_IDX, IDX_OFFSET, IDX_OMEGA, IDX_PITCH,
                    IDX_PX, IDX_PZ, IDX_VX, IDX_VZ, ModelState, X_DIM,
                    X_FEAT_DIM, foot_height, x_features)


@dataclass(frozen=True)
class ModelConfig:
    d_h: int = 128
    d_z: int = 16
    d_e: int = 64
    history_len: int = 5
    proprio_dim: int = 9
    scan_rays: int = 64
    scan_max_range: float = 3.0
    action_dim: int = 4
    dt_model: float = 0.1
    imagination_horizon: int = 8
    beta_kl: float = 1.0
    embed_hidden: int = 48
    head_hidden: int = 64
    decoder_hidden: int = 128
    gravity_on: bool = True

    @property
    def proprio_size(self) -> int:
        return self.history_len * self.proprio_dim

    @property
    def obs_dim(self) -> int:
        return self.proprio_size + self.scan_rays

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ImaginedRollout:
    """Predicted kinodynamic states over an imagination horizon.

    states[0] is the first prediction (the posterior step); the terminal
    model state is the post-posterior state used as the next starting point.
    """

    states: np.ndarray   # (H, 7)
    actions: np.ndarray  # (H, action_dim)
    terminal_model_state: ModelState


LOSS_TERMS = ("reward_nll", "value_nll", "latent_kl", "action_cloning", "com", "reconstruction")

_BATCH_FIELDS = ("obs", "action", "reward", "value_target", "x", "x_next",
                 "x_prev", "floor_now", "floor_next")


class InternalModel(Module):
    def __init__(self, cfg: ModelConfig, body: BodyParams,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.body = body
        self.floor_fn = None   # optional floor-height lookup for the contact mode

        # observation preprocessing
        self.proprio_enc = Dense(cfg.proprio_size, cfg.embed_hidden, "elu", rng)
        self.scan_conv1 = Conv1d(1, 8, 5, 2, rng)
        self.scan_conv2 = Conv1d(8, 16, 5, 2, rng)
        scan_flat = 16 * self.scan_conv2.out_length(self.scan_conv1.out_length(cfg.scan_rays))
        self.scan_proj = Dense(scan_flat, cfg.embed_hidden, "elu", rng)
        self.embed_out = Dense(2 * cfg.embed_hidden, cfg.d_e, "elu", rng)

        # recurrent core and state heads
        gin = X_FEAT_DIM + cfg.d_z + cfg.action_dim
        self.gru = GruCell(gin, cfg.d_h, rng)
        self.post_z = GaussianHead(cfg.d_e + cfg.d_h, cfg.d_z, [cfg.head_hidden], rng)
        self.post_x = MLP([cfg.d_e + cfg.d_h, cfg.head_hidden, X_DIM], rng)
        self.prior_z = GaussianHead(cfg.d_h, cfg.d_z, [cfg.head_hidden], rng)
        self.wrench = MLP([cfg.d_h, cfg.head_hidden, cfg.action_dim], rng)

        # distribution heads over the model state
        ydim = X_FEAT_DIM + cfg.d_h + cfg.d_z
        self.decoder = GaussianHead(ydim, cfg.obs_dim, [cfg.decoder_hidden], rng)
        self.reward_head = GaussianHead(ydim + cfg.action_dim, 1, [cfg.head_hidden], rng)
        self.value_head = GaussianHead(ydim, 1, [cfg.head_hidden], rng)
        self.policy_head = GaussianHead(ydim, cfg.action_dim, [cfg.head_hidden], rng)

        # instrumentation: how often each branch of the rollout loop ran
        self.encoder_calls = 0
        self.dynamics_calls = 0

    # -- observation handling ---------------------------------------------------

    def obs_target(self, obs_flat: np.ndarray) -> np.ndarray:
        """Normalized observation vector (scan scaled into [0, 1]) used as the
        embedding input and the reconstruction target."""
        obs_flat = np.asarray(obs_flat, dtype=np.float64)
        if obs_flat.shape[-1] != self.cfg.obs_dim:
            raise DimensionError(
                f"observation length {obs_flat.shape[-1]} != expected {self.cfg.obs_dim}")
        out = obs_flat.copy()
        ps = self.cfg.proprio_size
        out[..., ps:] = np.clip(out[..., ps:], 0.0, self.cfg.scan_max_range) \
            / self.cfg.scan_max_range
        return out

    def embed(self, obs_flat) -> Tensor:
        """Deterministic observation embedding from a (B, obs_dim) batch."""
        target = self.obs_target(np.atleast_2d(np.asarray(obs_flat, dtype=np.float64)))
        ps = self.cfg.proprio_size
        proprio = Tensor(target[:, :ps])
        scan = Tensor(target[:, ps:].reshape(target.shape[0], 1, self.cfg.scan_rays))
        pfeat = self.proprio_enc(proprio)
        sfeat = self.scan_conv2(self.scan_conv1(scan))
        sfeat = self.scan_proj(ad.reshape(sfeat, (target.shape[0], -1)))
        return self.embed_out(ad.concat([pfeat, sfeat], axis=-1))

    # -- state heads -------------------------------------------------------------

    def _assemble_x(self, raw: Tensor, x_prev: np.ndarray) -> Tensor:
        """Positions are predicted as odometric deltas from the previous state;
        the remaining entries are direct head outputs."""
        x_prev = np.atleast_2d(x_prev)
        px = raw[:, IDX_PX:IDX_PX + 1] + x_prev[:, IDX_PX:IDX_PX + 1]
        pz = raw[:, IDX_PZ:IDX_PZ + 1] + x_prev[:, IDX_PZ:IDX_PZ + 1]
        return ad.concat([px, pz, raw[:, IDX_PITCH:]], axis=-1)

    def posterior_x(self, e: Tensor, h: Tensor, x_prev: np.ndarray) -> Tensor:
        return self._assemble_x(self.post_x(ad.concat([e, h], axis=-1)), x_prev)

    def posterior_update(self, e, h_next, x_prev, rng=None, noise=None):
        """Encoder branch: sample z from the posterior, estimate x from (e, h)."""
        self.encoder_calls += 1
        e = ad.as_tensor(e)
        h_next = ad.as_tensor(h_next)
        dist = self.post_z(ad.concat([e, h_next], axis=-1))
        if noise is None and rng is None:
            noise = np.zeros(dist.mean.data.shape)
        z = dist.sample(rng=rng, noise=noise)
        x = self.posterior_x(e, h_next, x_prev)
        return z, dist, x

    def prior_update(self, x_prev, h_next, rng=None, noise=None,
                     floor_now=None, floor_next=None):
        """Dynamics branch: sample z from the prior; advance x by the learned
        wrench through the semi-implicit integrator with contact mode.

        floor_now/floor_next override the terrain lookup (used in training
        where the episode's floor heights are stored with the batch).
        """
        self.dynamics_calls += 1
        h_next = ad.as_tensor(h_next)
        dist = self.prior_z(h_next)
        if noise is None and rng is None:
            noise = np.zeros(dist.mean.data.shape)
        z = dist.sample(rng=rng, noise=noise)
        wrench = self.wrench(h_next)
        x = self.integrate(np.atleast_2d(x_prev), wrench, floor_now, floor_next)
        return z, dist, x

    def integrate(self, x_prev: np.ndarray, wrench: Tensor,
                  floor_now=None, floor_next=None) -> Tensor:
        """Differentiable semi-implicit Euler step of the kinodynamic state
        under a predicted wrench, with support contact canceling gravity and
        planting the foot."""
        cfg, body = self.cfg, self.body
        dt = cfg.dt_model
        g = body.gravity if cfg.gravity_on else 0.0
        x_prev = np.atleast_2d(np.asarray(x_prev, dtype=np.float64))
        n = x_prev.shape[0]

        if floor_now is None and self.floor_fn is not None:
            floor_now = np.asarray(self.floor_fn(x_prev[:, IDX_PX]))
        has_contact = floor_now is not None
        if has_contact:
            contact = foot_height(x_prev, body) <= np.asarray(floor_now) + body.contact_tol
        else:
            contact = np.zeros(n, dtype=bool)

        fx = wrench[:, 0]
        fz = wrench[:, 1]
        tau = wrench[:, 2]
        drate = wrench[:, 3]

        d2 = ad.clip(Tensor(x_prev[:, IDX_OFFSET]) + dt * drate,
                     body.offset_min, body.offset_max)
        om2 = Tensor(x_prev[:, IDX_OMEGA]) + (dt / body.inertia) * tau
        th2 = Tensor(x_prev[:, IDX_PITCH]) + dt * om2
        vx2 = Tensor(x_prev[:, IDX_VX]) + (dt / body.mass) * fx
        px2 = Tensor(x_prev[:, IDX_PX]) + dt * vx2

        vz_air = Tensor(x_prev[:, IDX_VZ]) + dt * ((1.0 / body.mass) * fz - g)
        vz_contact = ad.relu(Tensor(x_prev[:, IDX_VZ])) + dt * ad.relu(
            (1.0 / body.mass) * fz - g)
        vz2 = ad.where(contact, vz_contact, vz_air)
        pz_air = Tensor(x_prev[:, IDX_PZ]) + dt * vz2

        if has_contact:
            if floor_next is not None:
                fnext = np.asarray(floor_next, dtype=np.float64)
            elif self.floor_fn is not None:
                fnext = np.asarray(self.floor_fn(px2.data))
            else:
                fnext = np.asarray(floor_now, dtype=np.float64)
            pz_planted = Tensor(fnext + body.leg_length) + d2
            planted = contact & (vz2.data <= 0.0)
            pz2 = ad.where(planted, pz_planted, pz_air)
        else:
            pz2 = pz_air

        cols = [px2, pz2, th2, vx2, vz2, om2, d2]
        return ad.concat([ad.reshape(c, (n, 1)) for c in cols], axis=-1)

    # -- distribution heads -------------------------------------------------------

    def _y_input(self, x, h, z) -> Tensor:
        feats = x_features(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        parts = [Tensor(feats), ad.as_tensor(h), ad.as_tensor(z)]
        return ad.concat(parts, axis=-1)

    def predict_reward(self, x, h, z, action) -> DiagonalGaussian:
        a = ad.as_tensor(action)
        return self.reward_head(ad.concat([self._y_input(x, h, z), a], axis=-1))

    def predict_value(self, x, h, z) -> DiagonalGaussian:
        return self.value_head(self._y_input(x, h, z))

    def decode(self, x, h, z) -> DiagonalGaussian:
        return self.decoder(self._y_input(x, h, z))

    def internal_policy(self, x, h, z) -> DiagonalGaussian:
        return self.policy_head(self._y_input(x, h, z))

    # -- imagination ---------------------------------------------------------------

    def rollout_batch(self, x, h, z, e, horizon: int, rng=None, action_fn=None,
                      posterior_first: bool = True):
        """Core rollout loop over a batch of model states (inference only).

        action_fn(x, h, z, k) -> (action, mean, std) overrides the internal
        policy (the planner's warm start drives this with the expert actor).
        rng None makes every draw deterministic (means, zero latent noise).

        Returns (states (B,H,7), actions (B,H,m), means, stds, x1, h1, z1)
        where (x1, h1, z1) is the batch state after the first step.
        """
        if horizon < 1:
            raise ValueError(f"imagination horizon must be >= 1, got {horizon}")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        bsz = x.shape[0]
        m = self.cfg.action_dim
        states = np.zeros((bsz, horizon, X_DIM))
        actions = np.zeros((bsz, horizon, m))
        means = np.zeros((bsz, horizon, m))
        stds = np.zeros((bsz, horizon, m))
        first = None

        with no_grad():
            e_t = ad.as_tensor(e) if e is not None else None
            for k in range(horizon):
                if action_fn is not None:
                    a, mu, sd = action_fn(x, h, z, k)
                else:
                    dist = self.internal_policy(x, h, z)
                    a_t = dist.sample(rng=rng) if rng is not None else dist.mean
                    a, mu, sd = a_t.data, dist.mean.data, dist.std
                a = np.clip(a, -1.0, 1.0)
                gin = np.concatenate([x_features(x), z, a], axis=-1)
                h_next = self.gru(Tensor(gin), Tensor(h)).data
                if k == 0 and posterior_first:
                    zt, _, xt = self.posterior_update(e_t, h_next, x, rng=rng)
                else:
                    zt, _, xt = self.prior_update(x, h_next, rng=rng)
                x, h, z = xt.data, h_next, zt.data
                states[:, k] = x
                actions[:, k] = a
                means[:, k] = mu
                stds[:, k] = sd
                if k == 0:
                    first = (x.copy(), h.copy(), z.copy())
        return states, actions, means, stds, first

    def imagine(self, y0: ModelState, e, horizon: int,
                rng: np.random.Generator | None = None
                ) -> tuple[ImaginedRollout, ModelState]:
        """Roll the model forward: the first step conditions on the observation
        embedding (encoder), later steps use the dynamics prior; actions come
        from the internal policy. Returns the rollout and the post-posterior
        model state."""
        states, actions, _, _, first = self.rollout_batch(
            y0.x[None], y0.h[None], y0.z[None], np.atleast_2d(e), horizon, rng=rng)
        x1, h1, z1 = first
        y1 = ModelState(x1[0], h1[0], z1[0])
        return ImaginedRollout(states[0], actions[0], y1), y1

    # -- training loss ----------------------------------------------------------------

    def model_loss(self, batch: dict, rng: np.random.Generator,
                   beta: float | None = None):
        """Combined supervised loss over length-L sequences (sum over time,
        mean over the batch). Returns (scalar Tensor, per-term float dict)."""
        for name in _BATCH_FIELDS:
            if name not in batch:
                raise DataError(f"batch missing field '{name}'")
        obs = np.asarray(batch["obs"], dtype=np.float64)
        action = np.asarray(batch["action"], dtype=np.float64)
        reward = np.asarray(batch["reward"], dtype=np.float64)
        value_t = np.asarray(batch["value_target"], dtype=np.float64)
        x_sim = np.asarray(batch["x"], dtype=np.float64)
        x_next_sim = np.asarray(batch["x_next"], dtype=np.float64)
        x_prev0 = np.asarray(batch["x_prev"], dtype=np.float64)
        floor_now = np.asarray(batch["floor_now"], dtype=np.float64)
        floor_next = np.asarray(batch["floor_next"], dtype=np.float64)
        bsz, L = reward.shape
        beta = self.cfg.beta_kl if beta is None else beta

        h = Tensor(np.zeros((bsz, self.cfg.d_h)))
        totals = {k: None for k in LOSS_TERMS}

        def accumulate(key, value):
            totals[key] = value if totals[key] is None else totals[key] + value

        obs_targets = self.obs_target(obs)
        for t in range(L):
            e_t = self.embed(obs[:, t])
            post = self.post_z(ad.concat([e_t, h], axis=-1))
            prior = self.prior_z(h)
            z_t = post.sample(noise=rng.standard_normal(post.mean.data.shape))
            a_t = action[:, t]
            y_t = ad.concat([Tensor(x_features(x_sim[:, t])), h, z_t], axis=-1)

            accumulate("reward_nll", -ad.mean(
                self.reward_head(ad.concat([y_t, Tensor(a_t)], axis=-1))
                .log_prob(reward[:, t, None])))
            accumulate("value_nll", -ad.mean(
                self.value_head(y_t).log_prob(value_t[:, t, None])))
            accumulate("latent_kl", ad.mean(post.kl(prior)))
            accumulate("action_cloning", -ad.mean(self.policy_head(y_t).log_prob(a_t)))
            accumulate("reconstruction", -ad.mean(
                self.decoder(y_t).log_prob(obs_targets[:, t])))

            x_prev_t = x_prev0 if t == 0 else x_sim[:, t - 1]
            x_hat = self.posterior_x(e_t, h, x_prev_t)
            com = ad.mean(ad.sum_(ad.square(x_hat - x_sim[:, t]), axis=-1))

            h_next = self.gru(
                Tensor(np.concatenate([x_features(x_sim[:, t]), z_t.data, a_t], axis=-1)),
                h)
            # the prior state prediction conditions on the post-action memory
            _, _, x_hat_next = self.prior_update(
                x_sim[:, t], h_next, noise=np.zeros((bsz, self.cfg.d_z)),
                floor_now=floor_now[:, t], floor_next=floor_next[:, t])
            com = com + ad.mean(ad.sum_(ad.square(x_hat_next - x_next_sim[:, t]), axis=-1))
            accumulate("com", com)
            h = h_next

        breakdown = {}
        loss = None
        for key in LOSS_TERMS:
            term = totals[key]
            value = float(term.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite model loss term '{key}'")
            breakdown[key] = value
            weighted = term * beta if key == "latent_kl" else term
            loss = weighted if loss is None else loss + weighted
        breakdown["total"] = float(loss.data)
        return loss, breakdown

    # -- metadata ------------------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {"model_config": asdict(self.cfg), "body": asdict(self.body),
                "config_hash": self.cfg.config_hash()}

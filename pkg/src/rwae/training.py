"""Loss assembly, the alternating optimization loop and checkpoints.

One outer step of training consists of ``L`` inner steps, each of which
draws a fresh batch and updates the critic (feature map or discriminator)
on its own objective and then the encoders on the full loss, followed by a
single update of the decoder and the motion prior on the full loss.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor

from .data import SequenceDataset, batch_indices, make_batch
from .divergences import KernelSpec, gan_regularizer_losses, mmd2_unbiased_stacked, scaled_mmd_penalty
from .errors import FormatError, InvalidArgumentError, NumericError
from .model import RWAE, Critic, _kl_to_uniform, gumbel_softmax_sample, sample_gumbel

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RWAECKPT\n"
CKPT_VERSION = 1
PROB_EPS = 1e-7


@dataclass
class TrainConfig:
    mode: str = "mmd"  # mmd | gan
    beta1: float = 5.0
    beta2: float = 20.0
    beta3: float = 0.0
    lam: float = 10.0
    inner_steps: int = 5
    tau: float = 0.5
    categorical_kl: str = "instance"  # instance | aggregate
    recon: str = "bce"  # bce | l2
    lr_decoder: float = 5e-4
    lr_encoder: float = 1e-4
    lr_critic: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    epochs: int = 100
    batch_size: int = 64
    milestones: tuple[int, ...] = (50, 80)
    decay_factors: tuple[float, ...] = (2.0, 5.0)
    d_c: int = 16
    d_m: int = 4
    n_actions: int = 0
    bandwidths: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)
    seed: int = 0
    spectral_param: bool = False
    arch: str = "mlp"
    feature_dim: int = 64
    hidden_dim: int = 64
    mlp_dim: int = 128
    critic_hidden: tuple[int, ...] = (64, 64)

    def validate(self) -> None:
        if self.mode not in ("mmd", "gan"):
            raise InvalidArgumentError(f"mode must be 'mmd' or 'gan', got {self.mode!r}")
        if self.recon not in ("bce", "l2"):
            raise InvalidArgumentError(f"recon must be 'bce' or 'l2', got {self.recon!r}")
        for name in ("beta1", "beta2", "beta3", "lam"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        if self.inner_steps < 1:
            raise InvalidArgumentError("inner_steps (L) must be >= 1")
        if not self.tau > 0:
            raise InvalidArgumentError("tau must be > 0")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch_size must be >= 2")
        if self.beta3 > 0 and self.n_actions < 2:
            raise InvalidArgumentError("weak supervision (beta3 > 0) needs n_actions >= 2")
        if len(self.milestones) != len(self.decay_factors):
            raise InvalidArgumentError("milestones and decay_factors must have equal length")
        if self.categorical_kl not in ("instance", "aggregate"):
            raise InvalidArgumentError("categorical_kl must be 'instance' or 'aggregate'")
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be >= 0")
        KernelSpec(self.bandwidths)

    @property
    def weak_supervision(self) -> bool:
        return self.n_actions > 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise InvalidArgumentError(f"unknown TrainConfig keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


# Penalty weights, reconstruction loss and learning rates per dataset style.
PRESETS: dict[str, dict] = {
    "smmnist-like": dict(
        mode="mmd", beta1=5.0, beta2=20.0, beta3=0.0, recon="bce", inner_steps=5,
        lr_decoder=5e-4, lr_encoder=1e-4, lr_critic=1e-4,
    ),
    "sprites-like": dict(
        mode="mmd", beta1=10.0, beta2=60.0, beta3=0.0, recon="l2", inner_steps=5,
        lr_decoder=3e-4, lr_encoder=1e-4, lr_critic=1e-4,
    ),
    "mug-mmd": dict(
        mode="mmd", beta1=10.0, beta2=50.0, beta3=50.0, recon="l2", inner_steps=5,
        lr_decoder=5e-4, lr_encoder=2e-4, lr_critic=2e-4,
    ),
    "mug-gan": dict(
        mode="gan", beta1=5.0, beta2=60.0, beta3=50.0, recon="l2", inner_steps=5,
        lr_decoder=5e-4, lr_encoder=2e-4, lr_critic=2e-4,
    ),
}


# Small networks train on CPU within minutes only with larger steps than the
# full-size presets use.
DESK_OVERRIDES: dict = dict(lr_decoder=2e-3, lr_encoder=1e-3, lr_critic=1e-3, epochs=30)


def preset_config(name: str, desk: bool = False, **overrides) -> TrainConfig:
    """Preset values, then the desk-scale adjustments (if ``desk``), then ``overrides``."""
    if name not in PRESETS:
        raise InvalidArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    if desk:
        values.update(DESK_OVERRIDES)
    values.update(overrides)
    return TrainConfig(**values)


def lr_schedule(epoch: int, base_lr: float, milestones=(50, 80), factors=(2.0, 5.0)) -> float:
    """Step decay: divide by each factor once its milestone epoch is reached (compounding)."""
    if epoch < 0:
        raise InvalidArgumentError("epoch must be >= 0")
    divisor = 1.0
    for m, f in zip(milestones, factors):
        if epoch >= m:
            divisor *= f
    return base_lr / divisor


# losses ------------------------------------------------------------------------


def recon_cost(x: Tensor, x_hat: Tensor, kind: str = "l2") -> Tensor:
    """Per-item reconstruction cost summed over all non-batch axes.

    For a single frame (no batch axis) pass it with a leading axis of 1 or
    use the returned tensor's sum.
    """
    x, x_hat = torch.as_tensor(x), torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if kind == "l2":
        return (x - x_hat).pow(2).sum()
    if kind == "bce":
        p = x_hat.clamp(PROB_EPS, 1.0 - PROB_EPS)
        return -(x * torch.log(p) + (1.0 - x) * torch.log1p(-p)).sum()
    raise InvalidArgumentError(f"unknown reconstruction kind {kind!r}")


@dataclass
class LossBreakdown:
    recon: Tensor
    content_penalty: Tensor
    motion_penalty: Tensor
    categorical_kl: Tensor
    total: Tensor

    def to_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in dataclasses.fields(self)}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.to_dict().values())


def sample_latents(model: RWAE, frames: Tensor, cfg: TrainConfig, generator: torch.Generator) -> dict:
    """Posterior samples, their prior counterparts and (optionally) the relaxed action."""
    b = frames.shape[0]
    if b < 2:
        raise InvalidArgumentError(f"batch size must be >= 2, got {b}")
    enc = model.encode(frames, generator)
    out = dict(enc)
    out["z_c_prior"] = torch.randn(enc["z_c"].shape, generator=generator, dtype=frames.dtype)
    a_tilde = None
    if model.n_actions:
        probs = model.infer_action(enc["z_m"])
        g = sample_gumbel(probs.shape, generator, dtype=frames.dtype)
        a_tilde = gumbel_softmax_sample(torch.log(probs.clamp_min(1e-20)), cfg.tau, g)
        out["action_probs"] = probs
    out["a"] = a_tilde
    out["z_m_prior"], _ = model.teacher_forced_prior(enc["z_m"], generator, a_tilde)
    return out


def content_penalty(critic: Critic, z_post: Tensor, z_prior: Tensor, cfg: TrainConfig) -> Tensor:
    """Encoder-side content penalty: scaled MMD (mmd) or non-saturating GAN loss (gan)."""
    if cfg.mode == "mmd":
        return scaled_mmd_penalty(z_post, z_prior, critic, create_graph=False)
    zeros = torch.zeros(z_post.shape[0], dtype=z_post.dtype)
    _, enc_loss = gan_regularizer_losses(z_prior, z_post, critic, 0.0, zeros)
    return enc_loss


def critic_objective(
    critic: Critic, z_post: Tensor, z_prior: Tensor, cfg: TrainConfig, generator: torch.Generator
) -> Tensor:
    """Loss minimized by the critic. The posterior codes are detached here."""
    z_post = z_post.detach()
    if cfg.mode == "mmd":
        return -scaled_mmd_penalty(z_post, z_prior, critic, create_graph=True)
    alpha = torch.rand(z_post.shape[0], generator=generator, dtype=z_post.dtype)
    disc_loss, _ = gan_regularizer_losses(z_prior, z_post, critic, cfg.lam, alpha)
    return disc_loss


def assemble_loss(model: RWAE, critic: Critic, frames: Tensor, lat: dict, cfg: TrainConfig) -> LossBreakdown:
    # one static code per sequence, reused at every decoding step
    x_hat = model.decode(lat["z_c"], lat["z_m"], lat["a"])
    recon = recon_cost(frames, x_hat, cfg.recon) / frames.shape[0]

    zero = frames.new_zeros(())
    c_pen = content_penalty(critic, lat["z_c"], lat["z_c_prior"], cfg) if cfg.beta1 > 0 else zero
    if cfg.beta2 > 0:
        per_step = mmd2_unbiased_stacked(
            lat["z_m"].transpose(0, 1), lat["z_m_prior"].transpose(0, 1), KernelSpec(cfg.bandwidths)
        )
        m_pen = per_step.sum()
    else:
        m_pen = zero
    if cfg.beta3 > 0 and "action_probs" in lat:
        probs = lat["action_probs"]
        if cfg.categorical_kl == "aggregate":
            cat_kl = _kl_to_uniform(probs.mean(0))
        else:
            cat_kl = _kl_to_uniform(probs).mean()
    else:
        cat_kl = zero
    total = recon + cfg.beta1 * c_pen + cfg.beta2 * m_pen + cfg.beta3 * cat_kl
    return LossBreakdown(recon, c_pen, m_pen, cat_kl, total)


def rwae_loss(
    model: RWAE, critic: Critic, frames: Tensor, cfg: TrainConfig, generator: torch.Generator
) -> LossBreakdown:
    """Full training loss on one batch of frames (B, T, C, H, W)."""
    lat = sample_latents(model, frames, cfg, generator)
    return assemble_loss(model, critic, frames, lat, cfg)


def build_model(cfg: TrainConfig, frame_shape, dtype=torch.float32) -> tuple[RWAE, Critic]:
    """Model and critic, initialized deterministically from ``cfg.seed``."""
    torch.manual_seed(cfg.seed)
    model = RWAE(
        frame_shape,
        d_c=cfg.d_c,
        d_m=cfg.d_m,
        n_actions=cfg.n_actions,
        feature_dim=cfg.feature_dim,
        hidden_dim=cfg.hidden_dim,
        mlp_dim=cfg.mlp_dim,
        arch=cfg.arch,
    )
    kind = "feature_map" if cfg.mode == "mmd" else "discriminator"
    critic = Critic(cfg.d_c, cfg.critic_hidden, kind, spectral=cfg.spectral_param)
    return model.to(dtype), critic.to(dtype)


# checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    frame_shape: tuple[int, int, int]
    model_state: dict[str, Tensor]
    critic_state: dict[str, Tensor]
    optimizer_states: dict[str, dict]
    epoch: int = 0
    step: int = 0
    counters: dict[str, int] = field(default_factory=dict)
    rng_state: bytes = b""
    version: int = CKPT_VERSION

    def build(self) -> tuple[RWAE, Critic]:
        dtype = next(iter(self.model_state.values())).dtype
        model, critic = build_model(self.config, self.frame_shape, dtype)
        model.load_state_dict(self.model_state)
        critic.load_state_dict(self.critic_state)
        return model, critic


def _np_bytes(t: Tensor) -> tuple[str, list[int], bytes]:
    arr = t.detach().cpu().numpy()
    le = arr.dtype.newbyteorder("<")
    arr = np.ascontiguousarray(arr, dtype=le)
    return le.str, list(arr.shape), arr.tobytes()


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Single file: magic, header length, JSON header, raw little-endian arrays."""
    payload = io.BytesIO()
    arrays = []

    def put(name: str, t: Tensor):
        dtype, shape, raw = _np_bytes(t)
        arrays.append({"name": name, "dtype": dtype, "shape": shape, "offset": payload.tell(), "nbytes": len(raw)})
        payload.write(raw)

    for k, v in ck.model_state.items():
        put(f"model/{k}", v)
    for k, v in ck.critic_state.items():
        put(f"critic/{k}", v)
    opt_meta = {}
    for opt_name, sd in ck.optimizer_states.items():
        opt_meta[opt_name] = {"param_groups": sd["param_groups"]}
        for idx, st in sd["state"].items():
            for key, val in st.items():
                put(f"opt/{opt_name}/{idx}/{key}", torch.as_tensor(val))
    rng_offset = payload.tell()
    payload.write(ck.rng_state)
    body = payload.getvalue()

    header = {
        "format_version": ck.version,
        "config": ck.config.to_dict(),
        "frame_shape": list(ck.frame_shape),
        "epoch": ck.epoch,
        "step": ck.step,
        "counters": ck.counters,
        "arrays": arrays,
        "optimizers": opt_meta,
        "rng": {"offset": rng_offset, "nbytes": len(ck.rng_state)},
        "payload_bytes": len(body),
        "payload_sha256": hashlib.sha256(body).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(CKPT_MAGIC + str(len(head)).encode("ascii") + b"\n" + head + body)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise FormatError("not a checkpoint file (bad magic)")
    pos = len(CKPT_MAGIC)
    nl = raw.find(b"\n", pos)
    if nl < 0:
        raise FormatError("checkpoint header truncated")
    try:
        head_len = int(raw[pos:nl])
        header = json.loads(raw[nl + 1 : nl + 1 + head_len])
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(
            f"unsupported checkpoint format version {header.get('format_version')} (expected {CKPT_VERSION})"
        )
    body = raw[nl + 1 + head_len :]
    if len(body) != header["payload_bytes"]:
        raise FormatError(f"checkpoint payload is {len(body)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise FormatError("checkpoint payload checksum mismatch")

    model_state, critic_state = {}, {}
    opt_states = {name: {"state": {}, "param_groups": meta["param_groups"]} for name, meta in header["optimizers"].items()}
    for a in header["arrays"]:
        arr = np.frombuffer(body, dtype=np.dtype(a["dtype"]), count=int(np.prod(a["shape"], dtype=np.int64)), offset=a["offset"])
        t = torch.from_numpy(arr.reshape(a["shape"]).copy())
        scope, _, rest = a["name"].partition("/")
        if scope == "model":
            model_state[rest] = t
        elif scope == "critic":
            critic_state[rest] = t
        elif scope == "opt":
            opt_name, idx, key = rest.split("/")
            opt_states[opt_name]["state"].setdefault(int(idx), {})[key] = t
        else:
            raise FormatError(f"unknown array scope in {a['name']!r}")
    rng = header["rng"]
    try:
        config = TrainConfig.from_dict(header["config"])
    except (InvalidArgumentError, TypeError) as exc:
        raise FormatError(f"checkpoint config invalid: {exc}") from None
    return Checkpoint(
        config=config,
        frame_shape=tuple(header["frame_shape"]),
        model_state=model_state,
        critic_state=critic_state,
        optimizer_states=opt_states,
        epoch=header["epoch"],
        step=header["step"],
        counters=header["counters"],
        rng_state=body[rng["offset"] : rng["offset"] + rng["nbytes"]],
        version=header["format_version"],
    )


# training loop -------------------------------------------------------------------


TRACE_FIELDS = (
    "step", "epoch", "recon", "content_penalty", "motion_penalty", "categorical_kl", "total",
    "lr_decoder", "lr_encoder", "lr_critic",
)


class Trainer:
    """Stateful driver of the alternating optimization.

    Args:
        dataset: Training sequences.
        cfg: Hyperparameters.
        dtype: Parameter dtype (float64 is handy for gradient checks).
        check_finite: Assert every parameter is finite after every update.
    """

    def __init__(self, dataset: SequenceDataset, cfg: TrainConfig, dtype=torch.float32, check_finite: bool = False):
        cfg.validate()
        if len(dataset) < cfg.batch_size:
            raise InvalidArgumentError(f"dataset has {len(dataset)} sequences, fewer than one batch")
        self.dataset = dataset
        self.cfg = cfg
        self.dtype = dtype
        self.check_finite = check_finite
        self.model, self.critic = build_model(cfg, dataset.frame_shape, dtype)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.optimizers = {
            "encoder": torch.optim.Adam(self.model.encoder_parameters(), lr=cfg.lr_encoder, betas=betas),
            "decoder": torch.optim.Adam(
                self.model.decoder_parameters() + self.model.prior_parameters(), lr=cfg.lr_decoder, betas=betas
            ),
            "critic": torch.optim.Adam(self.critic.parameters(), lr=cfg.lr_critic, betas=betas),
        }
        self.base_lrs = {"encoder": cfg.lr_encoder, "decoder": cfg.lr_decoder, "critic": cfg.lr_critic}
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.epoch = 0
        self.step = 0
        self.counters = {"critic": 0, "encoder": 0, "decoder": 0}
        self.trace: list[dict] = []

    # persistence ------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        clone = lambda sd: {k: v.detach().clone() for k, v in sd.items()}
        opt_states = {}
        for name, opt in self.optimizers.items():
            sd = opt.state_dict()
            opt_states[name] = {
                "state": {i: {k: torch.as_tensor(v).clone() for k, v in st.items()} for i, st in sd["state"].items()},
                "param_groups": json.loads(json.dumps(sd["param_groups"])),
            }
        return Checkpoint(
            config=self.cfg,
            frame_shape=tuple(self.dataset.frame_shape),
            model_state=clone(self.model.state_dict()),
            critic_state=clone(self.critic.state_dict()),
            optimizer_states=opt_states,
            epoch=self.epoch,
            step=self.step,
            counters=dict(self.counters),
            rng_state=bytes(self.generator.get_state().numpy().tobytes()),
        )

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, dataset: SequenceDataset, check_finite: bool = False) -> "Trainer":
        if tuple(dataset.frame_shape) != tuple(ck.frame_shape):
            raise InvalidArgumentError("dataset frame shape does not match the checkpoint")
        dtype = next(iter(ck.model_state.values())).dtype
        tr = cls(dataset, ck.config, dtype=dtype, check_finite=check_finite)
        tr.model.load_state_dict(ck.model_state)
        tr.critic.load_state_dict(ck.critic_state)
        for name, opt in tr.optimizers.items():
            opt.load_state_dict(ck.optimizer_states[name])
        tr.generator.set_state(torch.frombuffer(bytearray(ck.rng_state), dtype=torch.uint8))
        tr.epoch, tr.step = ck.epoch, ck.step
        tr.counters = dict(ck.counters)
        return tr

    # steps ------------------------------------------------------------------

    def _frames(self, idx) -> Tensor:
        return make_batch(self.dataset, idx, self.dtype).frames

    def _assert_finite(self, params, what: str):
        if self.check_finite:
            for p in params:
                if not torch.isfinite(p).all():
                    raise NumericError(f"non-finite {what} parameter after update at step {self.step}")

    def _guard(self, loss: LossBreakdown, where: str):
        if not loss.is_finite():
            raise NumericError(f"non-finite loss in {where} at step {self.step}, epoch {self.epoch}: {loss.to_dict()}")

    def inner_step(self, frames: Tensor) -> LossBreakdown:
        lat = sample_latents(self.model, frames, self.cfg, self.generator)

        opt_c = self.optimizers["critic"]
        opt_c.zero_grad()
        c_loss = critic_objective(self.critic, lat["z_c"], lat["z_c_prior"], self.cfg, self.generator)
        if not torch.isfinite(c_loss):
            raise NumericError(f"non-finite critic loss at step {self.step}: {float(c_loss)}")
        c_loss.backward()
        opt_c.step()
        self.counters["critic"] += 1
        self._assert_finite(self.critic.parameters(), "critic")

        opt_e = self.optimizers["encoder"]
        opt_e.zero_grad()
        loss = assemble_loss(self.model, self.critic, frames, lat, self.cfg)
        self._guard(loss, "encoder update")
        loss.total.backward()
        opt_e.step()
        self.counters["encoder"] += 1
        self._assert_finite(self.model.encoder_parameters(), "encoder")
        return loss

    def outer_step(self, frames: Tensor) -> LossBreakdown:
        opt_d = self.optimizers["decoder"]
        opt_d.zero_grad()
        loss = rwae_loss(self.model, self.critic, frames, self.cfg, self.generator)
        self._guard(loss, "decoder/prior update")
        loss.total.backward()
        opt_d.step()
        self.counters["decoder"] += 1
        self._assert_finite(self.model.decoder_parameters() + self.model.prior_parameters(), "decoder/prior")
        return loss

    def _inner_stream(self):
        k = 0
        while True:
            for idx in batch_indices(len(self.dataset), self.cfg.batch_size, [self.cfg.seed, self.epoch, 1, k]):
                yield idx
            k += 1

    def set_learning_rates(self):
        cfg = self.cfg
        for name, opt in self.optimizers.items():
            lr = lr_schedule(self.epoch, self.base_lrs[name], cfg.milestones, cfg.decay_factors)
            for group in opt.param_groups:
                group["lr"] = lr

    def train_epoch(self, on_step: Optional[Callable[[dict], None]] = None, max_steps: Optional[int] = None) -> dict:
        """One pass of outer steps over the data; returns epoch means of the loss terms."""
        self.set_learning_rates()
        self.model.train()
        self.critic.train()
        inner = self._inner_stream()
        sums: dict[str, float] = {}
        count = 0
        for outer_idx in batch_indices(len(self.dataset), self.cfg.batch_size, [self.cfg.seed, self.epoch]):
            if max_steps is not None and count >= max_steps:
                break
            for _ in range(self.cfg.inner_steps):
                self.inner_step(self._frames(next(inner)))
            loss = self.outer_step(self._frames(outer_idx))
            self.step += 1
            rec = {"step": self.step, "epoch": self.epoch, **loss.to_dict()}
            for name, opt in self.optimizers.items():
                rec[f"lr_{name}"] = opt.param_groups[0]["lr"]
            self.trace.append(rec)
            if on_step:
                on_step(rec)
            for k, v in loss.to_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        self.epoch += 1
        return {k: v / max(count, 1) for k, v in sums.items()}

    def fit(
        self,
        epochs: Optional[int] = None,
        trace_path=None,
        checkpoint_dir=None,
        checkpoint_every: int = 0,
        on_epoch: Optional[Callable[[int, dict], None]] = None,
    ) -> list[dict]:
        """Train until ``epochs`` epochs are completed in total (default ``cfg.epochs``)."""
        target = self.cfg.epochs if epochs is None else epochs
        trace_file = None
        if trace_path is not None:
            new = not Path(trace_path).exists()
            trace_file = open(trace_path, "a", encoding="utf-8")
            if new:
                trace_file.write("\t".join(TRACE_FIELDS) + "\n")

        def write(rec):
            if trace_file:
                trace_file.write("\t".join(repr(rec[k]) for k in TRACE_FIELDS) + "\n")
                trace_file.flush()

        history = []
        try:
            while self.epoch < target:
                means = self.train_epoch(on_step=write)
                history.append(means)
                log.info("epoch %d %s", self.epoch, {k: round(v, 4) for k, v in means.items()})
                if on_epoch:
                    on_epoch(self.epoch, means)
                if checkpoint_dir and checkpoint_every and self.epoch % checkpoint_every == 0:
                    save_checkpoint(self.checkpoint(), Path(checkpoint_dir) / f"epoch_{self.epoch:04d}.ckpt")
        finally:
            if trace_file:
                trace_file.close()
        return history


def train_rwae(dataset: SequenceDataset, cfg: TrainConfig, **fit_kwargs) -> Checkpoint:
    """Train from scratch for ``cfg.epochs`` epochs and return the final checkpoint."""
    trainer = Trainer(dataset, cfg)
    trainer.fit(**fit_kwargs)
    return trainer.checkpoint()

"""Recurrent adversarial reconstruction: per-view 3D-conv encoders, LSTM
fusion over a variable number of views, transposed-conv decoder with an
up-scaling head, and a six-layer discriminator.

The generator loss is voxelwise weighted BCE plus lambda_adv times the
absolute discriminator feature-mean gap; the discriminator trains on plain
real/fake BCE.
"""
from __future__ import annotations

import csv
import json
from collections import namedtuple
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, LstmState, Tensor
from .voxel import VoxelGrid


@dataclass
class RganConfig:
    grid_dim: int = 32
    encoder_channels: tuple = (8, 16, 32, 64, 64)
    latent: int = 256
    lstm_hidden: int = 256
    decoder_channels: tuple = (64, 64, 32, 16, 8)
    upscale_layers: int = 2
    disc_channels: tuple = (8, 16, 32, 64, 64, 1)
    lambda_adv: float = 0.1
    lr: float = 1e-3
    batch: int = 5
    epochs: int = 200
    seed: int = 0
    n_max: int = 8
    pos_weight_max: float = 50.0
    checkpoint_every: int = 50
    stop_iou: float = 0.0  # 0 disables early stopping

    def __post_init__(self):
        m = self.grid_dim
        if m < 8 or (m & (m - 1)) != 0:
            raise ValueError(f"grid_dim must be a power of two >= 8, got {m}")
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        self.disc_channels = tuple(self.disc_channels)
        if len(self.encoder_channels) != 5 or len(self.decoder_channels) != 5:
            raise ValueError("encoder/decoder need exactly 5 channel counts")
        if len(self.disc_channels) != 6:
            raise ValueError("discriminator needs exactly 6 channel counts")
        if self.upscale_layers != 2:
            raise ValueError("the up-scaling head has exactly 2 layers")
        if min(self.encoder_channels + self.decoder_channels + self.disc_channels) < 1:
            raise ValueError("all channel counts must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_channels", "decoder_channels", "disc_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RganConfig":
        return cls(**d)


def _conv_plan(m: int) -> tuple[list[tuple[int, int, int]], int]:
    """Five (kernel, stride, padding) stages from m^3 down to d0^3.

    As many stride-2 k=4 p=1 halvings as m allows (up to five), then 1x1x1
    channel-mixing stages (those run at spatial size 1, where any larger
    kernel would mostly see padding); d0 = m >> halvings.
    """
    halvings = min(5, m.bit_length() - 1)
    plan = [(4, 2, 1)] * halvings + [(1, 1, 0)] * (5 - halvings)
    return plan, m >> halvings


TrainLosses = namedtuple("TrainLosses", "gen_recon gen_adv dis gen_total")


class GeneratorModel:
    """Encoder (5 convs + 2 linears), LSTM fusion cell, decoder (linear +
    5 transposed convs + 2-layer up-scaling head ending in sigmoid)."""

    def __init__(self, cfg: RganConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.plan, self.d0 = _conv_plan(cfg.grid_dim)
        self.params: dict[str, Tensor] = {}
        p = self.params
        c_in = 1
        for i, ((k, _, _), c_out) in enumerate(zip(self.plan, cfg.encoder_channels)):
            p[f"enc{i}.w"] = ad.he_uniform((c_out, c_in, k, k, k), c_in * k**3, rng)
            p[f"enc{i}.b"] = ad.zeros(c_out)
            c_in = c_out
        flat = cfg.encoder_channels[-1] * self.d0**3
        p["fc0.w"] = ad.he_uniform((cfg.latent, flat), flat, rng)
        p["fc0.b"] = ad.zeros(cfg.latent)
        p["fc1.w"] = ad.he_uniform((cfg.latent, cfg.latent), cfg.latent, rng)
        p["fc1.b"] = ad.zeros(cfg.latent)
        h = cfg.lstm_hidden
        for gate in ("i", "f", "o", "s"):
            p[f"lstm.W_{gate}"] = ad.plain_uniform((h, cfg.latent + h), cfg.latent + h, rng)
            p[f"lstm.b_{gate}"] = ad.zeros(h)
        p["lstm.b_f"].data += 1.0  # standard forget-gate bias
        dc0 = cfg.decoder_channels[0]
        p["dec_fc.w"] = ad.he_uniform((dc0 * self.d0**3, h), h, rng)
        p["dec_fc.b"] = ad.zeros(dc0 * self.d0**3)
        dec_plan = list(reversed(self.plan))
        c_in = dc0
        for i, ((k, _, _), c_out) in enumerate(zip(dec_plan, cfg.decoder_channels)):
            p[f"dec{i}.w"] = ad.he_uniform((c_in, c_out, k, k, k), c_in * k**3, rng)
            p[f"dec{i}.b"] = ad.zeros(c_out)
            c_in = c_out
        p["up0.w"] = ad.he_uniform((c_in, c_in, 3, 3, 3), c_in * 27, rng)
        p["up0.b"] = ad.zeros(c_in)
        p["up1.w"] = ad.he_uniform((1, c_in, 3, 3, 3), c_in * 27, rng)
        p["up1.b"] = ad.zeros(1)
        self._dec_plan = dec_plan

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def lstm_params(self) -> dict[str, Tensor]:
        return {k.split(".")[1]: v for k, v in self.params.items() if k.startswith("lstm.")}

    def encode(self, x) -> Tensor:
        """x: (B, 1, m, m, m) occupancy in [0, 1] -> (B, latent) features."""
        p = self.params
        for i, (k, s, pad) in enumerate(self.plan):
            x = ad.relu(ad.conv3d(x, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=s, padding=pad))
        b = x.data.shape[0]
        x = x.reshape((b, -1))
        x = ad.relu(ad.linear(x, p["fc0.w"], p["fc0.b"]))
        return ad.linear(x, p["fc1.w"], p["fc1.b"])

    def fuse(self, step_features: list[Tensor]) -> Tensor:
        """LSTM over per-view features, one view per time step, zero init."""
        b = step_features[0].data.shape[0]
        h = self.cfg.lstm_hidden
        state = LstmState(Tensor(np.zeros((b, h))), Tensor(np.zeros((b, h))))
        lstm = self.lstm_params()
        for feat in step_features:
            state = ad.lstm_cell(feat, state, lstm)
        return state.h

    def decode(self, latent) -> Tensor:
        """(B, hidden) -> (B, 1, m, m, m) occupancy probabilities in (0, 1)."""
        p = self.params
        b = latent.data.shape[0]
        x = ad.leaky_relu(ad.linear(latent, p["dec_fc.w"], p["dec_fc.b"]))
        x = x.reshape((b, self.cfg.decoder_channels[0], self.d0, self.d0, self.d0))
        for i, (k, s, pad) in enumerate(self._dec_plan):
            x = ad.leaky_relu(
                ad.conv3d_transpose(x, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=s, padding=pad)
            )
        x = ad.leaky_relu(ad.conv3d(x, p["up0.w"], p["up0.b"], stride=1, padding=1))
        return ad.sigmoid(ad.conv3d(x, p["up1.w"], p["up1.b"], stride=1, padding=1))

    def forward_views(self, views: np.ndarray) -> Tensor:
        """views: (B, n, m, m, m) float array -> (B, 1, m, m, m) probabilities."""
        b, n, m = views.shape[0], views.shape[1], views.shape[2]
        x = Tensor(views.reshape(b * n, 1, m, m, m))
        feats = self.encode(x).reshape((b, n, -1))
        steps = [feats[:, t, :] for t in range(n)]
        return self.decode(self.fuse(steps))


class DiscriminatorModel:
    """Six 3D conv layers; the first five ReLU, the last sigmoid. Exposes the
    flattened pre-final-layer feature map for the feature-mean gap."""

    def __init__(self, cfg: RganConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.plan, self.d0 = _conv_plan(cfg.grid_dim)
        self.params: dict[str, Tensor] = {}
        c_in = 1
        for i, ((k, _, _), c_out) in enumerate(zip(self.plan, cfg.disc_channels[:5])):
            self.params[f"conv{i}.w"] = ad.he_uniform((c_out, c_in, k, k, k), c_in * k**3, rng)
            self.params[f"conv{i}.b"] = ad.zeros(c_out)
            c_in = c_out
        k = self.d0
        self.params["conv5.w"] = ad.he_uniform(
            (cfg.disc_channels[5], c_in, k, k, k), c_in * k**3, rng
        )
        self.params["conv5.b"] = ad.zeros(cfg.disc_channels[5])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """x: (B, 1, m, m, m) in [0, 1] -> (scores (B,), features (B, K))."""
        p = self.params
        for i, (k, s, pad) in enumerate(self.plan):
            x = ad.relu(ad.conv3d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=s, padding=pad))
        b = x.data.shape[0]
        feats = x.reshape((b, -1))
        score = ad.sigmoid(ad.conv3d(x, p["conv5.w"], p["conv5.b"], stride=1, padding=0))
        return score.reshape((b,)), feats


@dataclass(frozen=True)
class ViewSequence:
    """Ordered views of one object, all voxelized in the same frame."""

    grids: tuple

    def __post_init__(self):
        grids = tuple(self.grids)
        if not grids:
            raise ValueError("a view sequence needs at least one view")
        first = grids[0]
        for g in grids[1:]:
            if not first.same_frame(g):
                raise ValueError("all views of a sequence must share one frame")
        object.__setattr__(self, "grids", grids)

    def __len__(self):
        return len(self.grids)

    def array(self) -> np.ndarray:
        """(n, m, m, m) float64 stack."""
        return np.stack([g.dense().astype(np.float64) for g in self.grids])


def _check_grid_dim(g: VoxelGrid, m: int):
    if g.dims != (m, m, m):
        raise ValueError(f"grid dims {g.dims} do not match model grid_dim {m}")


def encode_view(g: VoxelGrid, gen: GeneratorModel) -> np.ndarray:
    """Feature vector (length latent) for a single view grid."""
    _check_grid_dim(g, gen.cfg.grid_dim)
    with ad.no_grad():
        x = Tensor(g.dense().astype(np.float64)[None, None])
        return gen.encode(x).data[0].copy()


def fuse_sequence(features: list[np.ndarray], gen: GeneratorModel) -> np.ndarray:
    """Run the fusion LSTM over per-view feature vectors; returns final h."""
    if len(features) == 0:
        raise ValueError("cannot fuse an empty feature sequence")
    if len(features) > gen.cfg.n_max:
        raise ValueError(f"sequence length {len(features)} exceeds n_max {gen.cfg.n_max}")
    with ad.no_grad():
        steps = [Tensor(np.asarray(f, dtype=np.float64)[None, :]) for f in features]
        return gen.fuse(steps).data[0].copy()


def generate(views: ViewSequence, gen: GeneratorModel) -> np.ndarray:
    """Occupancy probabilities (m, m, m), strictly inside (0, 1)."""
    m = gen.cfg.grid_dim
    for g in views.grids:
        _check_grid_dim(g, m)
    if len(views) > gen.cfg.n_max:
        raise ValueError(f"sequence length {len(views)} exceeds n_max {gen.cfg.n_max}")
    with ad.no_grad():
        probs = gen.forward_views(views.array()[None])
    return probs.data[0, 0].copy()


def reconstruct(views: ViewSequence, gen: GeneratorModel, threshold: float = 0.5) -> VoxelGrid:
    """Thresholded generation in the frame of the input views."""
    probs = generate(views, gen)
    ref = views.grids[0]
    return VoxelGrid.from_dense(probs > threshold, ref.origin, ref.voxel_size)


def discriminate(grid, dis: DiscriminatorModel) -> tuple[float, np.ndarray]:
    """Score in (0, 1) plus the flattened pre-final-layer feature map."""
    arr = grid.dense().astype(np.float64) if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)
    if arr.shape != (dis.cfg.grid_dim,) * 3:
        raise ValueError(f"grid shape {arr.shape} does not match model grid_dim {dis.cfg.grid_dim}")
    with ad.no_grad():
        score, feats = dis.forward(Tensor(arr[None, None]))
    return float(score.data[0]), feats.data[0].copy()


def feature_mean_gap(fake, real, dis: DiscriminatorModel) -> float:
    """Mean discriminator feature of the reconstruction minus that of the
    ground truth (each mean over its own feature elements)."""
    _, f_fake = discriminate(fake, dis)
    _, f_real = discriminate(real, dis)
    return float(f_fake.mean() - f_real.mean())


def _batch_groups(batch):
    """Group (ViewSequence, VoxelGrid) pairs by view count for dense batching."""
    groups: dict[int, list] = {}
    for seq, truth in batch:
        groups.setdefault(len(seq), []).append((seq, truth))
    return groups


def _forward_gen_batch(gen: GeneratorModel, batch) -> tuple[ad.Tensor, np.ndarray]:
    """Generator probabilities for a mixed-length batch.

    Returns (probs (B, 1, m, m, m) tensor, truth (B, 1, m, m, m) array);
    rows follow group order, which is fine because every loss term is a
    batch mean.
    """
    outs = []
    truths = []
    for n, items in sorted(_batch_groups(batch).items()):
        views = np.stack([seq.array() for seq, _ in items])
        outs.append(gen.forward_views(views))
        truths.extend(t.dense().astype(np.float64)[None] for _, t in items)
    probs = outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)
    return probs, np.stack(truths)


def _pos_weight(truth: np.ndarray, cap: float) -> float:
    occupied = truth.sum()
    if occupied == 0:
        return cap
    return float(np.clip((truth.size - occupied) / occupied, 1.0, cap))


def train_step(batch, gen, dis, cfg: RganConfig, opt_gen=None, opt_dis=None) -> TrainLosses:
    """One adversarial step: discriminator BCE on real/fake, then generator
    weighted reconstruction BCE plus lambda_adv * |feature-mean gap|.

    With lambda_adv = 0 the generator step never touches the discriminator.
    """
    if not batch:
        raise ValueError("train_step needs a nonempty batch")
    opt_gen = opt_gen or Adam(gen.parameters(), lr=cfg.lr)
    opt_dis = opt_dis or Adam(dis.parameters(), lr=cfg.lr)

    m = cfg.grid_dim
    for seq, truth in batch:
        _check_grid_dim(truth, m)
        for g in seq.grids:
            _check_grid_dim(g, m)
        if not (1 <= len(seq) <= cfg.n_max):
            raise ValueError(f"sequence length {len(seq)} outside [1, {cfg.n_max}]")

    # single generator forward serves both phases: the discriminator phase
    # sees its values detached, the generator phase differentiates through it
    ad.clear_tape()
    probs, truth_arr = _forward_gen_batch(gen, batch)
    b = truth_arr.shape[0]

    # discriminator step on detached fakes
    score_real, _ = dis.forward(Tensor(truth_arr))
    score_fake, _ = dis.forward(Tensor(probs.data.copy()))
    loss_dis = ad.add(
        ad.bce_loss(score_real, Tensor(np.ones(b))),
        ad.bce_loss(score_fake, Tensor(np.zeros(b))),
    )
    if not np.isfinite(loss_dis.data):
        raise RuntimeError(f"non-finite discriminator loss: {loss_dis.data}")
    opt_dis.zero_grad()
    ad.backward(loss_dis)
    opt_dis.step()

    # generator step against the just-updated discriminator
    w = _pos_weight(truth_arr, cfg.pos_weight_max)
    recon = ad.bce_loss(probs, Tensor(truth_arr), pos_weight=w)
    if cfg.lambda_adv > 0.0:
        _, feat_fake = dis.forward(probs)
        with ad.no_grad():
            _, feat_real = dis.forward(Tensor(truth_arr))
        gap = ad.sub(feat_fake.mean(), Tensor(feat_real.data.mean()))
        adv = ad.tabs(gap)
        loss_gen = ad.add(recon, ad.mul(adv, cfg.lambda_adv))
        adv_val = float(adv.data)
    else:
        loss_gen = recon
        adv_val = 0.0
    if not np.isfinite(loss_gen.data):
        raise RuntimeError(f"non-finite generator loss: {loss_gen.data}")
    opt_gen.zero_grad()
    ad.backward(loss_gen)
    opt_gen.step()
    opt_dis.zero_grad()  # drop spurious discriminator grads from the gen pass
    ad.clear_tape()
    return TrainLosses(float(recon.data), adv_val, float(loss_dis.data), float(loss_gen.data))


def mean_dataset_iou(dataset, gen: GeneratorModel, threshold: float = 0.5) -> float:
    """Mean IoU of thresholded reconstructions; empty-union pairs score 0."""
    with ad.no_grad():
        probs, truth_arr = _forward_gen_batch(gen, dataset)
    pred = probs.data[:, 0] > threshold
    truth = truth_arr[:, 0] > 0.5
    inter = (pred & truth).sum(axis=(1, 2, 3))
    union = (pred | truth).sum(axis=(1, 2, 3))
    vals = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return float(vals.mean())


def train(dataset, cfg: RganConfig, checkpoint_dir=None):
    """Epoch loop over shuffled batches; returns (gen, dis, log rows).

    Log rows carry epoch, gen_recon_loss, gen_adv_loss, dis_loss and
    mean_train_iou. Fully seeded: same cfg and dataset give bit-identical
    models and logs.
    """
    if not dataset:
        raise ValueError("train needs a nonempty dataset")
    ss = np.random.SeedSequence(cfg.seed)
    rng_gen, rng_dis, rng_shuffle = (np.random.default_rng(s) for s in ss.spawn(3))
    gen = GeneratorModel(cfg, rng_gen)
    dis = DiscriminatorModel(cfg, rng_dis)
    opt_gen = Adam(gen.parameters(), lr=cfg.lr)
    opt_dis = Adam(dis.parameters(), lr=cfg.lr)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng_shuffle.permutation(len(dataset))
        sums = np.zeros(3)
        n_batches = 0
        for lo in range(0, len(dataset), cfg.batch):
            batch = [dataset[i] for i in order[lo : lo + cfg.batch]]
            losses = train_step(batch, gen, dis, cfg, opt_gen, opt_dis)
            sums += (losses.gen_recon, losses.gen_adv, losses.dis)
            n_batches += 1
        miou = mean_dataset_iou(dataset, gen)
        log.append(
            {
                "epoch": epoch,
                "gen_recon_loss": sums[0] / n_batches,
                "gen_adv_loss": sums[1] / n_batches,
                "dis_loss": sums[2] / n_batches,
                "mean_train_iou": miou,
            }
        )
        if checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(gen, dis, cfg, epoch, Path(checkpoint_dir) / f"epoch_{epoch:04d}")
        if cfg.stop_iou and miou >= cfg.stop_iou:
            break
    return gen, dis, log


def write_training_log(log, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["epoch", "gen_recon_loss", "gen_adv_loss", "dis_loss", "mean_train_iou"]
        )
        writer.writeheader()
        for row in log:
            writer.writerow({k: repr(float(v)) if not isinstance(v, int) else v for k, v in row.items()})


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(gen: GeneratorModel, dis: DiscriminatorModel, cfg: RganConfig, epoch: int, prefix):
    """TNSR parameter file plus a JSON sidecar with the config and epoch."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    named = {f"gen.{k}": v for k, v in gen.params.items()}
    named.update({f"dis.{k}": v for k, v in dis.params.items()})
    ad.save_tensors(named, prefix.with_suffix(".tnsr"))
    sidecar = {"config": cfg.to_dict(), "epoch": epoch}
    with open(prefix.with_suffix(".json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(prefix) -> tuple[GeneratorModel, DiscriminatorModel, RganConfig, int]:
    prefix = Path(prefix)
    with open(prefix.with_suffix(".json")) as f:
        sidecar = json.load(f)
    cfg = RganConfig.from_dict(sidecar["config"])
    named = ad.load_tensors(prefix.with_suffix(".tnsr"))
    rng = np.random.default_rng(0)
    gen = GeneratorModel(cfg, rng)
    dis = DiscriminatorModel(cfg, rng)
    for model, tag in ((gen, "gen."), (dis, "dis.")):
        for k, t in model.params.items():
            key = tag + k
            if key not in named:
                raise ValueError(f"checkpoint {prefix}: missing tensor {key!r}")
            if named[key].shape != t.data.shape:
                raise ValueError(
                    f"checkpoint {prefix}: tensor {key!r} has shape {named[key].shape}, "
                    f"model expects {t.data.shape}"
                )
            t.data = named[key]
    return gen, dis, cfg, int(sidecar["epoch"])

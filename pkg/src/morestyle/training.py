"""Alternating adversarial training, evaluation and checkpoints.

Per batch a MoreStyle step runs three phases in a fixed order:

1. reconstruction: minimize the FSD loss between ``x`` and the styled
   reconstruction, updating the reconstruction decoder and the noise encoder;
2. adversarial: one ascent step on the segmentation loss of the styled image,
   updating only the noise encoder;
3. segmentation: minimize the uncertainty-weighted segmentation loss on the
   original and the (fresh) styled image, updating only the segmenter.
"""
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import spectral
from .errors import DivergenceError, ValidationError
from .losses import FsdWeights, decay_weights, fsd_loss, seg_loss
from .models import NoiseEncoder, ReconDecoder, SegNetwork, generate_styled, sample_active
from .synth_data import CLASS_NAMES, NUM_CLASSES
from .uncertainty import attention_regions, mc_uncertainty, normalize_mean, reweight

log = logging.getLogger(__name__)

METHODS = ("baseline", "fda", "fact", "asa", "asa_fsd", "morestyle")
EVAL_CLASSES = ("outer", "inner")


@dataclass
class TrainConfig:
    method: str = "morestyle"
    epochs: int = 100
    batch_size: int = 8
    seg_lr: float = 1e-2
    seg_momentum: float = 0.9
    recon_lr: float = 1e-3
    noise_lr: float = 1e-3
    mask_ratio: float = 0.1
    aug_ratio: float = 0.1
    lambda1: float = 5e-3
    lambda2: float = 5e-5
    lambda3: float = 5e-6
    decay_rate: float = 0.99
    mc_passes: int = 8
    noise_std: float = 0.05
    rho: float = 1.2
    sigma: float = 0.8
    seed: int = 0
    noise_dim: int = 64
    seg_widths: tuple = (8, 16, 32)
    recon_widths: tuple = (8, 16, 32)
    dropout: float = 0.1
    p_mix: float = 0.5
    gamma_bound: float = 1.0  # 0 or less: unbounded gamma
    fsd_intensity_scale: float = 255.0  # FSD sees images in 8-bit units
    adversarial: bool = True
    checkpoint_every: int = 10
    source_domain: str = "source"

    def __post_init__(self):
        self.seg_widths = tuple(self.seg_widths)
        self.recon_widths = tuple(self.recon_widths)
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; choose from {METHODS}")
        rates = (self.seg_lr, self.recon_lr, self.noise_lr)
        if min(rates) <= 0:
            raise ValidationError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["seg_widths"] = list(self.seg_widths)
        d["recon_widths"] = list(self.recon_widths)
        return d

    @property
    def fsd_weights(self):
        return FsdWeights(self.lambda1, self.lambda2, self.lambda3, self.decay_rate)

    @property
    def uses_styler(self):
        return self.method in ("asa", "asa_fsd", "morestyle")

    @property
    def uses_uncertainty(self):
        return self.method == "morestyle"


@dataclass
class StepReport:
    fsd_value: float = 0.0
    seg_value_orig: float = 0.0
    seg_value_aug: float = 0.0
    adversarial_seg_value: float = 0.0
    epoch: int = 0
    step: int = 0


@dataclass
class Nets:
    seg: SegNetwork
    decoder: ReconDecoder = None
    noise_enc: NoiseEncoder = None


@dataclass
class Optimizers:
    seg: torch.optim.Optimizer
    recon: torch.optim.Optimizer = None
    noise: torch.optim.Optimizer = None


@dataclass
class TrainState:
    config: TrainConfig
    nets: Nets
    opts: Optimizers
    gen: torch.Generator
    np_rng: np.random.Generator
    epoch: int = 0
    step: int = 0


@dataclass
class DiceReport:
    domain: str
    classes: tuple
    per_image: np.ndarray  # n_images x n_classes
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @property
    def mean_dice(self):
        return float(np.mean(list(self.mean.values())))


def build_nets(config: TrainConfig, in_channels=1):
    seg = SegNetwork(in_channels, NUM_CLASSES, config.seg_widths, config.dropout)
    seg = seg.to(memory_format=torch.channels_last)
    if not config.uses_styler:
        return Nets(seg)
    decoder = ReconDecoder(in_channels, config.recon_widths, config.p_mix)
    decoder = decoder.to(memory_format=torch.channels_last)
    bound = config.gamma_bound if config.gamma_bound > 0 else None
    noise_enc = NoiseEncoder(decoder.mix_channels, config.noise_dim, gamma_bound=bound)
    return Nets(seg, decoder, noise_enc)


def build_optimizers(nets: Nets, config: TrainConfig):
    seg = torch.optim.SGD(nets.seg.parameters(), lr=config.seg_lr, momentum=config.seg_momentum)
    if nets.decoder is None:
        return Optimizers(seg)
    recon = torch.optim.Adam(list(nets.decoder.parameters()) + list(nets.noise_enc.parameters()), lr=config.recon_lr)
    noise = torch.optim.Adam(nets.noise_enc.parameters(), lr=config.noise_lr)
    return Optimizers(seg, recon, noise)


def init_state(config: TrainConfig):
    torch.manual_seed(config.seed)
    nets = build_nets(config)
    opts = build_optimizers(nets, config)
    gen = torch.Generator().manual_seed(config.seed)
    np_rng = np.random.default_rng(config.seed)
    return TrainState(config, nets, opts, gen, np_rng)


def to_tensors(records):
    # N x H x W x C storage viewed as N x C x H x W is already channels-last
    x = torch.from_numpy(np.stack([r.image for r in records])).permute(0, 3, 1, 2)
    labels = torch.from_numpy(np.stack([r.label for r in records]).astype(np.int64))
    return x, labels


def onehot(labels, num_classes=NUM_CLASSES):
    return F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(torch.float32)


def hard_onehot(probs):
    return onehot(probs.argmax(dim=1), probs.shape[1])


def _finite(value, what, config):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what} loss", config.to_dict())
    return value


def spectral_augment(x, pool, config: TrainConfig, np_rng):
    """FDA or FACT augmentation against random partners drawn from ``pool``."""
    out = []
    imgs = x.permute(0, 2, 3, 1).double().numpy()
    for img in imgs:
        partner = pool[np_rng.integers(len(pool))].permute(1, 2, 0).double().numpy()
        if config.method == "fda":
            aug = spectral.fda_swap(img, partner, config.aug_ratio)
        else:
            aug = spectral.fact_mixup(img, partner, config.aug_ratio, float(np_rng.uniform()))
        out.append(np.clip(aug, 0.0, 1.0))
    return torch.from_numpy(np.stack(out)).permute(0, 3, 1, 2).to(x.dtype)


def _segment(state: TrainState, x, x_aug, y):
    """Segmentation phase: only the segmenter's optimizer steps."""
    cfg, nets = state.config, state.nets
    nets.seg.train()
    u = None
    if cfg.uses_uncertainty:
        umap = normalize_mean(mc_uncertainty(nets.seg, x, cfg.mc_passes, cfg.noise_std, state.gen))
    if x_aug is None:
        probs = nets.seg(x)
        loss = seg_loss(probs, y)
        orig, aug = loss, None
    else:
        probs_all = nets.seg(torch.cat([x, x_aug]))
        probs, probs_aug = probs_all[: len(x)], probs_all[len(x):]
        if cfg.uses_uncertainty:
            regions = attention_regions(hard_onehot(probs.detach()), hard_onehot(probs_aug.detach()), y)
            u = reweight(umap, regions, cfg.rho, cfg.sigma)
        orig = seg_loss(probs, y, u)
        aug = seg_loss(probs_aug, y, u)
        loss = 0.5 * (orig + aug)
    _finite(loss.item(), "segmentation", cfg)
    state.opts.seg.zero_grad(set_to_none=True)
    loss.backward()
    state.opts.seg.step()
    return orig.item(), (aug.item() if aug is not None else 0.0)


def reconstruction_phase(state: TrainState, x, n, active):
    """Minimize the reconstruction loss; steps the decoder and the noise encoder."""
    cfg, nets, opts = state.config, state.nets, state.opts
    nets.decoder.train()
    nets.noise_enc.train()
    x_hat = generate_styled(nets.decoder, nets.noise_enc, x, n, active=active)
    if cfg.method == "asa":
        rec = F.mse_loss(x_hat, x)
    else:
        weights = decay_weights(cfg.fsd_weights, state.epoch)
        mask = spectral.make_low_freq_mask(x.shape[-2], x.shape[-1], cfg.mask_ratio)
        scale = cfg.fsd_intensity_scale
        rec = fsd_loss(scale * x, scale * x_hat, weights, mask)
    value = _finite(rec.item(), "reconstruction", cfg)
    opts.recon.zero_grad(set_to_none=True)
    rec.backward()
    opts.recon.step()
    return value


def adversarial_phase(state: TrainState, x, y, n, active):
    """One ascent step on L_seg of the styled image; gradients reach the noise encoder only."""
    cfg, nets, opts = state.config, state.nets, state.opts
    x_hat = generate_styled(nets.decoder, nets.noise_enc, x, n, active=active)
    seg_mode = nets.seg.training
    nets.seg.eval()
    adv = seg_loss(nets.seg(x_hat), y)
    nets.seg.train(seg_mode)
    value = _finite(adv.item(), "adversarial", cfg)
    params = list(nets.noise_enc.parameters())
    # with every mix layer inactive x_hat does not depend on the noise encoder
    grads = torch.autograd.grad(-adv, params, allow_unused=True)
    if any(g is not None for g in grads):
        opts.noise.zero_grad(set_to_none=True)
        for p, g in zip(params, grads):
            p.grad = g
        opts.noise.step()
        opts.noise.zero_grad(set_to_none=True)
    return value


def train_step(state: TrainState, x, labels, pool=None) -> StepReport:
    cfg, nets = state.config, state.nets
    y = onehot(labels)
    report = StepReport(epoch=state.epoch, step=state.step)

    if cfg.method in ("fda", "fact"):
        x_aug = spectral_augment(x, pool if pool is not None else x, cfg, state.np_rng)
        report.seg_value_orig, report.seg_value_aug = _segment(state, x, x_aug, y)
    elif cfg.uses_styler:
        n = torch.randn(len(x), cfg.noise_dim, generator=state.gen)
        active = sample_active(nets.decoder.n_mix, nets.decoder.p_mix, state.gen)
        report.fsd_value = reconstruction_phase(state, x, n, active)
        if cfg.adversarial:
            report.adversarial_seg_value = adversarial_phase(state, x, y, n, active)
        with torch.no_grad():
            x_hat = generate_styled(nets.decoder, nets.noise_enc, x, n, active=active)
        report.seg_value_orig, report.seg_value_aug = _segment(state, x, x_hat, y)
    else:
        report.seg_value_orig, report.seg_value_aug = _segment(state, x, None, y)
    state.step += 1
    return report


# --- evaluation ----------------------------------------------------------------

def dice_score(pred_mask, true_mask):
    """Hard Dice of two boolean masks; two empty masks score 1."""
    pred_mask, true_mask = np.asarray(pred_mask, bool), np.asarray(true_mask, bool)
    denom = pred_mask.sum() + true_mask.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(pred_mask, true_mask).sum() / denom


def nested_dice(pred_labels, true_labels):
    """Dice for the whole disc (label >= 1) and the inner region (label == 2)."""
    return [dice_score(pred_labels >= 1, true_labels >= 1), dice_score(pred_labels == 2, true_labels == 2)]


@torch.no_grad()
def predict_labels(seg: SegNetwork, records, batch_size=16):
    was_training = seg.training
    seg.eval()
    out = []
    for i in range(0, len(records), batch_size):
        x, _ = to_tensors(records[i:i + batch_size])
        out.append(seg(x).argmax(dim=1).numpy())
    seg.train(was_training)
    return np.concatenate(out)


def dice_report(pred_labels, records, domain):
    per_image = np.array([nested_dice(p, r.label) for p, r in zip(pred_labels, records)])
    mean = {c: float(per_image[:, i].mean()) for i, c in enumerate(EVAL_CLASSES)}
    std = {c: float(per_image[:, i].std()) for i, c in enumerate(EVAL_CLASSES)}
    return DiceReport(domain, EVAL_CLASSES, per_image, mean, std)


def evaluate(checkpoint, dataset, domain, split=None) -> DiceReport:
    """Hard Dice per image and class on one domain; never writes the checkpoint."""
    if domain not in dataset:
        raise ValidationError(f"domain {domain!r} not in dataset ({sorted(dataset)})")
    records = [r for r in dataset[domain] if split is None or r.split == split]
    if not records:
        raise ValidationError(f"domain {domain!r} has no samples for split {split!r}")
    if isinstance(checkpoint, (str, Path)):
        _, nets, _ = load_checkpoint(checkpoint)
        seg = nets.seg
    elif isinstance(checkpoint, Nets):
        seg = checkpoint.seg
    else:
        seg = checkpoint
    return dice_report(predict_labels(seg, records), records, domain)


# --- checkpoints ---------------------------------------------------------------

def _state_dicts(obj):
    return None if obj is None else obj.state_dict()


def save_checkpoint(path, state: TrainState, epoch=None):
    nets, opts = state.nets, state.opts
    payload = {
        "format": "morestyle-checkpoint/1",
        "config": state.config.to_dict(),
        "epoch": state.epoch if epoch is None else epoch,
        "step": state.step,
        "seg": nets.seg.state_dict(),
        "decoder": _state_dicts(nets.decoder),
        "noise_enc": _state_dicts(nets.noise_enc),
        "opt_seg": opts.seg.state_dict(),
        "opt_recon": _state_dicts(opts.recon),
        "opt_noise": _state_dicts(opts.noise),
        "rng": {
            "torch_global": torch.get_rng_state(),
            "torch_gen": state.gen.get_state(),
            "numpy": state.np_rng.bit_generator.state,
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_state(path) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig.from_dict(payload["config"])
    nets = build_nets(config)
    nets.seg.load_state_dict(payload["seg"])
    if nets.decoder is not None:
        nets.decoder.load_state_dict(payload["decoder"])
        nets.noise_enc.load_state_dict(payload["noise_enc"])
    opts = build_optimizers(nets, config)
    opts.seg.load_state_dict(payload["opt_seg"])
    if opts.recon is not None:
        opts.recon.load_state_dict(payload["opt_recon"])
        opts.noise.load_state_dict(payload["opt_noise"])
    # dropout draws from the global stream
    torch.set_rng_state(payload["rng"]["torch_global"])
    gen = torch.Generator()
    gen.set_state(payload["rng"]["torch_gen"])
    np_rng = np.random.default_rng()
    np_rng.bit_generator.state = payload["rng"]["numpy"]
    return TrainState(config, nets, opts, gen, np_rng, payload["epoch"], payload["step"])


def load_checkpoint(path):
    state = load_state(path)
    return state.config, state.nets, state.epoch


# --- training loop ---------------------------------------------------------------

def _mean_reports(reports):
    keys = ("fsd_value", "seg_value_orig", "seg_value_aug", "adversarial_seg_value")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def train(config: TrainConfig, dataset, out_dir, progress=None):
    """Train on the source domain's train split; returns the final checkpoint path.

    Writes ``metrics.jsonl`` (one record per epoch) and checkpoints into
    ``out_dir``. On divergence the last good state is saved to
    ``last_good.pt`` before the error propagates.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.source_domain not in dataset:
        raise ValidationError(f"source domain {config.source_domain!r} missing from dataset")
    source = dataset[config.source_domain]
    train_recs = [r for r in source if r.split == "train"] or [r for r in source if r.split != "val"]
    val_recs = [r for r in source if r.split == "val"]
    if not train_recs:
        raise ValidationError("dataset has no training samples")

    state = init_state(config)
    x_all, labels_all = to_tensors(train_recs)
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text("")
    save_checkpoint(out_dir / "checkpoint_epoch000.pt", state)
    last_good = copy.deepcopy((state.nets, state.opts))

    for epoch in range(config.epochs):
        state.epoch = epoch
        order = torch.randperm(len(train_recs), generator=state.gen)
        reports = []
        try:
            for i in range(0, len(order), config.batch_size):
                idx = order[i:i + config.batch_size]
                reports.append(train_step(state, x_all[idx], labels_all[idx], pool=x_all))
        except DivergenceError:
            state.nets, state.opts = last_good
            save_checkpoint(out_dir / "last_good.pt", state, epoch=epoch)
            log.error("diverged in epoch %d; last good state saved", epoch)
            raise
        weights = decay_weights(config.fsd_weights, epoch)
        record = {"epoch": epoch, **weights.as_dict(), **_mean_reports(reports)}
        if val_recs:
            rep = evaluate(state.nets.seg, dataset, config.source_domain, split="val")
            record["val_dice"] = rep.mean_dice
            record.update({f"val_dice_{c}": v for c, v in rep.mean.items()})
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        if progress is not None:
            progress(record)
        last_good = copy.deepcopy((state.nets, state.opts))
        done = epoch + 1
        if config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.epochs:
            save_checkpoint(out_dir / f"checkpoint_epoch{done:03d}.pt", state, epoch=done)
    state.epoch = config.epochs
    return save_checkpoint(out_dir / "final.pt", state)


def read_metrics(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]

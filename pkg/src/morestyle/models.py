"""Toy-scale networks: segmenter, reconstruction decoder and noise encoder."""
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

IN_EPS = 1e-5


def conv_block(cin, cout, norm=True):
    layers = [nn.Conv2d(cin, cout, 3, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    layers.append(nn.Conv2d(cout, cout, 3, padding=1))
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class _UNet(nn.Module):
    def __init__(self, in_channels, out_channels, widths, norm=True, dropout=0.0):
        super().__init__()
        widths = tuple(widths)
        if len(widths) < 2:
            raise ValidationError("need at least two resolution levels")
        self.widths = widths
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(conv_block(cin, w, norm))
            cin = w
        self.up = nn.ModuleList()
        self.drop = nn.ModuleList()
        for w_skip, w_low in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.up.append(conv_block(w_low + w_skip, w_skip, norm))
            self.drop.append(nn.Dropout2d(dropout) if dropout > 0 else nn.Identity())
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    @property
    def factor(self):
        return 2 ** (len(self.widths) - 1)

    def _check(self, x):
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ValidationError(f"spatial size {tuple(x.shape[-2:])} not divisible by {self.factor}")

    def encode(self, x, hook=None):
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            if hook is not None:
                x = hook(i, x)
            skips.append(x)
        return skips

    def decode(self, skips):
        x = skips[-1]
        for block, drop, skip in zip(self.up, self.drop, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = drop(block(torch.cat([x, skip], dim=1)))
        return self.head(x)


class SegNetwork(_UNet):
    """Encoder-decoder with skips and decoder dropout; emits softmax probabilities."""

    def __init__(self, in_channels=1, num_classes=3, widths=(16, 32, 64), dropout=0.1):
        super().__init__(in_channels, num_classes, widths, norm=True, dropout=dropout)
        self.num_classes = num_classes

    def logits(self, x):
        self._check(x)
        return self.decode(self.encode(x))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


@dataclass
class StyleParams:
    gamma: list  # per mix layer, N x C
    beta: list


def style_mix_layer(features, gamma, beta, active):
    """Instance-normalize, scale by (1 + gamma), shift by beta; identity when inactive."""
    if not active:
        return features
    c = features.shape[1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ValidationError(f"style params sized {gamma.shape[-1]}/{beta.shape[-1]} for {c} channels")
    mu = features.mean(dim=(-2, -1), keepdim=True)
    var = features.var(dim=(-2, -1), keepdim=True, unbiased=False)
    normed = (features - mu) / torch.sqrt(var + IN_EPS)
    return normed * (1 + gamma[..., None, None]) + beta[..., None, None]


class ReconDecoder(_UNet):
    """Image reconstruction network with style-mix slots after the first three conv blocks."""

    n_mix = 3

    def __init__(self, in_channels=1, widths=(16, 32, 64), p_mix=0.5):
        super().__init__(in_channels, in_channels, widths, norm=False)
        if len(widths) < self.n_mix:
            raise ValidationError("reconstruction decoder needs at least three conv blocks")
        self.p_mix = p_mix

    @property
    def mix_channels(self):
        return list(self.widths[: self.n_mix])

    def forward(self, x, params: StyleParams = None, active=None):
        self._check(x)
        active = active if active is not None else [False] * self.n_mix

        def hook(i, feats):
            if i < self.n_mix and params is not None:
                return style_mix_layer(feats, params.gamma[i], params.beta[i], active[i])
            return feats

        out = torch.sigmoid(self.decode(self.encode(x, hook)))
        return out.clamp(0.0, 1.0)


class NoiseEncoder(nn.Module):
    """Maps Gaussian noise vectors to per-layer (gamma, beta).

    With ``gamma_bound`` set, gamma = bound * tanh(.), so for bounds up to 1 the
    feature scale 1 + gamma stays positive and a style can never flip the sign
    of a feature map.
    """

    def __init__(self, channels, noise_dim=64, hidden=128, gamma_bound=1.0):
        super().__init__()
        self.channels = list(channels)
        self.noise_dim = noise_dim
        self.gamma_bound = gamma_bound
        self.net = nn.Sequential(
            nn.Linear(noise_dim, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 2 * sum(self.channels)),
        )
        nn.init.normal_(self.net[-1].weight, std=0.01)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, n) -> StyleParams:
        if n.shape[-1] != self.noise_dim:
            raise ValidationError(f"noise dim {n.shape[-1]} != {self.noise_dim}")
        out = self.net(n)
        gammas, betas = [], []
        offset = 0
        for c in self.channels:
            g = out[:, offset:offset + c]
            if self.gamma_bound is not None:
                g = self.gamma_bound * torch.tanh(g)
            gammas.append(g)
            betas.append(out[:, offset + c:offset + 2 * c])
            offset += 2 * c
        return StyleParams(gammas, betas)


def sample_active(n_layers, p, generator=None):
    draws = torch.rand(n_layers, generator=generator)
    return [bool(d < p) for d in draws]


def generate_styled(decoder: ReconDecoder, noise_enc: NoiseEncoder, x, n, generator=None, active=None):
    """Styled reconstruction x_hat = D(x, beta, gamma) with random mix-layer activation."""
    if n.shape[0] != x.shape[0]:
        raise ValidationError("need one noise vector per image")
    if active is None:
        active = sample_active(decoder.n_mix, decoder.p_mix, generator)
    params = noise_enc(n)
    return decoder(x, params, active)

"""Generator and discriminator objectives."""

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigurationError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_tr: float = 1.0
    lambda_rec: float = 30.0
    lambda_adv: float = 1.0
    lambda_perc: float = 0.01
    lambda_style: float = 50.0
    gamma: float = 12.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossReport:
    tr: float = 0.0
    rec: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    perc: float = 0.0
    style: float = 0.0
    total: float = 0.0

    FIELDS = ("tr", "rec", "adv_g", "adv_d", "perc", "style", "total")

    def as_row(self):
        return [getattr(self, k) for k in self.FIELDS]


# ---------------------------------------------------------------------------
# triplet


def similarity(a, b):
    """Scaled dot product along the last axis."""
    return (a * b).sum(-1) / math.sqrt(a.shape[-1])


def triplet_loss(q, k_pos, k_neg, gamma=12.0):
    """max(0, -S(q, k+) + S(q, k-) + gamma), elementwise over leading axes."""
    return F.relu(-similarity(q, k_pos) + similarity(q, k_neg) + gamma)


def batch_triplet_loss(queries, keys, triplets, gamma=12.0):
    """Mean triplet loss per image, averaged over images that have triplets.

    queries, keys: (B, d, hw) projected maps.  ``triplets`` holds one
    (query, positive, negative) index-array triple per image; images with
    no triplets (zero-filled references) contribute nothing.
    """
    per_image = []
    for b, (qi, pi, ni) in enumerate(triplets):
        if len(qi) == 0:
            continue
        qi, pi, ni = (torch.as_tensor(a, dtype=torch.long, device=queries.device) for a in (qi, pi, ni))
        q = queries[b][:, qi].T
        kp = keys[b][:, pi].T
        kn = keys[b][:, ni].T
        per_image.append(triplet_loss(q, kp, kn, gamma).mean())
    if not per_image:
        return queries.new_zeros(())
    return torch.stack(per_image).mean()


# ---------------------------------------------------------------------------
# reconstruction / adversarial


def reconstruction_loss(output, target):
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(output.shape)} vs {tuple(target.shape)}")
    return (output - target).abs().mean()


def adversarial_losses(d_real, d_fake, kind="lsgan"):
    """Return (loss_d, loss_g) from raw patch scores."""
    if kind == "lsgan":
        loss_d = ((d_real - 1) ** 2).mean() + (d_fake ** 2).mean()
        loss_g = ((d_fake - 1) ** 2).mean()
    elif kind == "bce":
        bce = F.binary_cross_entropy_with_logits
        loss_d = bce(d_real, torch.ones_like(d_real)) + bce(d_fake, torch.zeros_like(d_fake))
        loss_g = bce(d_fake, torch.ones_like(d_fake))
    else:
        raise ValueError(f"unknown gan loss {kind!r}")
    return loss_d, loss_g


def discriminator_loss(d_real, d_fake, kind="lsgan"):
    return adversarial_losses(d_real, d_fake, kind)[0]


def generator_adv_loss(d_fake, kind="lsgan"):
    return adversarial_losses(d_fake.detach(), d_fake, kind)[1]


# ---------------------------------------------------------------------------
# perceptual / style

# Layer indices of relu{1..5}_1 inside torchvision's VGG19 ``features``.
VGG19_RELU_X_1 = {"relu1_1": 1, "relu2_1": 6, "relu3_1": 11, "relu4_1": 20, "relu5_1": 29}
PERCEPTUAL_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
STYLE_LAYERS = ("relu2_1", "relu3_1", "relu4_1")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureNet(nn.Module):
    """Frozen multi-layer feature extractor.

    ``body`` is an ``nn.Sequential``; ``taps`` maps layer names to the index
    whose output is collected.  Inputs are images in [-1, 1]; they are
    re-normalized with ``mean``/``std`` before the body.
    """

    def __init__(self, body, taps, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        self.body = body
        self.taps = dict(taps)
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # always frozen
        return super().train(False)

    def forward(self, x, layers):
        x = ((x + 1) / 2 - self.mean) / self.std
        wanted = {self.taps[name]: name for name in layers}
        last = max(wanted)
        out = {}
        for i, module in enumerate(self.body):
            x = module(x)
            if i in wanted:
                out[wanted[i]] = x
            if i == last:
                break
        return [out[name] for name in layers]


def vgg19_features(weights_path=None, allow_random=False, seed=0):
    """VGG19 up to relu5_1, loaded from a torchvision ``vgg19`` state dict.

    Without weights a ``ConfigurationError`` is raised unless
    ``allow_random`` is set, in which case the body is randomly initialized
    from ``seed`` (only meaningful for desk-scale experiments).
    """
    from torchvision.models.vgg import cfgs, make_layers

    features = make_layers(cfgs["E"], batch_norm=False)
    if weights_path is not None:
        path = Path(weights_path)
        if not path.exists():
            raise ConfigurationError(f"feature-net weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k[len("features."):] if k.startswith("features.") else k: v for k, v in state.items()}
        state = {k: v for k, v in state.items() if not k.startswith("classifier")}
        features.load_state_dict(state, strict=False)
        missing = [k for k in features.state_dict() if k not in state]
        if any(int(k.split(".")[0]) <= VGG19_RELU_X_1["relu5_1"] for k in missing):
            raise ConfigurationError(f"feature-net weights at {path} lack layers {missing[:4]}")
    elif allow_random:
        gen = torch.Generator().manual_seed(seed)
        for m in features:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                    m.bias.zero_()
    else:
        raise ConfigurationError(
            "perceptual/style losses need VGG19 weights (set vgg_weights) "
            "or explicitly allow a random feature net"
        )
    body = nn.Sequential(*list(features.children())[: VGG19_RELU_X_1["relu5_1"] + 1])
    return FeatureNet(body, VGG19_RELU_X_1)


def gram(feat):
    """(B, C, H, W) -> (B, C, C) normalized by H*W (resolution-independent)."""
    b, c, h, w = feat.shape
    m = feat.reshape(b, c, h * w)
    return m @ m.transpose(1, 2) / (h * w)


def perceptual_loss(output, target, feature_net, layers=PERCEPTUAL_LAYERS, target_feats=None):
    if feature_net is None:
        raise ConfigurationError("perceptual loss needs a feature network")
    out_feats = feature_net(output, layers)
    if target_feats is None:
        target_feats = feature_net(target, layers)
    return sum((a - b).abs().mean() for a, b in zip(out_feats, target_feats))


def style_loss(output, target, feature_net, layers=STYLE_LAYERS, target_feats=None):
    if feature_net is None:
        raise ConfigurationError("style loss needs a feature network")
    out_feats = feature_net(output, layers)
    if target_feats is None:
        target_feats = feature_net(target, layers)
    return sum((gram(a) - gram(b)).abs().mean() for a, b in zip(out_feats, target_feats))


def perceptual_and_style(output, target, feature_net,
                         perc_layers=PERCEPTUAL_LAYERS, style_layers=STYLE_LAYERS):
    """Both terms from a single pass of each image through the feature net."""
    layers = tuple(dict.fromkeys(perc_layers + style_layers))
    with torch.no_grad():
        tgt = dict(zip(layers, feature_net(target, layers)))
    out = dict(zip(layers, feature_net(output, layers)))
    perc = sum((out[n] - tgt[n]).abs().mean() for n in perc_layers)
    style = sum((gram(out[n]) - gram(tgt[n])).abs().mean() for n in style_layers)
    return perc, style


def total_generator_loss(terms, weights):
    """Weighted sum; ``terms`` maps tr/rec/adv/perc/style to scalars."""
    return (
        weights.lambda_tr * terms["tr"]
        + weights.lambda_rec * terms["rec"]
        + weights.lambda_adv * terms["adv"]
        + weights.lambda_perc * terms["perc"]
        + weights.lambda_style * terms["style"]
    )

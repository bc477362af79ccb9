"""MSF-Net: shared-encoder dual-decoder translation between two MRI
modalities, with patch discriminators and proxy segmentation heads.

The single encoder maps a 2.5-D slab (3 adjacent slices) to a latent
feature map; one decoder per modality reconstructs or translates; two
patch discriminators drive a least-squares adversarial objective; two
1-conv proxy heads predict the tumor/cochlea mask and the parcellation of
annotated modality-1 slabs from the latent map.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_state_into, save_checkpoint, state_dict_tensors
from .errors import TrainingDivergedError, ValidationError, VolumeIOError
from .volume import Modality, Slab, Volume, volume_slabs


@dataclass(frozen=True)
class ArchProfile:
    """Network size knobs. 'tiny' stays under 1e3 parameters so losses can be
    checked against finite differences in double precision."""

    name: str = "default"
    base_width: int = 32
    n_down: int = 2
    n_blocks: int = 3
    disc_width: int = 32
    disc_layers: int = 3
    norm: str = "instance"  # instance | none
    vs_classes: int = 3
    gif_classes: int = 5

    @property
    def latent_width(self) -> int:
        return self.base_width * 2**self.n_down


PROFILES = {
    "default": ArchProfile(),
    "toy": ArchProfile("toy", base_width=12, n_blocks=1, disc_width=12, disc_layers=3),
    "tiny": ArchProfile("tiny", base_width=2, n_down=1, n_blocks=1, disc_width=2,
                        disc_layers=1, norm="none"),
    "identity": ArchProfile("identity", base_width=4, n_down=0, n_blocks=0, disc_width=4,
                            disc_layers=1, norm="none"),
}


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 10.0
    lambda_p: float = 0.01
    adversarial: float = 1.0
    cycle: float = 1.0
    proxy: float = 1.0

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValidationError("loss weights must be non-negative")


def _norm(profile: ArchProfile, width: int) -> nn.Module:
    if profile.norm == "instance":
        return nn.InstanceNorm2d(width)
    return nn.Identity()


class ResidualBlock(nn.Module):
    def __init__(self, profile: ArchProfile, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1, padding_mode="reflect"),
            _norm(profile, width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1, padding_mode="reflect"),
            _norm(profile, width),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    def __init__(self, profile: ArchProfile):
        super().__init__()
        w = profile.base_width
        layers = [
            nn.Conv2d(3, w, 3, padding=1, padding_mode="reflect"),
            _norm(profile, w),
            nn.ReLU(inplace=True),
        ]
        for _ in range(profile.n_down):
            layers += [
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
                _norm(profile, 2 * w),
                nn.ReLU(inplace=True),
            ]
            w *= 2
        layers += [ResidualBlock(profile, w) for _ in range(profile.n_blocks)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, profile: ArchProfile):
        super().__init__()
        w = profile.latent_width
        layers = []
        for _ in range(profile.n_down):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(w, w // 2, 3, padding=1),
                _norm(profile, w // 2),
                nn.ReLU(inplace=True),
            ]
            w //= 2
        layers += [nn.Conv2d(w, 3, 3, padding=1, padding_mode="reflect")]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class PatchDiscriminator(nn.Module):
    """PatchGAN-style score map over overlapping receptive fields."""

    def __init__(self, profile: ArchProfile):
        super().__init__()
        w = profile.disc_width
        layers = [nn.Conv2d(3, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        for i in range(1, profile.disc_layers):
            stride = 2 if i < profile.disc_layers - 1 else 1
            layers += [
                nn.Conv2d(w, 2 * w, 4, stride=stride, padding=1),
                _norm(profile, 2 * w),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            w *= 2
        layers += [nn.Conv2d(w, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ProxyHead(nn.Module):
    """1x1 conv on the latent map, upsampled back to the input resolution."""

    def __init__(self, in_width: int, n_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(in_width, n_classes, 1)

    def forward(self, latent, out_hw):
        logits = self.conv(latent)
        if logits.shape[-2:] != tuple(out_hw):
            logits = F.interpolate(logits, size=tuple(out_hw), mode="bilinear", align_corners=False)
        return logits


class TranslationModel(nn.Module):
    """Shared encoder E, decoders G_t1/G_t2, discriminators D_t1/D_t2, and
    proxy heads for the annotated direction."""

    def __init__(self, profile: ArchProfile):
        super().__init__()
        self.profile = profile
        self.encoder = Encoder(profile)
        self.decoder_t1 = Decoder(profile)
        self.decoder_t2 = Decoder(profile)
        self.disc_t1 = PatchDiscriminator(profile)
        self.disc_t2 = PatchDiscriminator(profile)
        self.head_vs = ProxyHead(profile.latent_width, profile.vs_classes)
        self.head_gif = ProxyHead(profile.latent_width, profile.gif_classes)

    def decode(self, latent, modality: str):
        if modality == "t1":
            return self.decoder_t1(latent)
        if modality == "t2":
            return self.decoder_t2(latent)
        raise ValidationError(f"unknown modality '{modality}'")

    def translate_batch(self, x, direction: str):
        src, dst = _parse_direction(direction)
        return self.decode(self.encoder(x), dst)

    def generator_modules(self):
        return [self.encoder, self.decoder_t1, self.decoder_t2, self.head_vs, self.head_gif]

    def discriminator_modules(self):
        return [self.disc_t1, self.disc_t2]

    def generator_parameters(self):
        return [p for m in self.generator_modules() for p in m.parameters()]

    def discriminator_parameters(self):
        return [p for m in self.discriminator_modules() for p in m.parameters()]


def _parse_direction(direction: str) -> tuple[str, str]:
    table = {"t1_to_t2": ("t1", "t2"), "t2_to_t1": ("t2", "t1")}
    if direction not in table:
        raise ValidationError(f"direction must be one of {sorted(table)}, got '{direction}'")
    return table[direction]


def build_model(profile: str | ArchProfile, seed: int = 0) -> TranslationModel:
    if isinstance(profile, str):
        try:
            profile = PROFILES[profile]
        except KeyError:
            raise ValidationError(f"unknown architecture profile '{profile}'") from None
    torch.manual_seed(seed)
    return TranslationModel(profile)


def build_identity_model(width: int = 4) -> TranslationModel:
    """Fixture whose encoder and both decoders are exact identity maps for
    non-negative inputs (dirac kernels, no norm)."""
    profile = replace(PROFILES["identity"], base_width=width)
    model = TranslationModel(profile)
    with torch.no_grad():
        stem = model.encoder.net[0]
        stem.weight.zero_()
        stem.bias.zero_()
        for c in range(3):
            stem.weight[c, c, 1, 1] = 1.0
        for dec in (model.decoder_t1, model.decoder_t2):
            out = dec.net[-1]
            out.weight.zero_()
            out.bias.zero_()
            for c in range(3):
                out.weight[c, c, 1, 1] = 1.0
    return model


# ---------------------------------------------------------------------------
# Perceptual feature extractors
# ---------------------------------------------------------------------------


class RandomConvFeatures(nn.Module):
    """Fixed random multi-scale conv stack used as a hermetic perceptual
    feature extractor; weights depend only on the seed and never train."""

    def __init__(self, seed: int = 0, widths=(8, 16, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        w_in = 3
        for w_out in widths:
            conv = nn.Conv2d(w_in, w_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / math.sqrt(w_in * 9))
                conv.bias.zero_()
            stages.append(conv)
            w_in = w_out
        self.stages = nn.ModuleList(stages)
        for p in self.parameters():
            p.requires_grad_(False)
        self.seed = seed

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


class VGGFeatures(nn.Module):
    """Perceptual features from a locally provided VGG19 weight file.

    Optional provider: construction fails cleanly when torchvision or the
    weight file is unavailable, and callers fall back to RandomConvFeatures.
    """

    LAYERS = (3, 8, 17, 26)

    def __init__(self, weights_path):
        super().__init__()
        try:
            from torchvision.models import vgg19
        except ImportError as e:
            raise VolumeIOError("torchvision is required for the vgg19 extractor") from e
        net = vgg19(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        self.blocks = nn.ModuleList()
        prev = 0
        for idx in self.LAYERS:
            self.blocks.append(nn.Sequential(*list(net.features.children())[prev : idx + 1]))
            prev = idx + 1
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


def make_feature_extractor(provider: str = "random", seed: int = 0, vgg_weights=None):
    if provider == "random":
        return RandomConvFeatures(seed=seed)
    if provider == "vgg19":
        if vgg_weights is None:
            raise ValidationError("vgg19 extractor requires a local weights path")
        return VGGFeatures(vgg_weights)
    raise ValidationError(f"unknown perceptual provider '{provider}'")


def perceptual_distance(extractor, x, y):
    """Mean over extractor stages of the MSE between activations."""
    fx = extractor(x)
    fy = extractor(y)
    dists = [F.mse_loss(a, b) for a, b in zip(fx, fy)]
    return torch.stack(dists).mean()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def reconstruction_loss(recon1, input1, recon2, input2, extractor, w: LossWeights):
    """L1 reconstruction plus perceptual distance, both branches."""
    if recon1.shape != input1.shape or recon2.shape != input2.shape:
        raise ValidationError("reconstruction shapes must match inputs")
    l1 = F.l1_loss(recon1, input1) + F.l1_loss(recon2, input2)
    loss = w.lambda_r * l1
    if w.lambda_p > 0:
        loss = loss + w.lambda_p * (
            perceptual_distance(extractor, recon1, input1)
            + perceptual_distance(extractor, recon2, input2)
        )
    return loss


def discriminator_loss(model: TranslationModel, real1, real2, fake12, fake21):
    """LSGAN discriminator side: reals toward 1, detached fakes toward 0."""
    d1_real = model.disc_t1(real1)
    d2_real = model.disc_t2(real2)
    d1_fake = model.disc_t1(fake21.detach())
    d2_fake = model.disc_t2(fake12.detach())
    return (
        ((d1_real - 1.0) ** 2).mean()
        + (d1_fake**2).mean()
        + ((d2_real - 1.0) ** 2).mean()
        + (d2_fake**2).mean()
    )


def generator_adversarial_loss(model: TranslationModel, fake12, fake21):
    """LSGAN generator side: fakes scored toward 1."""
    g1 = model.disc_t1(fake21)
    g2 = model.disc_t2(fake12)
    return ((g1 - 1.0) ** 2).mean() + ((g2 - 1.0) ** 2).mean()


def adversarial_losses(model: TranslationModel, real1, real2, fake12, fake21):
    """Least-squares GAN split, returned as (loss_d, loss_g).

    Both are sums of mean-reduced squared errors over the patch score maps.
    """
    return (
        discriminator_loss(model, real1, real2, fake12, fake21),
        generator_adversarial_loss(model, fake12, fake21),
    )


def cycle_loss(model: TranslationModel, slab1, slab2):
    """L1 between each slab and its round-trip translation."""
    back1 = model.decoder_t1(model.encoder(model.decoder_t2(model.encoder(slab1))))
    back2 = model.decoder_t2(model.encoder(model.decoder_t1(model.encoder(slab2))))
    return F.l1_loss(back1, slab1) + F.l1_loss(back2, slab2)


def soft_dice_loss(logits, target, n_classes: int, eps: float = 1e-6):
    """1 - mean soft Dice over foreground classes (background excluded)."""
    prob = F.softmax(logits, dim=1)
    onehot = F.one_hot(target.long(), n_classes).permute(0, 3, 1, 2).to(prob.dtype)
    dims = (0, 2, 3)
    inter = (prob * onehot).sum(dim=dims)
    denom = prob.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1.0 - dice[1:].mean()


def ce_dice_loss(logits, target, n_classes: int):
    return F.cross_entropy(logits, target.long()) + soft_dice_loss(logits, target, n_classes)


def proxy_seg_loss(model: TranslationModel, slab1, vs_target, gif_target,
                   include_vs: bool = True, include_gif: bool = True):
    """Cross-entropy + Dice for both proxy heads on annotated slabs.

    Targets are the center-slice label maps (B, H, W); missing targets are
    an argument error.
    """
    if include_vs and vs_target is None:
        raise ValidationError("proxy loss requires a vs mask")
    if include_gif and gif_target is None:
        raise ValidationError("proxy loss requires a gif mask")
    latent = model.encoder(slab1)
    hw = slab1.shape[-2:]
    loss = slab1.new_zeros(())
    if include_vs:
        loss = loss + ce_dice_loss(model.head_vs(latent, hw), vs_target, model.profile.vs_classes)
    if include_gif:
        loss = loss + ce_dice_loss(model.head_gif(latent, hw), gif_target, model.profile.gif_classes)
    return loss


# ---------------------------------------------------------------------------
# Slab batching helpers
# ---------------------------------------------------------------------------


class FakePool:
    """History buffer of generated slabs for discriminator updates.

    Mixing current fakes with past ones damps generator/discriminator
    oscillation (standard unpaired-translation practice)."""

    def __init__(self, capacity: int = 50, seed: int = 0):
        self.capacity = capacity
        self.items: list[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return batch
        out = []
        for i in range(batch.shape[0]):
            img = batch[i : i + 1].detach()
            if len(self.items) < self.capacity:
                self.items.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                k = int(self.rng.integers(len(self.items)))
                out.append(self.items[k])
                self.items[k] = img.clone()
            else:
                out.append(img)
        return torch.cat(out, dim=0)


def slabs_to_tensor(slabs: list[Slab], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.channels for s in slabs])).to(dtype)


def center_masks_to_tensor(slabs: list[Slab], name: str) -> torch.Tensor | None:
    if any(name not in s.masks for s in slabs):
        return None
    return torch.from_numpy(np.stack([s.center_mask(name) for s in slabs]).astype(np.int64))


# ---------------------------------------------------------------------------
# Training and volume translation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MsfnetTrainConfig:
    epochs: int = 1000
    lr: float = 2e-4
    batch_size: int = 1
    seed: int = 0
    profile: str = "default"
    betas: tuple[float, float] = (0.5, 0.999)
    ablate_vs: bool = False
    ablate_gif: bool = False
    perceptual_provider: str = "random"
    perceptual_seed: int = 0
    vgg_weights: str | None = None
    fake_pool: int = 50
    checkpoint_path: str | None = None
    curves_path: str | None = None
    checkpoint_every: int = 1


def train_msfnet(
    data1: list[Slab],
    data2: list[Slab],
    w: LossWeights = LossWeights(),
    cfg: MsfnetTrainConfig = MsfnetTrainConfig(),
    model: TranslationModel | None = None,
) -> tuple[TranslationModel, list[tuple[int, str, float]]]:
    """Alternating discriminator/generator optimization.

    data1 slabs carry masks (annotated modality), data2 slabs are unlabeled.
    Returns the model and per-epoch loss curves as (epoch, name, value).
    """
    if not data1 or not data2:
        raise ValidationError("both modality slab sets must be non-empty")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = build_model(cfg.profile, seed=cfg.seed)
    extractor = make_feature_extractor(cfg.perceptual_provider, cfg.perceptual_seed, cfg.vgg_weights)
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.lr, betas=cfg.betas)
    rng = np.random.default_rng(cfg.seed)
    use_proxy = w.proxy > 0 and not (cfg.ablate_vs and cfg.ablate_gif)
    pool12 = FakePool(cfg.fake_pool, seed=cfg.seed)
    pool21 = FakePool(cfg.fake_pool, seed=cfg.seed + 1)

    curves: list[tuple[int, str, float]] = []
    last_checkpoint = None
    n_steps = max(len(data1), len(data2))
    for epoch in range(cfg.epochs):
        idx1 = rng.permutation(len(data1))
        idx2 = rng.permutation(len(data2))
        sums: dict[str, float] = {}
        count = 0
        for start in range(0, n_steps, cfg.batch_size):
            take = range(start, min(start + cfg.batch_size, n_steps))
            batch1 = [data1[idx1[k % len(data1)]] for k in take]
            batch2 = [data2[idx2[k % len(data2)]] for k in take]
            s1 = slabs_to_tensor(batch1)
            s2 = slabs_to_tensor(batch2)

            lat1 = model.encoder(s1)
            lat2 = model.encoder(s2)
            recon1 = model.decoder_t1(lat1)
            recon2 = model.decoder_t2(lat2)
            fake12 = model.decoder_t2(lat1)
            fake21 = model.decoder_t1(lat2)

            loss_d = discriminator_loss(model, s1, s2, pool12.query(fake12), pool21.query(fake21))
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            # generator terms score against the freshly updated discriminators
            loss_g_adv = generator_adversarial_loss(model, fake12, fake21)
            loss_rec = reconstruction_loss(recon1, s1, recon2, s2, extractor, w)
            loss_cyc = cycle_loss(model, s1, s2)
            loss_total = loss_rec + w.adversarial * loss_g_adv + w.cycle * loss_cyc
            parts = {"rec": loss_rec, "adv_d": loss_d, "adv_g": loss_g_adv, "cyc": loss_cyc}
            if use_proxy:
                vs_t = center_masks_to_tensor(batch1, "vs")
                gif_t = center_masks_to_tensor(batch1, "gif")
                include_vs = not cfg.ablate_vs and vs_t is not None
                include_gif = not cfg.ablate_gif and gif_t is not None
                if include_vs or include_gif:
                    loss_proxy = proxy_seg_loss(model, s1, vs_t, gif_t, include_vs, include_gif)
                    loss_total = loss_total + w.proxy * loss_proxy
                    parts["proxy"] = loss_proxy
            opt_g.zero_grad(set_to_none=True)
            loss_total.backward()
            opt_g.step()
            parts["total_g"] = loss_total

            if not torch.isfinite(loss_total) or not torch.isfinite(loss_d):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}", checkpoint=last_checkpoint
                )
            for name, value in parts.items():
                sums[name] = sums.get(name, 0.0) + value.detach().item()
            count += 1

        for name, total in sorted(sums.items()):
            curves.append((epoch, name, total / count))
        if cfg.checkpoint_path and (epoch + 1) % cfg.checkpoint_every == 0:
            save_msfnet(cfg.checkpoint_path, model, w, cfg, epoch)
            last_checkpoint = cfg.checkpoint_path

    if cfg.checkpoint_path:
        save_msfnet(cfg.checkpoint_path, model, w, cfg, cfg.epochs - 1)
    if cfg.curves_path:
        write_curves(curves, cfg.curves_path)
    return model, curves


def write_curves(curves, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss_name", "value"])
        for epoch, name, value in curves:
            writer.writerow([epoch, name, f"{value:.8f}"])


def save_msfnet(path, model: TranslationModel, w: LossWeights, cfg, epoch: int) -> None:
    manifest = {
        "kind": "msfnet",
        "profile": asdict(model.profile),
        "loss_weights": asdict(w),
        "epoch": epoch,
        "seed": getattr(cfg, "seed", 0),
        "ablate_vs": getattr(cfg, "ablate_vs", False),
        "ablate_gif": getattr(cfg, "ablate_gif", False),
    }
    save_checkpoint(path, state_dict_tensors(model), manifest)


def load_msfnet(path) -> tuple[TranslationModel, dict]:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != "msfnet":
        raise VolumeIOError(f"{path} is not a translation checkpoint (kind={manifest.get('kind')})")
    profile = ArchProfile(**manifest["profile"])
    model = TranslationModel(profile)
    load_state_into(model, tensors)
    return model, manifest


def translate(model: TranslationModel, vol: Volume, direction: str,
              batch_size: int = 16) -> Volume:
    """Translate a volume slab-by-slab and reassemble center slices."""
    _parse_direction(direction)
    slabs = volume_slabs(vol, stride=1)
    out_slices = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(slabs), batch_size):
            x = slabs_to_tensor(slabs[start : start + batch_size])
            y = model.translate_batch(x, direction)
            out_slices.append(y[:, 1].cpu().numpy())
    data = np.concatenate(out_slices, axis=0).astype(np.float32)
    target = Modality.T2 if direction == "t1_to_t2" else Modality.T1
    return Volume(data, vol.spacing, vol.origin, target)

"""Finite-difference gradient suite: every training loss on a tiny profile
in double precision, autograd vs central differences."""

import numpy as np
import pytest
import torch

from msfusion import msfnet, segment
from msfusion.msfnet import LossWeights, RandomConvFeatures, build_model

from oracles import gradient_relative_error

TOL = 1e-4
# small enough in float64 that FD perturbations do not straddle L1 kinks
H = 1e-6


@pytest.fixture()
def tiny():
    model = build_model("tiny", seed=7).double()
    gen = torch.Generator().manual_seed(42)
    s1 = torch.randn(1, 3, 8, 8, generator=gen).double()
    s2 = torch.randn(1, 3, 8, 8, generator=gen).double()
    return model, s1, s2


def gen_params(model):
    return [p for p in model.generator_parameters() if p.requires_grad]


def test_reconstruction_with_perceptual(tiny):
    model, s1, s2 = tiny
    extractor = RandomConvFeatures(seed=3, widths=(4, 8)).double()
    w = LossWeights(lambda_r=10.0, lambda_p=0.5)

    def loss_fn():
        lat1, lat2 = model.encoder(s1), model.encoder(s2)
        return msfnet.reconstruction_loss(
            model.decoder_t1(lat1), s1, model.decoder_t2(lat2), s2, extractor, w
        )

    assert gradient_relative_error(loss_fn, gen_params(model), H) <= TOL


def test_adversarial_discriminator_split(tiny):
    model, s1, s2 = tiny
    with torch.no_grad():
        fake12 = model.decoder_t2(model.encoder(s1))
        fake21 = model.decoder_t1(model.encoder(s2))

    def loss_fn():
        return msfnet.discriminator_loss(model, s1, s2, fake12, fake21)

    params = [p for p in model.discriminator_parameters() if p.requires_grad]
    assert gradient_relative_error(loss_fn, params, H) <= TOL


def test_adversarial_generator_split(tiny):
    model, s1, s2 = tiny

    def loss_fn():
        fake12 = model.decoder_t2(model.encoder(s1))
        fake21 = model.decoder_t1(model.encoder(s2))
        return msfnet.generator_adversarial_loss(model, fake12, fake21)

    assert gradient_relative_error(loss_fn, gen_params(model), H) <= TOL


def test_cycle(tiny):
    model, s1, s2 = tiny

    def loss_fn():
        return msfnet.cycle_loss(model, s1, s2)

    assert gradient_relative_error(loss_fn, gen_params(model), H) <= TOL


def test_proxy_ce_dice(tiny):
    model, s1, _ = tiny
    gen = torch.Generator().manual_seed(5)
    vs = torch.randint(0, 3, (1, 8, 8), generator=gen)
    gif = torch.randint(0, 5, (1, 8, 8), generator=gen)

    def loss_fn():
        return msfnet.proxy_seg_loss(model, s1, vs, gif)

    assert gradient_relative_error(loss_fn, gen_params(model), H) <= TOL


def test_segmentation_ce_dice():
    torch.manual_seed(0)
    model = segment.build_seg_model("tiny", seed=0).double()
    n_params = sum(p.numel() for p in model.parameters())
    assert n_params <= 1500  # tiny U-Net profile
    gen = torch.Generator().manual_seed(9)
    x = torch.randn(1, 3, 8, 8, generator=gen).double()
    y = torch.randint(0, 3, (1, 8, 8), generator=gen)

    def loss_fn():
        return msfnet.ce_dice_loss(model(x), y, 3)

    params = [p for p in model.parameters() if p.requires_grad]
    assert gradient_relative_error(loss_fn, params, H) <= TOL


def test_contrastive_losses_tight_tolerance():
    from msfusion.contrastive import EmbeddingBatch, loss_self, loss_sup

    rng = np.random.default_rng(11)
    z1 = torch.tensor(rng.standard_normal((4, 6)), requires_grad=True)
    z2 = torch.tensor(rng.standard_normal((4, 6)), requires_grad=True)
    grades = torch.tensor([1, 2, 2, 4])

    def self_fn():
        return loss_self(EmbeddingBatch(z1, z2, tau=0.2))

    def sup_fn():
        return loss_sup(EmbeddingBatch(z1, z2, grades=grades, tau=0.2))

    assert gradient_relative_error(self_fn, [z1, z2], h=1e-6) <= 1e-6
    assert gradient_relative_error(sup_fn, [z1, z2], h=1e-6) <= 1e-6


import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scftcolor.losses import (
    ConfigurationError,
    FeatureNet,
    LossWeights,
    adversarial_losses,
    batch_triplet_loss,
    discriminator_loss,
    generator_adv_loss,
    gram,
    perceptual_and_style,
    perceptual_loss,
    reconstruction_loss,
    similarity,
    style_loss,
    total_generator_loss,
    triplet_loss,
    vgg19_features,
)

from test_attention import central_difference, max_rel_error


def toy_net(kernel):
    conv = torch.nn.Conv2d(3, 1, 3, bias=False)
    with torch.no_grad():
        conv.weight.copy_(torch.as_tensor(kernel, dtype=torch.float32))
    # mean 0 / std 1 turns the [-1, 1] -> [0, 1] renormalization into (x + 1) / 2
    return FeatureNet(torch.nn.Sequential(conv), {"l": 0}, mean=(0, 0, 0), std=(1, 1, 1))


def conv_oracle(img, kernel):
    c, h, w = img.shape
    out = np.zeros((h - 2, w - 2))
    for i in range(h - 2):
        for j in range(w - 2):
            out[i, j] = np.sum(img[:, i:i + 3, j:j + 3] * kernel[0])
    return out


class TestTriplet:
    def test_hinge_boundary(self):
        q = torch.tensor([[12.0, 0, 0, 0]])
        kp = torch.tensor([[2.0, 0, 0, 0]])  # S = 24 / 2 = 12
        kn = torch.zeros(1, 4)
        assert triplet_loss(q, kp, kn, 12.0).item() == 0.0

    def test_equal_keys_give_margin(self):
        q, k = torch.randn(5, 8), torch.randn(5, 8)
        assert torch.allclose(triplet_loss(q, k, k, 12.0), torch.full((5,), 12.0))

    def test_scalar_example(self):
        q = torch.tensor([2.0, 0, 0, 0])
        kp = torch.tensor([2.0, 0, 0, 0])
        kn = torch.tensor([0.0, 2, 0, 0])
        assert similarity(q, kp).item() == 2.0
        assert similarity(q, kn).item() == 0.0
        assert triplet_loss(q, kp, kn, 12.0).item() == 10.0

    def test_gradient_finite_difference(self):
        g = torch.Generator().manual_seed(3)
        q, kp, kn = (torch.randn(6, 8, generator=g, dtype=torch.float64).requires_grad_() for _ in range(3))
        loss = lambda: triplet_loss(q, kp, kn, 2.0).sum()
        loss().backward()
        with torch.no_grad():
            for t in (q, kp, kn):
                assert max_rel_error(t.grad, central_difference(loss, t)) < 1e-4

    def test_batch_skips_empty(self):
        queries, keys = torch.randn(2, 4, 6), torch.randn(2, 4, 6)
        empty = (np.zeros(0, int),) * 3
        one = (np.array([0, 1]), np.array([2, 3]), np.array([4, 5]))
        expected = triplet_loss(queries[1][:, [0, 1]].T, keys[1][:, [2, 3]].T, keys[1][:, [4, 5]].T, 12.0).mean()
        assert torch.allclose(batch_triplet_loss(queries, keys, [empty, one]), expected)
        assert batch_triplet_loss(queries, keys, [empty, empty]).item() == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0, 20))
    def test_nonnegative(self, seed, gamma):
        g = torch.Generator().manual_seed(seed)
        assert torch.all(triplet_loss(*(torch.randn(4, 5, generator=g) for _ in range(3)), gamma) >= 0)


class TestReconstructionAdversarial:
    def test_rec_cases(self, rng):
        a = torch.from_numpy(rng.random((2, 3, 5, 5)))
        assert reconstruction_loss(a, a).item() == 0.0
        assert reconstruction_loss(a + 0.5, a).item() == pytest.approx(0.5, abs=1e-12)
        b = torch.from_numpy(rng.random((2, 3, 5, 5)))
        total = 0.0
        for x, y in zip(a.numpy().ravel(), b.numpy().ravel()):
            total += abs(x - y)
        assert reconstruction_loss(a, b).item() == pytest.approx(total / a.numel(), abs=1e-7)
        with pytest.raises(ValueError):
            reconstruction_loss(a, b[:1])

    def test_lsgan_cases(self):
        ones, zeros, half = torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4), torch.full((2, 1, 4, 4), 0.5)
        assert discriminator_loss(ones, zeros).item() == 0.0
        assert generator_adv_loss(ones).item() == 0.0
        d, g = adversarial_losses(half, half)
        assert d.item() == 0.5 and g.item() == 0.25

    def test_bce_switch(self):
        big = torch.full((1, 1, 2, 2), 50.0)
        d, g = adversarial_losses(big, -big, "bce")
        assert d.item() < 1e-6 and g.item() > 10
        with pytest.raises(ValueError):
            adversarial_losses(big, big, "wgan")


class TestFeatureLosses:
    def test_toy_perceptual_oracle(self, rng):
        kernel = rng.normal(size=(1, 3, 3, 3))
        net = toy_net(kernel)
        a, b = rng.uniform(-1, 1, (3, 8, 9)), rng.uniform(-1, 1, (3, 8, 9))
        got = perceptual_loss(torch.tensor(a[None], dtype=torch.float32), torch.tensor(b[None], dtype=torch.float32), net, ("l",))
        fa, fb = conv_oracle((a + 1) / 2, kernel), conv_oracle((b + 1) / 2, kernel)
        assert got.item() == pytest.approx(np.abs(fa - fb).mean(), abs=1e-6)

    def test_zero_and_symmetric(self, rng):
        net = toy_net(rng.normal(size=(1, 3, 3, 3)))
        a, b = torch.rand(1, 3, 8, 8) * 2 - 1, torch.rand(1, 3, 8, 8) * 2 - 1
        assert perceptual_loss(a, a, net, ("l",)).item() == 0.0
        assert perceptual_loss(a, b, net, ("l",)).item() == pytest.approx(perceptual_loss(b, a, net, ("l",)).item())
        assert style_loss(a, a, net, ("l",)).item() == 0.0

    def test_gram_toy(self):
        feat = torch.tensor([[[[1.0, 0], [0, 0]], [[0, 1.0], [0, 0]]]])
        assert torch.equal(gram(feat), torch.tensor([[[0.25, 0.0], [0.0, 0.25]]]))

    def test_gram_psd(self):
        g = gram(torch.randn(2, 5, 4, 3, dtype=torch.float64))
        assert torch.allclose(g, g.transpose(1, 2))
        assert torch.linalg.eigvalsh(g).min() > -1e-12

    def test_feature_net_frozen(self):
        net = vgg19_features(allow_random=True)
        assert not any(p.requires_grad for p in net.parameters())
        net.train()
        assert not net.training
        assert len(net.body) == 30

    def test_combined_matches_separate(self):
        net = vgg19_features(allow_random=True)
        a, b = torch.rand(1, 3, 32, 32) * 2 - 1, torch.rand(1, 3, 32, 32) * 2 - 1
        perc, style = perceptual_and_style(a, b, net)
        assert torch.allclose(perc, perceptual_loss(a, b, net))
        assert torch.allclose(style, style_loss(a, b, net))

    def test_missing_weights(self, tmp_path):
        with pytest.raises(ConfigurationError):
            vgg19_features()
        with pytest.raises(ConfigurationError):
            vgg19_features(tmp_path / "absent.pth")
        with pytest.raises(ConfigurationError):
            perceptual_loss(torch.zeros(1), torch.zeros(1), None)

    def test_state_dict_roundtrip(self, tmp_path):
        from torchvision.models.vgg import cfgs, make_layers

        torch.manual_seed(0)
        features = make_layers(cfgs["E"])
        torch.save({f"features.{k}": v for k, v in features.state_dict().items()}, tmp_path / "vgg.pth")
        net = vgg19_features(tmp_path / "vgg.pth")
        assert torch.equal(net.body[0].weight, features[0].weight)


class TestTotal:
    def test_zero(self):
        assert total_generator_loss(dict.fromkeys(("tr", "rec", "adv", "perc", "style"), 0.0), LossWeights()) == 0

    def test_default_weights(self):
        total = total_generator_loss(dict.fromkeys(("tr", "rec", "adv", "perc", "style"), 1.0), LossWeights())
        assert total == pytest.approx(82.01, abs=1e-12)

    def test_linearity(self):
        terms = {"tr": 0.3, "rec": 0.7, "adv": 1.1, "perc": 2.0, "style": 0.01}
        base = total_generator_loss(terms, LossWeights())
        doubled = total_generator_loss(terms, LossWeights(lambda_rec=60.0))
        assert doubled - base == pytest.approx(30 * 0.7)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_rec=-1)

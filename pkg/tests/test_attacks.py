from dataclasses import replace

import numpy as np
import pytest

from viscotbench.attacks import (
    ATTACK_PRESETS,
    AttackKind,
    apply_attack,
    attack_preset,
    bim,
    cw,
    fgsm,
    pgd,
)
from viscotbench.encoder import ToyEncoder, mse_embed_loss
from viscotbench.errors import PresetError
from viscotbench.imagecore import make_rng


class ScalarLinearEncoder:
    """e(x) = [sum(a * x)] with a fixed random weight tensor."""

    def __init__(self, shape, seed=0):
        self.weights = make_rng(seed).standard_normal(shape)
        self.embed_dim = 1

    def embed(self, img):
        return np.array([np.sum(self.weights * img)])

    def grad_input(self, img, reference, loss="mse"):
        z = self.embed(img)
        return 2.0 * (z[0] - reference[0]) * self.weights


@pytest.fixture(scope="module")
def enc():
    return ToyEncoder()


@pytest.fixture
def img():
    return make_rng(50).random((16, 16, 3))


class TestPresets:
    def test_fgsm_epsilons(self):
        eps = [row["epsilon"] for row in ATTACK_PRESETS[AttackKind.FGSM]]
        np.testing.assert_allclose(eps, np.array([1, 2, 4, 6, 8]) / 255.0)

    def test_bim_severity3(self):
        cfg = attack_preset("bim", 3)
        assert (cfg.epsilon, cfg.alpha, cfg.iters) == (4 / 255, 0.8 / 255, 300)

    def test_pgd_severity5(self):
        cfg = attack_preset("pgd", 5)
        assert (cfg.epsilon, cfg.alpha, cfg.iters) == (8 / 255, 1.2 / 255, 500)

    def test_cw_severity3_and_5(self):
        cfg3 = attack_preset("cw", 3)
        assert (cfg3.c_weight, cfg3.lr, cfg3.iters) == (1.0, 5e-4, 300)
        cfg5 = attack_preset("cw", 5)
        assert (cfg5.c_weight, cfg5.lr, cfg5.iters) == (5.0, 1e-4, 500)

    def test_unused_fields_absent(self):
        assert attack_preset("fgsm", 1).iters is None
        assert attack_preset("cw", 1).epsilon is None

    def test_bad_kind_and_level(self):
        with pytest.raises(PresetError):
            attack_preset("deepfool", 1)
        with pytest.raises(PresetError):
            attack_preset("fgsm", 0)


class TestFgsm:
    def test_zero_epsilon_identity(self, enc, img):
        cfg = replace(attack_preset("fgsm", 1), epsilon=0.0)
        np.testing.assert_array_equal(fgsm(img, enc, cfg, make_rng(1)), img)

    def test_interior_pixels_move_exactly_epsilon(self):
        # closed-form gradient sign oracle on a linear scalar encoder
        shape = (8, 8, 3)
        lin = ScalarLinearEncoder(shape, seed=3)
        img = 0.2 + 0.6 * make_rng(4).random(shape)
        cfg = attack_preset("fgsm", 3)
        out = fgsm(img, lin, cfg, make_rng(5))
        np.testing.assert_allclose(np.abs(out - img), cfg.epsilon, rtol=0, atol=1e-15)

    def test_symmetry_break_gives_nonzero_perturbation(self, enc):
        flat = np.full((16, 16, 3), 0.5)
        out = fgsm(flat, enc, attack_preset("fgsm", 2), make_rng(6))
        assert np.abs(out - flat).max() > 0

    def test_budget(self, enc, img):
        cfg = attack_preset("fgsm", 4)
        out = fgsm(img, enc, cfg, make_rng(7))
        assert np.abs(out - img).max() <= cfg.epsilon + 1e-9


class TestBim:
    def test_zero_iters_identity(self, enc, img):
        cfg = replace(attack_preset("bim", 1), iters=0)
        np.testing.assert_array_equal(bim(img, enc, cfg, make_rng(1)), img)

    def test_loss_trace_ascends(self, enc, img):
        # recorded loss trace oracle: the final loss beats the loss after
        # the first step
        result = apply_attack(img, enc, "bim", 1, seed=11)
        assert len(result.losses) == attack_preset("bim", 1).iters + 1
        assert result.losses[-1] >= result.losses[1]

    def test_budget_and_range(self, enc, img):
        cfg = attack_preset("bim", 3)
        out = bim(img, enc, cfg, make_rng(12))
        assert np.abs(out - img).max() <= cfg.epsilon + 1e-9
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestPgd:
    def test_zero_epsilon_identity(self, enc, img):
        cfg = replace(attack_preset("pgd", 1), epsilon=0.0)
        np.testing.assert_array_equal(pgd(img, enc, cfg, make_rng(1)), img)

    def test_budget_across_severities(self, enc):
        # exhaustive constraint scan (full 500-case sweep in acceptance)
        for case in range(20):
            x = make_rng(1000 + case).random((8, 8, 3))
            level = case % 5 + 1
            cfg = attack_preset("pgd", level)
            out = pgd(x, enc, cfg, make_rng(2000 + case))
            assert np.abs(out - x).max() <= cfg.epsilon + 1e-9
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestCw:
    def test_zero_iters_is_tanh_roundtrip(self, enc, img):
        cfg = replace(attack_preset("cw", 1), iters=0)
        out = cw(img, enc, cfg)
        assert np.abs(out - img).max() < 1.001e-6

    def test_loss_increases_at_severity2(self, enc, img):
        result = apply_attack(img, enc, "cw", 2)
        assert result.losses[-1] > result.losses[0]

    def test_output_strictly_inside_unit_interval(self, enc, img):
        out = cw(img, enc, attack_preset("cw", 4))
        assert out.min() > 0.0 and out.max() < 1.0

    def test_fully_deterministic(self, enc, img):
        a = cw(img, enc, attack_preset("cw", 2))
        b = cw(img, enc, attack_preset("cw", 2))
        np.testing.assert_array_equal(a, b)

    def test_literal_sign_returns_near_input(self, enc, img):
        out = cw(img, enc, attack_preset("cw", 3), literal_sign=True)
        assert np.abs(out - img).max() < 1e-4


class TestApplyAttack:
    def test_fgsm_level1_config(self, enc, img):
        result = apply_attack(img, enc, "fgsm", 1, seed=1)
        assert result.config.epsilon == 1 / 255

    def test_cw_level5_config(self, enc, img):
        result = apply_attack(img, enc, "cw", 5)
        cfg = result.config
        assert (cfg.c_weight, cfg.lr, cfg.iters) == (5.0, 1e-4, 500)

    @pytest.mark.parametrize("kind", ["fgsm", "bim", "pgd", "cw"])
    def test_same_seed_identical(self, enc, img, kind):
        a = apply_attack(img, enc, kind, 2, seed=77)
        b = apply_attack(img, enc, kind, 2, seed=77)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.losses == b.losses

    def test_records_norms(self, enc, img):
        result = apply_attack(img, enc, "pgd", 3, seed=5)
        diff = result.image - img
        assert result.linf == pytest.approx(np.abs(diff).max())
        assert result.l2 == pytest.approx(np.sqrt((diff**2).sum()))
        assert result.seed == 5

    def test_unknown_kind(self, enc, img):
        with pytest.raises(PresetError):
            apply_attack(img, enc, "jsma", 1)


class TestEffectiveness:
    def test_pgd_loss_grows_with_severity(self, enc):
        batch = [make_rng(3000 + i).random((16, 16, 3)) for i in range(8)]
        means = []
        for level in (1, 3, 5):
            losses = []
            for i, x in enumerate(batch):
                res = apply_attack(x, enc, "pgd", level, seed=i)
                losses.append(mse_embed_loss(enc.embed(res.image), enc.embed(x)))
            means.append(np.mean(losses))
        assert means[0] < means[1] < means[2]

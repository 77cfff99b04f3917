import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_grads
from pretram import diffcore as dc
from pretram.diffcore import Tensor
from pretram.errors import ShapeError
from pretram.model import ModelConfig, PreTraMModel
from pretram.objectives import (
    MODE_CE_WEIGHT,
    ContrastiveBatch,
    make_mtm_mask,
    masked_mse,
    mcl_loss,
    mode_errors,
    mtm_loss,
    prediction_loss,
    pretram_loss,
    tmcl_loss,
)


@pytest.fixture(autouse=True)
def float64():
    with dc.precision(np.float64):
        yield


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def infonce_oracle(a, b, tau):
    """-1/N sum_i log( exp(a_i.b_i / tau) / sum_j exp(a_i.b_j / tau) ), one scalar at a time."""
    n = len(a)
    total = 0.0
    for i in range(n):
        sims = [math.fsum(a[i][k] * b[j][k] for k in range(len(a[i]))) / tau for j in range(n)]
        top = max(sims)
        denom = math.fsum(math.exp(s - top) for s in sims)
        total += -(sims[i] - top - math.log(denom))
    return total / n


def ls(tau):
    return Tensor(np.array(math.log(1 / tau)))


class TestTmcl:
    def test_matches_brute_force_on_100_batches(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(2, 17))
            tau = float(rng.uniform(0.05, 1.0))
            t, m = unit_rows(rng, n, 5), unit_rows(rng, n, 5)
            got = tmcl_loss(Tensor(t), Tensor(m), ls(tau)).item()
            want = 0.5 * (infonce_oracle(t, m, tau) + infonce_oracle(m, t, tau))
            worst = max(worst, abs(got - want))
        assert worst < 1e-10

    def test_single_pair_is_zero(self):
        t = unit_rows(np.random.default_rng(1), 1, 4)
        assert tmcl_loss(Tensor(t), Tensor(t), ls(0.07)).item() == 0.0

    def test_identical_embeddings_give_log_n(self):
        e = np.tile(unit_rows(np.random.default_rng(2), 1, 6), (4, 1))
        assert tmcl_loss(Tensor(e), Tensor(e), ls(0.07)).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_symmetric_in_roles(self):
        rng = np.random.default_rng(3)
        t, m = unit_rows(rng, 7, 4), unit_rows(rng, 7, 4)
        a = tmcl_loss(Tensor(t), Tensor(m), ls(0.2)).item()
        b = tmcl_loss(Tensor(m), Tensor(t), ls(0.2)).item()
        assert a == pytest.approx(b, abs=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tmcl_loss(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))), ls(0.1))


class TestMcl:
    def test_matches_brute_force_on_100_batches(self):
        rng = np.random.default_rng(10)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(2, 17))
            tau = float(rng.uniform(0.05, 1.0))
            a, b = unit_rows(rng, n, 5), unit_rows(rng, n, 5)
            worst = max(worst, abs(mcl_loss(Tensor(a), Tensor(b), ls(tau)).item() - infonce_oracle(a, b, tau)))
        assert worst < 1e-10

    def test_identical_rows_give_log_n(self):
        e = np.tile(unit_rows(np.random.default_rng(4), 1, 3), (8, 1))
        assert mcl_loss(Tensor(e), Tensor(e), ls(0.07)).item() == pytest.approx(math.log(8), abs=1e-12)

    def test_identical_passes_diagonal_dominant(self):
        a = unit_rows(np.random.default_rng(5), 8, 64)
        assert mcl_loss(Tensor(a), Tensor(a), ls(0.07)).item() < math.log(8)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            mcl_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), ls(0.1))

    def test_one_directional(self):
        rng = np.random.default_rng(6)
        a, b = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
        assert mcl_loss(Tensor(a), Tensor(b), ls(0.1)).item() != pytest.approx(mcl_loss(Tensor(b), Tensor(a), ls(0.1)).item())


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(2, 12), seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
    def test_permutation_scale_and_bounds(self, n, seed, scale):
        rng = np.random.default_rng(seed)
        raw_t, raw_m = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))

        def losses(rt, rm):
            t = dc.l2_normalize(Tensor(rt))
            m = dc.l2_normalize(Tensor(rm))
            return tmcl_loss(t, m, ls(0.1)).item(), mcl_loss(t, m, ls(0.1)).item()

        base = losses(raw_t, raw_m)
        perm = rng.permutation(n)
        for got, want in zip(losses(raw_t[perm], raw_m[perm]), base):
            assert abs(got - want) <= 1e-12 * max(1.0, abs(want))
        for got, want in zip(losses(scale * raw_t, scale * raw_m), base):
            assert abs(got - want) <= 1e-6
        assert min(base) >= 0.0


class TestCombined:
    def _batch(self, rng, n=5, m=6, d=4):
        return ContrastiveBatch(
            Tensor(unit_rows(rng, n, d)), Tensor(unit_rows(rng, n, d)),
            Tensor(unit_rows(rng, m, d)), Tensor(unit_rows(rng, m, d)), ls(0.1), ls(0.2),
        )

    def test_lambda_zero_is_tmcl(self):
        b = self._batch(np.random.default_rng(0))
        assert pretram_loss(b, 0.0).item() == tmcl_loss(b.traj_embeds, b.map_embeds, b.logit_scale_traj).item()

    def test_lambda_one_is_sum(self):
        b = self._batch(np.random.default_rng(1))
        t = tmcl_loss(b.traj_embeds, b.map_embeds, b.logit_scale_traj).item()
        m = mcl_loss(b.mcl_embeds_a, b.mcl_embeds_b, b.logit_scale_map).item()
        assert pretram_loss(b, 1.0).item() == pytest.approx(t + m, abs=1e-14)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            pretram_loss(self._batch(np.random.default_rng(2)), -0.1)

    def test_gradient_is_sum_of_component_gradients(self):
        rng = np.random.default_rng(3)
        raw = [rng.normal(size=(4, 3)) for _ in range(4)] + [np.array(2.0), np.array(1.5)]

        def combined(t, m, a, b, st_, sm):
            norm = dc.l2_normalize
            return pretram_loss(ContrastiveBatch(norm(t), norm(m), norm(a), norm(b), st_, sm), 0.7)

        assert check_grads(combined, raw) < 1e-4
        leaves = [Tensor(r.copy(), requires_grad=True) for r in raw]
        combined(*leaves).backward()
        parts = [Tensor(r.copy(), requires_grad=True) for r in raw]
        norm = dc.l2_normalize
        total = dc.add(
            tmcl_loss(norm(parts[0]), norm(parts[1]), parts[4]),
            dc.scale(mcl_loss(norm(parts[2]), norm(parts[3]), parts[5]), 0.7),
        )
        total.backward()
        for a, b in zip(leaves, parts):
            np.testing.assert_allclose(a.grad, b.grad, rtol=1e-12, atol=1e-14)

    def test_gradient_reaches_both_encoders(self):
        cfg = ModelConfig(context_px=16, channels=(4, 4), d_m=8, traj_width=8, d_t=8, d_e=4, dtype="float64")
        model = PreTraMModel(cfg, seed=0)
        rng = np.random.default_rng(0)
        patches = rng.integers(0, 256, (4, 16, 16, 3)).astype(np.uint8)
        rows = rng.normal(size=(4, 5, 6))
        batch = ContrastiveBatch(
            model.project(model.encode_trajectory(rows), "traj"),
            model.project(model.encode_map(patches, 1, True), "map"),
            model.project(model.encode_map(patches, 2, True), "mcl"),
            model.project(model.encode_map(patches, 3, True), "mcl"),
            model.heads.logit_scale_traj,
            model.heads.logit_scale_map,
        )
        pretram_loss(batch).backward()
        for group in ("map_encoder", "traj_encoder"):
            assert any(np.any(p.grad != 0) for p in model.parameters(group))
        assert np.all(model.heads.logit_scale_map.grad != 0)


class TestMtm:
    def test_mask_has_masked_and_visible_steps(self):
        rng = np.random.default_rng(0)
        for ratio in (1e-9, 0.3, 1 - 1e-9):
            mask = make_mtm_mask(200, 5, ratio, rng)
            assert np.all(mask.any(axis=1)) and np.all((~mask).any(axis=1))

    def test_tiny_ratio_masks_exactly_one_step(self):
        mask = make_mtm_mask(50, 5, 1e-12, np.random.default_rng(1))
        assert np.all(mask.sum(axis=1) == 1)

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            make_mtm_mask(2, 5, 0.0, np.random.default_rng(0))

    def test_masked_mse_matches_direct_oracle(self):
        rng = np.random.default_rng(2)
        pred, target = rng.normal(size=(3, 5, 3)), rng.normal(size=(3, 5, 3))
        mask = rng.random((3, 5)) < 0.4
        mask[0, 0] = True
        sq = [(pred[i, t, f] - target[i, t, f]) ** 2 for i in range(3) for t in range(5) for f in range(3) if mask[i, t]]
        assert masked_mse(Tensor(pred), target, mask).item() == pytest.approx(sum(sq) / len(sq), rel=1e-12)

    def test_perfect_reconstruction_of_constant_trajectory(self):
        cfg = ModelConfig(context_px=16, channels=(4,), d_m=8, traj_width=8, d_t=8, mtm_hidden=4, dtype="float64")
        model = PreTraMModel(cfg)
        rows = np.zeros((3, 5, 6))
        rows[..., :2] = [4.0, -2.0]
        rows[..., 2] = 1.0
        rows[..., 4] = 3.0
        model.mtm_head.fc1.weight.data[...] = 0
        model.mtm_head.fc1.bias.data[...] = np.tile(np.array([4.0, -2.0, 3.0]) / cfg.coord_scale, 5)
        assert mtm_loss(model, rows, 0.3, seed=0).item() == pytest.approx(0.0, abs=1e-20)

    def test_gradient_reaches_trajectory_encoder(self):
        cfg = ModelConfig(context_px=16, channels=(4,), d_m=8, traj_width=8, d_t=8, mtm_hidden=32, dtype="float64")
        model = PreTraMModel(cfg)
        mtm_loss(model, np.random.default_rng(0).normal(size=(4, 5, 6)), 0.3, seed=1).backward()
        assert any(np.any(p.grad != 0) for p in model.parameters("traj_encoder"))


class TestPredictionLoss:
    def test_exact_mode_zeroes_regression(self):
        rng = np.random.default_rng(0)
        gt = rng.normal(size=(2, 6, 2))
        traj = rng.normal(size=(2, 3, 6, 2))
        traj[:, 1] = gt
        logits = np.zeros((2, 3))
        loss = prediction_loss(Tensor(traj), Tensor(logits), gt).item()
        assert loss == pytest.approx(MODE_CE_WEIGHT * math.log(3), abs=1e-12)

    def test_single_mode_is_mean_l2(self):
        rng = np.random.default_rng(1)
        gt = rng.normal(size=(4, 6, 2))
        traj = rng.normal(size=(4, 1, 6, 2))
        want = np.linalg.norm(traj[:, 0] - gt, axis=-1).mean()
        assert prediction_loss(Tensor(traj), Tensor(rng.normal(size=(4, 1))), gt).item() == pytest.approx(want, rel=1e-12)

    def test_best_mode_matches_brute_force(self):
        rng = np.random.default_rng(2)
        gt = rng.normal(size=(5, 4, 2))
        traj = rng.normal(size=(5, 6, 4, 2))
        errs = mode_errors(traj, gt)
        for i in range(5):
            brute = min(range(6), key=lambda k: sum(math.dist(traj[i, k, t], gt[i, t]) for t in range(4)))
            assert int(np.argmin(errs[i])) == brute

    def test_gradient(self):
        rng = np.random.default_rng(3)
        gt = rng.normal(size=(2, 3, 2))
        assert check_grads(lambda t, z: prediction_loss(t, z, gt), [rng.normal(size=(2, 4, 3, 2)), rng.normal(size=(2, 4))]) < 1e-4

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            prediction_loss(Tensor(np.zeros((2, 3, 4, 2))), Tensor(np.zeros((2, 3))), np.zeros((2, 5, 2)))
        with pytest.raises(ValueError):
            prediction_loss(Tensor(np.zeros((2, 0, 4, 2))), Tensor(np.zeros((2, 0))), np.zeros((2, 4, 2)))

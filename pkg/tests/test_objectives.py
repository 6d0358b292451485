import numpy as np
import pytest
import torch

from udalm.config import LossWeights
from udalm.model import ModelOutput, decode_prediction
from udalm.objectives import (TargetBatch, encode_targets, loss_base,
                              loss_coord, loss_offset, loss_score)


def targets_from_arrays(coord, score, offset, support, mask):
    return TargetBatch(
        coord_norm=torch.as_tensor(coord, dtype=torch.float64),
        score=torch.as_tensor(score, dtype=torch.float64),
        offset=torch.as_tensor(offset, dtype=torch.float64),
        support=torch.as_tensor(support, dtype=torch.bool),
        mask=torch.as_tensor(mask, dtype=torch.float64),
    )


class TestEncodeTargets:
    def test_peak_cell_and_offset_worked_example(self):
        # landmark at pixel (18, 10), stride 4 -> grid coordinate (4.5, 2.5)
        st, ot = encode_targets(np.array([[18.0, 10.0]]), 200, 160, 4, 1.0)
        assert st.values[0, 2, 4] == 1.0
        assert st.values[0].max() == 1.0
        np.testing.assert_allclose(ot.values[0, :, 2, 4], [0.0, 0.0], atol=1e-12)
        # neighbouring supported cell (5, 2): offset (4.5-5.5, 2.5-2.5)
        np.testing.assert_allclose(ot.values[0, :, 2, 5], [-1.0, 0.0], atol=1e-12)
        # decoding from that cell still recovers the pixel: (5-1.0+0.5)*4 = 18
        assert (5 + ot.values[0, 0, 2, 5] + 0.5) * 4 == pytest.approx(18.0)

    def test_symmetric_about_peak(self):
        st, _ = encode_targets(np.array([[30.0, 30.0]]), 16, 16, 4, 1.5)
        gy = gx = 7  # 30/4 = 7.5 -> cell 7
        v = st.values[0]
        for d in (1, 2, 3):
            assert v[gy, gx - d] == pytest.approx(v[gy, gx + d])
            assert v[gy - d, gx] == pytest.approx(v[gy + d, gx])

    def test_small_sigma_shrinks_support(self):
        st_small, _ = encode_targets(np.array([[30.0, 30.0]]), 16, 16, 4, 0.25)
        st_big, _ = encode_targets(np.array([[30.0, 30.0]]), 16, 16, 4, 1.5)
        assert st_small.support.sum() < st_big.support.sum()
        assert st_small.support.sum() >= 1

    def test_offset_exact_at_every_supported_cell(self, rng):
        # (g + offset + 0.5) * stride recovers the pixel exactly on support
        H = W = 20
        stride = 4
        for _ in range(50):
            lm = rng.uniform(0, W * stride, size=(3, 2))
            st, ot = encode_targets(lm, H, W, stride, 1.5)
            for l in range(3):
                ys, xs = np.nonzero(st.support[l])
                decoded_x = (xs + ot.values[l, 0, ys, xs] + 0.5) * stride
                decoded_y = (ys + ot.values[l, 1, ys, xs] + 0.5) * stride
                np.testing.assert_allclose(decoded_x, lm[l, 0], atol=1e-9)
                np.testing.assert_allclose(decoded_y, lm[l, 1], atol=1e-9)

    def test_round_trip_through_decode(self, rng):
        # GT targets + coarse = GT recovers the pixel through the model decode
        H = W = 16
        stride = 4
        size = (64, 64)
        lm = rng.uniform(0, 64, size=(4, 2))
        st, ot = encode_targets(lm, H, W, stride, 1.0)
        out = ModelOutput(
            coarse_coords=torch.as_tensor(lm / 64.0)[None],
            score_maps=torch.as_tensor(st.values)[None],
            offset_maps=torch.as_tensor(ot.values)[None],
            features=torch.zeros(1, 8, H, W),
        )
        pred = decode_prediction(out, stride, size)
        np.testing.assert_allclose(pred.coords, lm, atol=1e-6)
        np.testing.assert_allclose(pred.confidences, 1.0)

    def test_invalid_landmarks_get_empty_channels(self):
        st, ot = encode_targets(np.array([[30.0, 30.0], [10.0, 10.0]]),
                                16, 16, 4, 1.0, valid=np.array([True, False]))
        assert st.support[0].any()
        assert not st.support[1].any()
        assert (ot.values[1] == 0).all()


class TestLossCoord:
    def test_zero_at_perfect(self):
        pred = torch.rand(1, 3, 2)
        mask = torch.ones(1, 3)
        assert loss_coord(pred, pred.clone(), mask).item() == 0.0

    def test_worked_example(self):
        pred = torch.tensor([[[0.1, 0.1], [0.3, 0.3]]], dtype=torch.float64)
        gt = torch.zeros(1, 2, 2, dtype=torch.float64)
        assert loss_coord(pred, gt, torch.ones(1, 2)).item() == pytest.approx(0.2)
        assert loss_coord(pred, gt, torch.tensor([[1.0, 0.0]])).item() == pytest.approx(0.1)

    def test_all_zero_mask(self):
        pred = torch.rand(2, 3, 2)
        gt = torch.rand(2, 3, 2)
        assert loss_coord(pred, gt, torch.zeros(2, 3)).item() == 0.0


class TestLossScore:
    def test_uniform_perturbation(self):
        target = torch.rand(1, 2, 8, 8, dtype=torch.float64)
        pred = target + 0.1
        mask = torch.ones(1, 2)
        assert loss_score(pred, target, mask).item() == pytest.approx(0.01)

    def test_full_masking_ignores_pred(self):
        target = torch.rand(1, 2, 8, 8)
        assert loss_score(torch.rand(1, 2, 8, 8) * 100, target,
                          torch.zeros(1, 2)).item() == 0.0

    def test_per_landmark_masking(self, rng):
        target = torch.as_tensor(rng.uniform(size=(1, 2, 4, 4)))
        pred = target.clone()
        pred[0, 1] += 1.0  # error only on the masked-out landmark
        assert loss_score(pred, target, torch.tensor([[1.0, 0.0]])).item() == 0.0


class TestLossOffset:
    def setup_method(self):
        st, ot = encode_targets(np.array([[30.0, 30.0], [10.0, 50.0]]), 16, 16, 4, 1.0)
        self.target = torch.as_tensor(ot.values)[None]
        self.support = torch.as_tensor(st.support)[None]

    def test_garbage_outside_support_ignored(self, rng):
        pred = self.target.clone()
        noise = torch.as_tensor(rng.normal(size=pred.shape)) * 100
        noise[:, :, :, :, :] *= ~self.support[:, :, None, :, :]
        assert loss_offset(pred + noise, self.target, self.support,
                           torch.ones(1, 2)).item() == 0.0

    def test_uniform_shift(self):
        pred = self.target + 0.5
        assert loss_offset(pred, self.target, self.support,
                           torch.ones(1, 2)).item() == pytest.approx(0.5)

    def test_masked_landmark_contributes_nothing(self):
        pred = self.target + 123.0
        assert loss_offset(pred, self.target, self.support,
                           torch.zeros(1, 2)).item() == 0.0


class TestLossBase:
    def _perfect_setup(self, rng, L=2, H=8, W=8):
        lm = rng.uniform(4, 28, size=(L, 2))
        st, ot = encode_targets(lm, H, W, 4, 1.0)
        out = ModelOutput(
            coarse_coords=torch.as_tensor(lm / 32.0)[None].double(),
            score_maps=torch.as_tensor(st.values)[None],
            offset_maps=torch.as_tensor(ot.values)[None],
            features=torch.zeros(1, 4, H, W),
        )
        targets = targets_from_arrays(lm[None] / 32.0, st.values[None],
                                      ot.values[None], st.support[None],
                                      np.ones((1, L)))
        return out, targets

    def test_zero_at_perfect(self, rng):
        out, targets = self._perfect_setup(rng)
        total, parts = loss_base(out, targets, LossWeights())
        assert total.item() == 0.0

    def test_weighted_combination(self, rng):
        # loss parts 0.01 / 0.5 / 0.2 combine to 100*0.01 + 0.02*0.5 + 0.2 = 1.21
        out, targets = self._perfect_setup(rng)
        out = ModelOutput(
            coarse_coords=out.coarse_coords + 0.2,  # uniform |diff| -> coord L1 = 0.2
            score_maps=out.score_maps + 0.1,        # uniform 0.1^2 -> score MSE = 0.01
            offset_maps=out.offset_maps + 0.5,      # uniform |diff| -> offset L1 = 0.5
            features=out.features,
        )
        total, parts = loss_base(out, targets,
                                 LossWeights(lambda_score=100.0, lambda_offset=0.02))
        assert parts["score"].item() == pytest.approx(0.01)
        assert parts["offset"].item() == pytest.approx(0.5)
        assert parts["coord"].item() == pytest.approx(0.2)
        assert total.item() == pytest.approx(1.21)

    def test_all_ones_mask_equals_unmasked_path(self, rng):
        # masked loss with all-ones mask must equal the plain objective
        out, targets = self._perfect_setup(rng)
        noisy = ModelOutput(
            coarse_coords=out.coarse_coords * 0.9,
            score_maps=out.score_maps + torch.as_tensor(rng.normal(size=out.score_maps.shape)) * 0.1,
            offset_maps=out.offset_maps + 0.3,
            features=out.features,
        )
        masked, _ = loss_base(noisy, targets, LossWeights())
        # unmasked reference computed directly
        w = LossWeights()
        ref = (w.lambda_score * ((noisy.score_maps - targets.score) ** 2).mean()
               + w.lambda_offset * ((noisy.offset_maps - targets.offset).abs()
                                    * targets.support[:, :, None]).sum()
               / targets.support.sum() / 2
               + (noisy.coarse_coords - targets.coord_norm).abs().mean())
        assert masked.item() == pytest.approx(ref.item(), rel=1e-12)

    def test_masking_linearity(self, rng):
        # masked parts recombine from single-landmark parts under the
        # masked-mean rule: coord/score average over kept landmarks, offset
        # averages weighted by each landmark's support size
        out, targets = self._perfect_setup(rng, L=3)
        noisy = ModelOutput(
            coarse_coords=(out.coarse_coords
                           + torch.as_tensor(rng.normal(size=(1, 3, 2))) * 0.05),
            score_maps=out.score_maps + torch.as_tensor(rng.normal(size=out.score_maps.shape)) * 0.1,
            offset_maps=out.offset_maps + torch.as_tensor(rng.normal(size=out.offset_maps.shape)) * 0.1,
            features=out.features,
        )
        w = LossWeights()

        def with_mask(m):
            t = TargetBatch(coord_norm=targets.coord_norm, score=targets.score,
                            offset=targets.offset, support=targets.support,
                            mask=torch.as_tensor(np.asarray(m, dtype=float)))
            total, parts = loss_base(noisy, t, w)
            return total.item(), {k: v.item() for k, v in parts.items()}

        singles = [with_mask([[1 if i == l else 0 for i in range(3)]])[1]
                   for l in range(3)]
        got_total, got_parts = with_mask([[1.0, 1.0, 0.0]])

        sup = targets.support[0].sum(dim=(1, 2)).numpy().astype(float)
        exp_coord = (singles[0]["coord"] + singles[1]["coord"]) / 2
        exp_score = (singles[0]["score"] + singles[1]["score"]) / 2
        exp_offset = ((singles[0]["offset"] * sup[0] + singles[1]["offset"] * sup[1])
                      / (sup[0] + sup[1]))
        assert got_parts["coord"] == pytest.approx(exp_coord, rel=1e-10)
        assert got_parts["score"] == pytest.approx(exp_score, rel=1e-10)
        assert got_parts["offset"] == pytest.approx(exp_offset, rel=1e-10)
        assert got_total == pytest.approx(
            w.lambda_score * exp_score + w.lambda_offset * exp_offset + exp_coord,
            rel=1e-10)

    def test_zero_mask_zero_gradients(self, rng):
        out, targets = self._perfect_setup(rng)
        coarse = (out.coarse_coords + 0.3).requires_grad_(True)
        scores = (out.score_maps + 0.5).detach().requires_grad_(True)
        offsets = (out.offset_maps + 0.5).detach().requires_grad_(True)
        noisy = ModelOutput(coarse_coords=coarse, score_maps=scores,
                            offset_maps=offsets, features=out.features)
        t = TargetBatch(coord_norm=targets.coord_norm, score=targets.score,
                        offset=targets.offset, support=targets.support,
                        mask=torch.zeros(1, 2))
        total, _ = loss_base(noisy, t, LossWeights())
        assert total.item() == 0.0
        total.backward()
        assert torch.all(coarse.grad == 0)
        assert torch.all(scores.grad == 0)
        assert torch.all(offsets.grad == 0)


def central_differences(fn, x, h=1e-6):
    """Finite-difference gradient of scalar fn at x, element by element."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = fn(x).item()
        flat[i] = orig - h
        fm = fn(x).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


class TestGradients:
    def test_loss_coord_matches_finite_differences(self, rng):
        gt = torch.as_tensor(rng.uniform(0.2, 0.8, size=(2, 3, 2)))
        mask = torch.as_tensor((rng.uniform(size=(2, 3)) > 0.3).astype(float))
        pred = torch.as_tensor(rng.uniform(size=(2, 3, 2)), dtype=torch.float64)
        pred = torch.where((pred - gt).abs() < 1e-3, pred + 0.01, pred)
        pred.requires_grad_(True)
        loss = loss_coord(pred, gt, mask)
        loss.backward()
        fd = central_differences(lambda p: loss_coord(p, gt, mask), pred.detach().clone())
        np.testing.assert_allclose(pred.grad.numpy(), fd.numpy(), rtol=1e-4, atol=1e-7)

    def test_loss_score_matches_finite_differences(self, rng):
        target = torch.as_tensor(rng.uniform(size=(1, 2, 3, 3)))
        mask = torch.ones(1, 2, dtype=torch.float64)
        pred = torch.as_tensor(rng.uniform(size=(1, 2, 3, 3)), dtype=torch.float64)
        pred.requires_grad_(True)
        loss_score(pred, target, mask).backward()
        fd = central_differences(lambda p: loss_score(p, target, mask),
                                 pred.detach().clone())
        np.testing.assert_allclose(pred.grad.numpy(), fd.numpy(), rtol=1e-4, atol=1e-7)

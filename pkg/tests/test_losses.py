import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from taskcon.config import Ablation, ABLATION_ROWS, ModelConfig
from taskcon.losses import (
    LossReport, classification_loss, contrastive_loss, cosine_similarity, l2_penalty,
    single_negative_bound, total_loss,
)
from taskcon.model import FeatureBundle, ModelOutputs

LN2 = math.log(2.0)


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


class TestCosine:
    def test_identity(self):
        a = t(0.3, -1.2, 4.0)
        assert float(cosine_similarity(a, a)) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert float(cosine_similarity(t(1, 0), t(0, 1))) == 0.0

    def test_worked_example(self):
        # 32 / (sqrt(14) * sqrt(77))
        assert float(cosine_similarity(t(1, 2, 3), t(4, 5, 6))) == pytest.approx(0.9746318461970762, rel=1e-12)

    @pytest.mark.parametrize("which", ["a", "b"])
    def test_zero_norm_is_an_error(self, which):
        args = {"a": t(1, 2), "b": t(3, 4)}
        args[which] = t(0, 0)
        with pytest.raises(ValueError, match=f"{which} has zero norm"):
            cosine_similarity(args["a"], args["b"])

    def test_clamped(self):
        a = t(1e-3, 1e-3, 1e-3)
        assert float(cosine_similarity(a, 7 * a)) <= 1.0


class TestContrastive:
    def test_symmetric_case_is_ln2(self):
        a, p = t(1, 2, 3), t(-1, 0.5, 2)
        assert float(contrastive_loss(a, p, p, 0.07)) == pytest.approx(LN2, abs=1e-12)

    def test_positive_aligned_negative_orthogonal(self):
        got = float(contrastive_loss(t(1, 0), t(1, 0), t(0, 1), 0.07))
        assert got == pytest.approx(6.248747557120388e-07, rel=1e-9)

    def test_negative_aligned_positive_orthogonal(self):
        got = float(contrastive_loss(t(1, 0), t(0, 1), t(1, 0), 0.07))
        assert got == pytest.approx(14.285714910589041, rel=1e-12)

    @pytest.mark.parametrize("tau", [0.0, -0.1])
    def test_bad_temperature(self, tau):
        with pytest.raises(ValueError, match="temperature"):
            contrastive_loss(t(1, 0), t(1, 0), t(0, 1), tau)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="negative has zero norm"):
            contrastive_loss(t(1, 0), t(1, 0), t(0, 0), 0.07)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(0)
        a, p, n = (torch.tensor(rng.normal(size=(5, 7))) for _ in range(3))
        batched = contrastive_loss(a, p, n, 0.1)
        single = torch.stack([contrastive_loss(a[i], p[i], n[i], 0.1) for i in range(5)])
        torch.testing.assert_close(batched, single)

    def test_tiny_temperature_is_finite(self):
        got = contrastive_loss(t(1, 0), t(-1, 0), t(1, 0), 1e-3)
        assert torch.isfinite(got)
        assert float(got) == pytest.approx(2000.0, rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(0.01, 100.0), st.floats(1e-3, 2.0))
    def test_scale_invariance(self, vals, c, tau):
        a, p, n = t(*vals[:3]), t(*vals[3:6]), t(*vals[6:])
        if min(float(v.norm()) for v in (a, p, n)) < 1e-3:
            return
        base = float(contrastive_loss(a, p, n, tau))
        for args in ((c * a, p, n), (a, c * p, n), (a, p, c * n)):
            assert float(contrastive_loss(*args, tau)) == pytest.approx(base, rel=1e-9, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(1e-3, 2.0))
    def test_bounds_single_negative(self, vals, tau):
        a, p, n = t(*vals[:3]), t(*vals[3:6]), t(*vals[6:])
        if min(float(v.norm()) for v in (a, p, n)) < 1e-3:
            return
        loss = float(contrastive_loss(a, p, n, tau))
        assert 0.0 <= loss <= single_negative_bound(tau) * (1 + 1e-12)

    def test_monotone_in_positive_similarity(self):
        # anchor e1; negative fixed at 60 degrees; positive rotates toward the anchor
        anchor = t(1, 0, 0)
        neg = t(0.5, 0, math.sqrt(3) / 2)
        losses = []
        for ang in np.linspace(math.pi, 0, 50):
            pos = t(math.cos(ang), math.sin(ang), 0)
            losses.append(float(contrastive_loss(anchor, pos, neg, 0.07)))
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestClassification:
    @pytest.mark.parametrize("label", [0, 1])
    def test_uniform_logits(self, label):
        assert float(classification_loss(t(0, 0), label)) == pytest.approx(LN2, abs=1e-15)

    def test_confident_correct(self):
        assert float(classification_loss(t(10, -10), 0)) == pytest.approx(2.061153620314381e-09, rel=1e-9)

    def test_confident_wrong(self):
        assert float(classification_loss(t(10, -10), 1)) == pytest.approx(20.000000002061153, rel=1e-12)

    @pytest.mark.parametrize("label", [2, -1])
    def test_bad_label(self, label):
        with pytest.raises(ValueError, match="0 or 1"):
            classification_loss(t(0, 0), label)

    def test_large_logits_stable(self):
        assert torch.isfinite(classification_loss(t(1e4, -1e4), 1))


def _const_outputs(n=3, value=0.0, with_aux=True, with_con=True):
    """Outputs whose every term equals ln 2: zero logits, anchor equidistant to both projections."""
    z = torch.zeros(n, 2, dtype=torch.float64)
    fb = FeatureBundle()
    if with_con:
        fb.G_ci = fb.G_cm = torch.tensor([[1.0, 0.0]] * n, dtype=torch.float64)
        fb.Ghat_i = fb.Ghat_m = torch.tensor([[1.0, 1.0]] * n, dtype=torch.float64)
    return ModelOutputs(z + value, z + value, (z if with_aux else None), (z if with_aux else None), fb)


class TestTotal:
    labels = (torch.tensor([0, 1, 0]), torch.tensor([1, 1, 0]))

    def test_warmup_excludes_contrastive(self):
        cfg = ModelConfig.tiny()
        rep = total_loss(_const_outputs(), *self.labels, cfg, epoch=0)
        assert not rep.contrastive_active
        assert rep.con_inv == pytest.approx(LN2)
        assert rep.total == pytest.approx((2 + 0.7 * 2) * LN2, abs=1e-12)

    def test_epoch_30_all_ln2(self):
        cfg = ModelConfig.tiny()
        rep = total_loss(_const_outputs(), *self.labels, cfg, epoch=30)
        assert rep.contrastive_active
        assert rep.total == pytest.approx(5.4 * LN2, abs=1e-12)
        assert rep.total == pytest.approx(3.7429947750237047, abs=1e-12)

    def test_boundary_inclusive(self):
        cfg = ModelConfig.tiny(warmup_epochs=5)
        assert not total_loss(_const_outputs(), *self.labels, cfg, epoch=4).contrastive_active
        assert total_loss(_const_outputs(), *self.labels, cfg, epoch=5).contrastive_active

    def test_weight_collapse(self):
        cfg = ModelConfig.tiny(alpha=0.0, beta=0.0)
        rep = total_loss(_const_outputs(), *self.labels, cfg, epoch=50)
        assert rep.total == pytest.approx(rep.cls_inv + rep.cls_men, abs=1e-15)

    @pytest.mark.parametrize("row", list(ABLATION_ROWS))
    def test_recomposition_every_ablation(self, row):
        ab = ABLATION_ROWS[row]
        cfg = ModelConfig.tiny(ablation=ab, alpha=1.3, beta=0.45)
        rng = np.random.default_rng(1)
        n = 6
        r = lambda *s: torch.tensor(rng.normal(size=s))
        fb = FeatureBundle(G_ci=r(n, 4), G_cm=r(n, 4), Ghat_i=r(n, 4), Ghat_m=r(n, 4))
        out = ModelOutputs(r(n, 2), r(n, 2), r(n, 2), r(n, 2), fb)
        y = (torch.tensor(rng.integers(0, 2, n)), torch.tensor(rng.integers(0, 2, n)))
        for epoch in (0, 29, 30, 31):
            rep = total_loss(out, *y, cfg, epoch)
            assert rep.total == pytest.approx(rep.recompose(), rel=1e-12)
            if not ab.l_con:
                assert rep.con_inv == rep.con_men == 0.0
                assert {"con_inv", "con_men"} <= set(rep.absent)
            if not ab.aux:
                assert rep.aux_inv == rep.aux_men == 0.0
                assert {"aux_inv", "aux_men"} <= set(rep.absent)

    def test_batch_mean_of_per_sample_totals(self):
        cfg = ModelConfig.tiny()
        rng = np.random.default_rng(2)
        r = lambda *s: torch.tensor(rng.normal(size=s))
        n = 5
        fb = FeatureBundle(G_ci=r(n, 4), G_cm=r(n, 4), Ghat_i=r(n, 4), Ghat_m=r(n, 4))
        out = ModelOutputs(r(n, 2), r(n, 2), r(n, 2), r(n, 2), fb)
        y = (torch.tensor([0, 1, 1, 0, 1]), torch.tensor([1, 1, 1, 0, 1]))
        batch = total_loss(out, *y, cfg, 30).total
        per = []
        for i in range(n):
            sl = slice(i, i + 1)
            fbi = FeatureBundle(G_ci=fb.G_ci[sl], G_cm=fb.G_cm[sl], Ghat_i=fb.Ghat_i[sl], Ghat_m=fb.Ghat_m[sl])
            oi = ModelOutputs(out.main_logits_inv[sl], out.main_logits_men[sl],
                              out.aux_logits_inv[sl], out.aux_logits_men[sl], fbi)
            per.append(total_loss(oi, y[0][sl], y[1][sl], cfg, 30).total)
        assert batch == pytest.approx(np.mean(per), rel=1e-12)

    def test_non_finite_term_named(self):
        cfg = ModelConfig.tiny()
        out = _const_outputs()
        out.aux_logits_men = torch.full((3, 2), float("nan"), dtype=torch.float64)
        with pytest.raises(FloatingPointError, match="aux_men"):
            total_loss(out, *self.labels, cfg, 0)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            total_loss(_const_outputs(), *self.labels, ModelConfig.tiny(), -1)

    def test_baseline_only_classification(self):
        out = _const_outputs(with_aux=False, with_con=False)
        rep = total_loss(out, *self.labels, ModelConfig.tiny(), 40, baseline=True)
        assert rep.total == pytest.approx(2 * LN2)
        assert set(rep.absent) == {"con_inv", "con_men", "aux_inv", "aux_men"}

    def test_report_mean(self):
        a = LossReport(cls_inv=1, total=1)
        b = LossReport(cls_inv=4, total=4)
        m = LossReport.mean([a, b], [1, 3])
        assert m.cls_inv == pytest.approx(3.25) and m.total == pytest.approx(3.25)


def test_l2_penalty_monotone_in_weight_decay():
    params = [torch.nn.Parameter(torch.tensor([0.5, -1.0])), torch.nn.Parameter(torch.tensor([2.0]))]
    vals = [float(l2_penalty(params, wd).detach()) for wd in (0.0, 1e-4, 1e-3, 1e-2)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert vals[2] == pytest.approx(0.5 * 1e-3 * (0.25 + 1 + 4))

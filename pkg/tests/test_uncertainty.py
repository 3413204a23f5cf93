import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from morestyle.errors import ValidationError
from morestyle.models import SegNetwork
from morestyle.uncertainty import (AttentionRegions, UncertaintyMap, attention_regions, mc_uncertainty,
                                   normalize_mean, reweight)

from .oracles import region_truth_table


class ConstantModel(nn.Module):
    def __init__(self, probs):
        super().__init__()
        self.probs = torch.tensor(probs)
        self.drop = nn.Dropout(0.5)  # present but unused

    def forward(self, x):
        n, _, h, w = x.shape
        return self.probs.view(1, -1, 1, 1).expand(n, -1, h, w).clone()


class ThresholdModel(nn.Module):
    """One-hot output from a hard threshold, insensitive to small noise."""

    def forward(self, x):
        fg = (x[:, :1] > 0.5).float()
        return torch.cat([1 - fg, fg], dim=1)


def test_constant_half_gives_log2():
    u = mc_uncertainty(ConstantModel([0.5, 0.5]), torch.rand(2, 1, 4, 4), T=4, noise_std=0.05)
    torch.testing.assert_close(u.u, torch.full((2, 4, 4), math.log(2)))
    assert u.passes == 4 and u.noise_std == 0.05


def test_one_hot_gives_zero():
    x = torch.zeros(1, 1, 6, 6)
    x[..., :3, :] = 0.9
    with pytest.warns(UserWarning):
        u = mc_uncertainty(ThresholdModel(), x, T=4, noise_std=0.0)
    assert u.u.abs().max() < 1e-6
    u = mc_uncertainty(ThresholdModel(), x, T=4, noise_std=0.01)
    assert u.u.abs().max() < 1e-6


def test_seeded_runs_identical():
    torch.manual_seed(0)
    model = SegNetwork(widths=(4, 8, 8), dropout=0.3)
    x = torch.rand(2, 1, 16, 16)
    outs = []
    for _ in range(2):
        torch.manual_seed(7)
        g = torch.Generator().manual_seed(3)
        outs.append(mc_uncertainty(model, x, T=8, noise_std=0.05, generator=g).u)
    assert torch.equal(outs[0], outs[1])


def test_bounds_and_model_untouched():
    torch.manual_seed(1)
    model = SegNetwork(widths=(4, 8, 8), dropout=0.3)
    model.train()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    u = mc_uncertainty(model, torch.rand(3, 1, 16, 16), T=5, noise_std=0.1).u
    assert torch.all(u >= 0) and torch.all(u <= math.log(3) + 1e-6)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert model.training


def test_rejects_single_pass():
    with pytest.raises(ValidationError):
        mc_uncertainty(ConstantModel([0.5, 0.5]), torch.rand(1, 1, 2, 2), T=1)


def test_normalize_mean():
    u = UncertaintyMap(torch.rand(2, 5, 5) + 0.1, 8, 0.05)
    n = normalize_mean(u)
    torch.testing.assert_close(n.u.mean(dim=(1, 2)), torch.ones(2))
    flat = normalize_mean(UncertaintyMap(torch.zeros(1, 3, 3)))
    assert torch.equal(flat.u, torch.ones(1, 3, 3))


# --- region algebra ------------------------------------------------------------------

def test_truth_table():
    table = region_truth_table()
    for (p, pa, y), (in_more, in_less) in table.items():
        t = lambda v: torch.tensor([[[[v]]]], dtype=torch.bool)
        r = attention_regions(t(p), t(pa), t(y))
        assert bool(r.more.item()) == in_more and bool(r.less.item()) == in_less
        assert not (r.more & r.less).any()


def test_defining_cases():
    one, zero = torch.ones(1, 1, 1, 1), torch.zeros(1, 1, 1, 1)
    r = attention_regions(one, zero, one)
    assert r.more.item() and not r.less.item()
    r = attention_regions(one, one, zero)
    assert r.less.item() and not r.more.item()


def test_perfect_agreement_is_empty():
    y = torch.rand(2, 3, 4, 4) > 0.5
    r = attention_regions(y, y, y)
    assert not r.more.any() and not r.less.any()


def test_region_shape_mismatch():
    with pytest.raises(ValidationError):
        attention_regions(torch.ones(1, 2, 2, 2), torch.ones(1, 2, 2, 2), torch.ones(1, 3, 2, 2))


def test_reweight_empty_regions_is_identity():
    u = torch.rand(1, 4, 4)
    empty = torch.zeros(1, 2, 4, 4, dtype=torch.bool)
    assert torch.equal(reweight(UncertaintyMap(u), AttentionRegions(empty, empty)).u, u)


def test_reweight_paper_factors():
    u = torch.ones(1, 3, 3)
    more = torch.zeros(1, 2, 3, 3, dtype=torch.bool)
    less = torch.zeros_like(more)
    more[0, 1, 0, 0] = True
    less[0, 0, 2, 2] = True
    out = reweight(UncertaintyMap(u), AttentionRegions(more, less)).u
    expected = torch.ones(1, 3, 3)
    expected[0, 0, 0] = 1.2
    expected[0, 2, 2] = 0.8
    torch.testing.assert_close(out, expected)
    assert torch.equal(u, torch.ones(1, 3, 3))  # input untouched


@pytest.mark.parametrize("seed", range(5))
def test_reweight_matches_per_pixel_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    u = torch.rand(2, 5, 5, generator=g)
    labels = lambda: torch.randint(0, 3, (2, 5, 5), generator=g)
    oh = lambda lab: torch.nn.functional.one_hot(lab, 3).permute(0, 3, 1, 2).bool()
    p, pa, y = labels(), labels(), labels()
    regions = attention_regions(oh(p), oh(pa), oh(y))
    out = reweight(UncertaintyMap(u), regions, 1.2, 0.8).u
    for n, i, j in itertools.product(range(2), range(5), range(5)):
        pp, aa, yy = p[n, i, j], pa[n, i, j], y[n, i, j]
        if pp == yy and aa != pp:
            f = 1.2
        elif pp == aa and yy != pp:
            f = 0.8
        else:
            f = 1.0
        assert out[n, i, j].item() == pytest.approx(u[n, i, j].item() * f)


def test_reweight_rejects_overlap_and_bad_factors():
    u = UncertaintyMap(torch.ones(1, 2, 2))
    both = torch.ones(1, 1, 2, 2, dtype=torch.bool)
    with pytest.raises(ValidationError):
        reweight(u, AttentionRegions(both, both))
    none = torch.zeros_like(both)
    with pytest.raises(ValidationError):
        reweight(u, AttentionRegions(none, none), rho=0.9)

import json
from fractions import Fraction

import jsonschema
import mpmath
import numpy as np
import pytest

from caver import instrument
from caver.attention import standard_attention, view_mixed_attention
from caver.checks import random_attention_params
from caver.cost import (
    REPORT_SCHEMA,
    crossover,
    dumps,
    format_table,
    instrument_forward,
    report_from_probe,
    standard_attention_cost,
    sweep_document,
    vma_attention_cost,
)
from caver.errors import CostMismatchError
from caver.ptre import TokenSequence
from caver.weights import init_weights, synthetic_features


def scan(d, n_heads, p, limit=10_000):
    """Plain float scan of 2N^2 D / p^2 + 2 N D^2 < 2 N^2 D."""
    for n in range(1, limit):
        if 2 * n * n * d / (p * p) + 2 * n * d * d < 2 * n * n * d:
            return n
    return None


class TestClosedForms:
    def test_standard_published_value(self):
        assert standard_attention_cost(100, 64, 2).flops == 1_280_000

    def test_standard_single_token(self):
        cost = standard_attention_cost(1, 64, 2)
        assert (cost.flops, cost.mem) == (128, 2 + 64)

    def test_vma_p1_spatial_term_is_standard(self):
        vma = vma_attention_cost(256, 64, 2, 1)
        assert vma.flops - vma.channel_term == standard_attention_cost(256, 64, 2).flops

    def test_vma_large_exact(self):
        cost = vma_attention_cost(64 * 64, 64, 2, 8)
        mpmath.mp.dps = 60
        n, d, p = mpmath.mpf(4096), mpmath.mpf(64), mpmath.mpf(8)
        want = 2 * n**2 * d / p**2 + 2 * n * d**2
        assert cost.flops == int(want) == 67_108_864
        assert cost.flops_channel_per_head == 2 * 4096 * 64 * 64 // 2

    def test_vma_memory(self):
        assert vma_attention_cost(64, 8, 2, 2).mem == 2 * 64 * 64 // 16 + 64 // 2 + 2 * 64 * 8

    def test_fractional_terms_flagged(self):
        cost = vma_attention_cost(3, 1, 1, 2)
        assert isinstance(cost.flops, Fraction)
        assert any("divide" in v for v in cost.violations)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            vma_attention_cost(16, 6, 4, 1)

    @pytest.mark.parametrize("d,nh,p", [(8, 1, 2), (64, 2, 4), (16, 2, 2)])
    def test_monotone_in_p(self, d, nh, p):
        assert vma_attention_cost(1024, d, nh, 2 * p).flops < vma_attention_cost(1024, d, nh, p).flops


class TestCrossover:
    def test_published_threshold(self):
        assert crossover(64, 2, 8) == 66

    def test_small_case_matches_scan(self):
        assert crossover(4, 1, 2) == scan(4, 1, 2) == 6

    @pytest.mark.parametrize("d,nh,p", [(64, 2, 2), (64, 2, 4), (32, 4, 8), (8, 1, 4)])
    def test_matches_scan(self, d, nh, p):
        assert crossover(d, nh, p) == scan(d, nh, p)

    def test_no_crossover_without_patching(self):
        assert crossover(64, 2, 1) is None

    def test_per_head_variant(self):
        assert crossover(64, 2, 8, per_head_channel=True) == 33


class TestInstrumented:
    def run_vma(self, rng, n, d, nh, p, side=None):
        side = side or int(np.sqrt(n))
        x = TokenSequence(rng.standard_normal((n, d)), side, n // side)
        with instrument.probe() as pr, instrument.scope("vma"):
            view_mixed_attention(x, x, random_attention_params(rng, d, nh, p))
        return pr

    def test_spatial_count(self, rng):
        pr = self.run_vma(rng, 16, 8, 1, 1)
        assert pr.macs_where("spatial_core") == 2 * 16 * 16 * 8 == 4096

    def test_single_token(self, rng):
        pr = self.run_vma(rng, 1, 8, 1, 1)
        assert pr.macs_where("spatial_core") == 2 * 8

    def test_standard_count(self, rng):
        x = TokenSequence(rng.standard_normal((8, 4)), 2, 4)
        with instrument.probe() as pr, instrument.scope("std"):
            standard_attention(x, random_attention_params(rng, 4, 1, 1))
        assert pr.macs_where("spatial_core") == standard_attention_cost(8, 4, 1).flops
        report = report_from_probe(pr)
        assert report.flops_instrumented == report.flops_closed_form == 512

    def test_memory_matches_closed_form(self, rng):
        pr = self.run_vma(rng, 64, 8, 2, 2)
        report = report_from_probe(pr)
        assert report.mem_elements_instrumented == report.mem_elements_closed_form

    def test_mismatch_detected(self, rng):
        pr = self.run_vma(rng, 16, 8, 1, 2)
        key = next(k for k in pr.macs if k.endswith("spatial_core"))
        pr.macs[key] += 1
        with pytest.raises(CostMismatchError, match="spatial"):
            report_from_probe(pr)

    def test_decoder_sweep_decreasing(self, small_config):
        weights = init_weights(small_config, 0)
        feats = synthetic_features(small_config, 0)
        sweep = ((1, 1, 1, 1), (2, 2, 2, 1), (4, 4, 2, 1))
        macs = [instrument_forward(small_config.with_patch(p), weights, feats).decoder_macs for p in sweep]
        assert macs[0] > macs[1] > macs[2]


class TestReports:
    @pytest.fixture
    def doc(self, small_config):
        weights = init_weights(small_config, 0)
        feats = synthetic_features(small_config, 0)
        reports = [instrument_forward(small_config.with_patch(p), weights, feats) for p in ((1, 1, 1, 1), (2, 2, 2, 1))]
        return reports, sweep_document(reports, [crossover(8, 2, 1), crossover(8, 2, 2)])

    def test_schema_roundtrip(self, doc):
        _, document = doc
        parsed = json.loads(dumps(document))
        jsonschema.validate(parsed, REPORT_SCHEMA)
        assert parsed == document

    def test_schema_rejects_extra_keys(self, doc):
        _, document = doc
        document["points"][0]["bogus"] = 1
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(document, REPORT_SCHEMA)

    def test_measured_equals_per_head_closed_form(self, doc):
        reports, _ = doc
        for r in reports:
            assert r.flops_instrumented == r.flops_closed_per_head
            assert r.mem_elements_instrumented == r.mem_elements_closed_form

    def test_table_plain(self, doc):
        reports, document = doc
        text = format_table(reports, [p["crossover_n"] for p in document["points"]], color=False)
        assert "\x1b" not in text and text.count("\n") == 3

    def test_no_color_env(self, doc, monkeypatch):
        reports, _ = doc
        monkeypatch.setenv("CAVER_NO_COLOR", "1")
        assert "\x1b" not in format_table(reports, [None, None])
        monkeypatch.delenv("CAVER_NO_COLOR")
        assert "\x1b[1m" in format_table(reports, [None, None])

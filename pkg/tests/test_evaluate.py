import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsar_kit.align import LossSettings
from zsar_kit.datamodel import RunConfig
from zsar_kit.evaluate import (
    aggregate_splits,
    evaluate_problem,
    format_mean_std,
    metrics_json,
    metrics_table,
    parse_variant,
    run_ablation,
    run_variant,
    sweep_variants,
    topk_accuracy,
    true_label_rank,
)
from zsar_kit.optim import train
from zsar_kit.problem import without_definitions, without_descriptions

from conftest import synth_problem


def scores_with_ranks(ranks, C=8):
    """Score rows where label 0 sits at the given 1-based rank."""
    rows = []
    for r in ranks:
        row = np.linspace(1.0, 0.0, C)  # class j has the j-th highest score
        order = list(range(1, C))
        order.insert(r - 1, 0)
        rows.append(row[np.argsort(order)])
    return np.array(rows)


class TestTopK:
    def test_hand_count(self):
        s = scores_with_ranks([1, 2, 6])
        assert true_label_rank(s, [0, 0, 0]).tolist() == [0, 1, 5]
        assert topk_accuracy(s, [0, 0, 0], 1) == pytest.approx(1 / 3)
        assert topk_accuracy(s, [0, 0, 0], 5) == pytest.approx(2 / 3)

    def test_perfect(self):
        s = np.eye(4)
        for k in (1, 2, 4):
            assert topk_accuracy(s, [0, 1, 2, 3], k) == 1.0

    def test_ties_lowest_index_first(self):
        s = np.zeros((2, 3))
        assert true_label_rank(s, [0, 2]).tolist() == [0, 2]
        assert topk_accuracy(s, [2, 2], 2) == 0.0

    def test_label_outside(self):
        with pytest.raises(ValueError, match="label 3"):
            topk_accuracy(np.zeros((1, 3)), [3], 1)
        with pytest.raises(ValueError):
            topk_accuracy(np.zeros((1, 3)), [0], 0)

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 9))
    def test_monotone_and_exhaustive(self, seed, C):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=(12, C)).round(1)
        y = rng.integers(0, C, size=12)
        accs = [topk_accuracy(s, y, k) for k in range(1, C + 1)]
        assert accs == sorted(accs)
        assert accs[-1] == 1.0

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, c):
        _, problem = synth_problem(seed=seed % 50, videos_per_class=4, descriptions_per_class=2)
        cfg = RunConfig(d=6, epochs=0, k=2, seed=1)
        res = train(cfg, problem)
        s = LossSettings.from_config(cfg)
        base = evaluate_problem(res.params, problem, s)
        problem.test.features = problem.test.features * c
        p = res.params.copy()
        p.b_v = p.b_v * c  # visual bias scales with the features so v -> c*v
        assert evaluate_problem(p, problem, s) == base


class TestAggregate:
    def test_hand_formula(self):
        mean, std = aggregate_splits([40, 42, 44])
        assert mean == 42.0
        assert std == pytest.approx(1.632993161855452, abs=1e-12)
        assert format_mean_std(mean, std) == "42.0 ± 1.6"

    def test_single_split(self):
        assert aggregate_splits([37.5]) == (37.5, 0.0)

    def test_sample_std_flag(self):
        assert aggregate_splits([40, 42, 44], ddof=1)[1] == pytest.approx(2.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_splits([])

    def test_one_decimal_rendering(self):
        assert format_mean_std(42.0, 1.4) == "42.0 ± 1.4"

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=20))
    def test_mean_within_range(self, vals):
        mean, std = aggregate_splits(vals)
        assert min(vals) - 1e-9 <= mean <= max(vals) + 1e-9
        assert std >= 0


CFG = RunConfig(d=8, epochs=4, batch_size=16, lr=1e-2, k=5, seed=2)


class TestVariants:
    def test_parse(self):
        v = parse_variant("AD-only", CFG)
        assert (v.alpha, v.gamma, v.use_descriptions) == (1.0, 0.0, False)
        v = parse_variant("VC-only+CIM", CFG)
        assert (v.alpha, v.gamma, v.use_definitions) == (0.0, 0.1, False)
        v = parse_variant("AD+VC", CFG.replace(alpha=0.3))
        assert (v.alpha, v.gamma) == (0.3, 0.0)
        assert parse_variant("AD+VC+CIM", CFG.replace(gamma=0.0)).gamma == 0.1
        with pytest.raises(ValueError, match="unknown variant"):
            parse_variant("XYZ", CFG)

    def test_ad_only_matches_definition_only_run(self, small_problem):
        res, _ = run_variant(CFG, parse_variant("AD-only", CFG), small_problem)
        direct = train(CFG.replace(alpha=1.0, gamma=0.0), without_descriptions(small_problem))
        assert res.step_losses == direct.step_losses

    def test_vc_only_matches_description_only_run(self, small_problem):
        res, _ = run_variant(CFG, parse_variant("VC-only", CFG), small_problem)
        direct = train(CFG.replace(alpha=0.0, gamma=0.0), without_definitions(small_problem))
        assert res.step_losses == direct.step_losses

    def test_gamma_zero_reproduces_ad_vc(self, small_problem):
        res, _ = run_variant(CFG, parse_variant("AD+VC", CFG), small_problem)
        direct = train(CFG.replace(gamma=0.0), small_problem)
        assert res.step_losses == direct.step_losses

    def test_sweeps(self):
        vs = sweep_variants(CFG, alphas=[0, 0.25, 0.5, 0.75, 1.0], ks=[1, 10, 100])
        assert [v.name for v in vs][:2] == ["AD+VC alpha=0", "AD+VC alpha=0.25"]
        assert [v.k for v in vs[5:]] == [1, 10, 100]


@pytest.fixture(scope="module")
def rows():
    def make(k):
        return [synth_problem(k=k, seed=s)[1] for s in (1, 0)]

    variants = [parse_variant(n, CFG) for n in ("AD-only", "AD+VC", "AD+VC+CIM")]
    variants += sweep_variants(CFG, ks=[1, 100])
    return run_ablation(CFG, variants, make)


class TestAblation:
    def test_row_per_variant_and_split(self, rows):
        assert len(rows) == 5 * 2
        assert [r.split_id for r in rows[:2]] == ["synth-0", "synth-1"]
        for r in rows:
            assert set(r.metrics) == {"top1", "top5"}
            assert 0.0 <= r.metrics["top1"] <= r.metrics["top5"] <= 1.0

    def test_table(self, rows):
        lines = metrics_table(rows).splitlines()
        assert lines[0].split("\t")[:4] == ["variant", "split", "top1 (%)", "top5 (%)"]
        agg = [ln for ln in lines if "\taggregate\t" in ln]
        assert [ln.split("\t")[0] for ln in agg] == [
            "AD-only", "AD+VC", "AD+VC+CIM", "AD+VC k=1", "AD+VC k=100",
        ]
        assert all("±" in ln for ln in agg)

    def test_json(self, rows):
        doc = json.loads(metrics_json(rows))
        assert len(doc["rows"]) == 10 and doc["std"] == "population"
        first = doc["aggregate"][0]
        vals = [100 * r.metrics["top1"] for r in rows[:2]]
        assert first["top1"]["mean"] == pytest.approx(np.mean(vals))

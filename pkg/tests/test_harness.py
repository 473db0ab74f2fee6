import dataclasses
import math

import numpy as np
import pytest

from focalcir.benchgen import FilterThresholds, WorldConfig, build_benchmark
from focalcir.errors import ConfigError
from focalcir.evaluation import evaluate_model
from focalcir.geometry import iou
from focalcir.harness import (
    DEFAULT_SWEEP_UNITS,
    ablation_table_text,
    beta_sweep,
    caam_ablation,
    caam_param_count,
    comparison_table_text,
    expand_variant_grid,
    robustness_eval,
    robustness_table_text,
    roi_crop_baseline,
    sqrt_dk,
    variant_label,
)
from focalcir.model import ModelConfig, ModelParams, TrainConfig


@pytest.fixture(scope="module")
def tiny_bench():
    configs = [
        WorldConfig(subset="fashion", n_categories=2, instances_per_category=4,
                    images_per_instance=6, n_contexts=6, grid=(4, 4), d_latent=8,
                    bbox_size_range=(0.3, 0.6), reserve_instances_per_category=3,
                    reserve_images_per_instance=3),
    ]
    return build_benchmark(
        configs=configs, seed=17, d_model=16, l_text=2,
        train_cap=3, eval_cap=5, n_distractors=6,
        thresholds={"fashion": FilterThresholds(4, 0.95, 0.9, 3)},
    )


@pytest.fixture(scope="module")
def tiny_model(tiny_bench):
    cfg = ModelConfig(d_model=16, d_embed=16, m_queries=2, k_probes=2, l_text=2,
                      n_blocks=1, crm_layers=1)
    return ModelParams(cfg, tiny_bench.encoders, seed=5, zero_modulation_head=False)


# -- beta sweep -----------------------------------------------------------------


def test_sweep_shape_and_zero_row(tiny_bench, tiny_model):
    table = beta_sweep(tiny_model, tiny_bench, units=(0.0, 1.0, 4.0))
    assert len(table.rows) == 4
    assert table.rows[-1].label == "adaptive"
    assert table.rows[-1].beta_value is None

    baseline = evaluate_model(tiny_model, tiny_bench, beta_override=0.0)
    assert table.rows[0].beta_units == 0.0
    assert table.rows[0].metrics.to_dict() == baseline.to_dict()


def test_sweep_betas_scale_with_head_dim(tiny_model):
    scale = sqrt_dk(tiny_model.config)
    assert scale == math.sqrt(16.0)
    assert DEFAULT_SWEEP_UNITS == (0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)


def test_sweep_adaptive_row_matches_plain_eval(tiny_bench, tiny_model):
    table = beta_sweep(tiny_model, tiny_bench, units=(0.0,))
    plain = evaluate_model(tiny_model, tiny_bench)
    assert table.rows[-1].metrics.to_dict() == plain.to_dict()


def test_sweep_table_text(tiny_bench, tiny_model):
    table = beta_sweep(tiny_model, tiny_bench, units=(0.0, 2.0))
    text = table.to_text()
    lines = text.strip().split("\n")
    assert len(lines) == 1 + 3
    assert lines[0].startswith("label\t")
    assert lines[-1].startswith("adaptive\tadaptive")


# -- CAAM ablation ----------------------------------------------------------------


def test_variant_grid_is_exact_cross_product():
    grid = expand_variant_grid(
        crm_variants=("avg", "mlp"), probe_modes=(True, False),
        layer_counts=(1,), probe_counts=(2, 4), forms=("scalar",),
    )
    assert len(grid) == 8
    assert grid[0] == {"crm_variant": "avg", "probes_learnable": True,
                       "crm_layers": 1, "k_probes": 2, "modulation": "scalar"}
    labels = {variant_label(v) for v in grid}
    assert len(labels) == 8
    assert "crm=mlp probes=frozen layers=1 K=4 form=scalar" in labels


def test_ablation_rows_and_param_counts(tiny_bench):
    base = ModelConfig(d_model=16, d_embed=16, m_queries=2, k_probes=2, l_text=2,
                       n_blocks=1, crm_layers=1)
    variants = expand_variant_grid(
        crm_variants=("avg", "mlp"), probe_modes=(True,),
        layer_counts=(1,), probe_counts=(2,), forms=("scalar", "vector"),
    )
    cfg = TrainConfig(epochs=1, batch_size=8, seed=3)
    rows = caam_ablation(tiny_bench, base, cfg, variants, model_seed=5)
    assert [r.label for r in rows] == [variant_label(v) for v in variants]

    d = 16
    # avg: probes KD + cls D + head (D+1 outputs per unit)
    avg_scalar = 2 * d + d + (d + 1)
    assert rows[0].caam_param_count == avg_scalar
    # vector head emits M=2 values
    assert rows[1].caam_param_count == 2 * d + d + 2 * (d + 1)
    # mlp CRM adds w1,b1,w2,b2 with hidden width ffn_mult*d on top
    hidden = 2 * d
    mlp_extra = d * hidden + hidden + hidden * d + d
    assert rows[2].caam_param_count == avg_scalar + mlp_extra
    for r in rows:
        r.metrics.validate()
    text = ablation_table_text(rows)
    assert text.count("\n") == len(rows) + 1


def test_ablation_param_count_matches_named_params(tiny_bench, tiny_model):
    manual = sum(t.data.size for name, t in tiny_model.named_params()
                 if name.startswith("caam."))
    assert caam_param_count(tiny_model) == manual


def test_ablation_rejects_empty_grid(tiny_bench):
    base = ModelConfig(d_model=16, d_embed=16, m_queries=2, k_probes=2, l_text=2,
                       n_blocks=1, crm_layers=1)
    with pytest.raises(ConfigError):
        caam_ablation(tiny_bench, base, TrainConfig(epochs=1), [], model_seed=5)


# -- robustness ---------------------------------------------------------------------


def test_robustness_identity_row_equals_unperturbed(tiny_bench, tiny_model):
    rows = robustness_eval(tiny_model, tiny_bench,
                           perturbations=((1.0, "scale"),), include_no_bbox=False)
    assert len(rows) == 1
    assert rows[0].achieved_mean_iou == 1.0
    plain = evaluate_model(tiny_model, tiny_bench)
    assert rows[0].metrics.to_dict() == plain.to_dict()


def test_robustness_rows_record_achieved_iou(tiny_bench, tiny_model):
    rows = robustness_eval(
        tiny_model, tiny_bench,
        perturbations=((0.8, "scale"), (0.5, "scale_shift")), seed=9,
    )
    assert [r.label for r in rows] == ["iou=0.8 scale", "iou=0.5 scale_shift", "no-bbox"]
    assert abs(rows[0].achieved_mean_iou - 0.8) < 1e-9  # scale mode is exact
    assert abs(rows[1].achieved_mean_iou - 0.5) < 0.02
    assert rows[-1].achieved_mean_iou is None

    no_bbox = evaluate_model(tiny_model, tiny_bench, use_bbox=False, seed=9)
    assert rows[-1].metrics.to_dict() == no_bbox.to_dict()
    text = robustness_table_text(rows)
    assert text.count("\n") == len(rows) + 1
    assert "no-bbox\t-" in text


def test_robustness_deterministic(tiny_bench, tiny_model):
    kwargs = dict(perturbations=((0.5, "scale_shift"),), include_no_bbox=False, seed=4)
    a = robustness_eval(tiny_model, tiny_bench, **kwargs)
    b = robustness_eval(tiny_model, tiny_bench, **kwargs)
    assert a[0].achieved_mean_iou == b[0].achieved_mean_iou
    assert a[0].metrics.to_dict() == b[0].metrics.to_dict()


def test_robustness_perturbation_preserves_target(tiny_bench, tiny_model):
    # achieved IoU bookkeeping reflects per-query perturbation, not the mean of one
    rows = robustness_eval(tiny_model, tiny_bench,
                           perturbations=((0.8, "scale"),), include_no_bbox=False)
    row = rows[0]
    quad = tiny_bench.eval_quads[0]
    from focalcir.harness import _query_rng
    from focalcir.geometry import perturb_bbox
    box = perturb_bbox(quad.bbox, "scale", 0.8, _query_rng(0, quad))
    assert abs(iou(quad.bbox, box) - 0.8) < 1e-12
    assert 0.0 < row.metrics.macro.rid_at_1 <= 1.0 or row.metrics.macro.rid_at_1 == 0.0


# -- roi crop -----------------------------------------------------------------------


def test_roi_crop_baseline_trains_and_reports(tiny_bench):
    cfg = ModelConfig(d_model=16, d_embed=16, m_queries=2, k_probes=2, l_text=2,
                      n_blocks=1, crm_layers=1)
    params, report = roi_crop_baseline(
        tiny_bench, cfg, TrainConfig(epochs=1, batch_size=8, seed=3), model_seed=5
    )
    report.validate()
    assert report.per_subset["fashion"].n_queries == len(tiny_bench.eval_quads)
    # roi training leaves the modulation head at its zero init
    named = dict(params.named_params())
    assert not named["caam.wc"].data.any()


def test_roi_crop_skips_empty_box_queries_with_warning(tiny_bench):
    # a box between patch centers (grid 4x4 has centers at odd multiples of 1/8)
    bad = dataclasses.replace(tiny_bench.eval_quads[0], bbox=(0.9, 0.9, 0.95, 0.95))
    patched = dataclasses.replace(
        tiny_bench, eval_quads=[bad] + tiny_bench.eval_quads[1:]
    )
    cfg = ModelConfig(d_model=16, d_embed=16, m_queries=2, k_probes=2, l_text=2,
                      n_blocks=1, crm_layers=1)
    with pytest.warns(UserWarning, match="skipped 1"):
        _, report = roi_crop_baseline(
            patched, cfg, TrainConfig(epochs=1, batch_size=8, seed=3), model_seed=5
        )
    assert report.per_subset["fashion"].n_queries == len(tiny_bench.eval_quads) - 1


def test_comparison_table_text(tiny_bench, tiny_model):
    report = evaluate_model(tiny_model, tiny_bench)
    text = comparison_table_text([("baseline", report), ("adaptive", report)])
    lines = text.strip().split("\n")
    assert len(lines) == 3
    assert lines[1].startswith("baseline\t")

"""
Tests for dataset assembly, the warm-up + clustering stage, LOCO and the ablation
"""

import numpy as np
import pandas as pd
import pytest

from configs.configurations import MANIFEST_NAME
from src import experiments
from src.data_synth import DatasetError, export_dataset
from src.experiments import (
    SPLITS, build_dataset, load_dataset, loco_eval, predict_variant, run_ablation, run_pipeline, select_clusters,
    variant_config, warmup_and_cluster, with_seed
)
from src.pseudo_domain import ClusterModel


def true_domains(dataset):
    return {name: np.array([s.domain for s in dataset.samples[name]]) for name in SPLITS}


def style_cluster(dataset) -> ClusterModel:
    sizes = np.bincount(true_domains(dataset)["train"], minlength=2).tolist()
    return ClusterModel(k_star=2, centers=np.zeros((2, 8), dtype=np.float32), silhouette_by_k={2: 0.5}, seed=0, sizes=sizes)


def test_dataset_shapes(dataset):
    assert dataset.n_classes == 3
    assert [len(dataset.splits[n]) for n in SPLITS] == [48, 6, 6]
    assert len(dataset.boxes("test")) == 6
    ids = np.concatenate([dataset.splits[n].ids for n in SPLITS])
    assert len(set(ids.tolist())) == 60


def test_build_dataset_needs_train_and_val(dataset):
    with pytest.raises(DatasetError):
        build_dataset((dataset.samples["train"], [], dataset.samples["test"]))


def test_exported_splits_are_kept(dataset, config, tmp_path):
    export_dataset([s for n in SPLITS for s in dataset.samples[n]], tmp_path)
    assert (tmp_path / MANIFEST_NAME).is_file()
    loaded = load_dataset(config, tmp_path)
    for name in SPLITS:
        assert sorted(s.sample_id for s in loaded.samples[name]) == sorted(s.sample_id for s in dataset.samples[name])
        assert sorted(s.domain for s in loaded.samples[name]) == sorted(s.domain for s in dataset.samples[name])


def test_variant_configs(config):
    no_adv = variant_config(config, "no_adversarial")
    assert (no_adv.train.lambda_dom, no_adv.train.grl_lambda) == (0.0, 0.0)
    no_roi = variant_config(config, "no_roi")
    assert (no_roi.train.lambda_f, no_roi.train.lambda_route, no_roi.train.lambda_reg) == (0.0, 0.0, 0.0)
    assert variant_config(config, "no_routing") is config
    assert with_seed(config, 7).train.seed == 7
    assert config.train.seed == 0
    with pytest.raises(ValueError):
        variant_config(config, "no_backbone")


def test_select_clusters():
    cluster = ClusterModel(k_star=6, centers=np.zeros((6, 2)), silhouette_by_k={}, seed=0, sizes=[5, 50, 20, 1, 30, 10])
    assert select_clusters(cluster, "small") == [0, 3]
    assert select_clusters(cluster, "all") == list(range(6))
    with pytest.raises(ValueError):
        select_clusters(cluster, "tiny")


def test_warmup_and_cluster_labels_every_split(config, dataset):
    stage = warmup_and_cluster(config, dataset, progress=False)
    assert stage.cluster.k_star in config.cluster.candidates
    for name in SPLITS:
        assert len(stage.domains[name]) == len(dataset.splits[name])
        assert stage.domains[name].max() < stage.cluster.k_star
    assert sum(stage.cluster.sizes) == len(dataset.splits["train"])
    again = warmup_and_cluster(config, dataset, progress=False)
    assert again.snapshot_id == stage.snapshot_id
    np.testing.assert_array_equal(again.domains["test"], stage.domains["test"])


@pytest.mark.slow
def test_pipeline_rerun_reproduces_parameters(config, dataset):
    first = run_pipeline(config, dataset, progress=False)
    second = run_pipeline(config, dataset, progress=False)
    assert first.snapshot_id == second.snapshot_id
    np.testing.assert_array_equal(first.domains["test"], second.domains["test"])
    a, b = first.model.params.state_dict(), second.model.params.state_dict()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_predict_variant_usage(model, dataset, config):
    images = dataset.splits["test"].images
    assert predict_variant(model, "no_roi", images, config)[2] == 0.0
    assert predict_variant(model, "no_routing", images, config)[2] == 1.0
    preds, records, usage = predict_variant(model, "full", images, config)
    assert len(preds) == len(records) == len(images)
    assert 0.0 <= usage <= 1.0


def test_loco_training_never_sees_held_out_cluster(config, dataset, monkeypatch):
    seen = []
    original = experiments.train_with_domains

    def spy(model, cfg, train, val, n_domains, **kwargs):
        seen.append((set(train.domains.tolist()) | set(val.domains.tolist()), n_domains))
        return original(model, cfg, train, val, n_domains, **kwargs)

    monkeypatch.setattr(experiments, "train_with_domains", spy)
    frame = loco_eval(config, dataset, true_domains(dataset), style_cluster(dataset), group="all", variants=["full"])
    assert len(seen) == len(frame) >= 1
    for held_out, (domains, n_domains) in zip(frame["cluster_id"], seen):
        assert held_out not in domains
        assert n_domains == 2
    assert frame["accuracy"].between(0, 1).all()


@pytest.mark.slow
def test_loco_is_deterministic(config, dataset):
    args = (config, dataset, true_domains(dataset), style_cluster(dataset))
    first = loco_eval(*args, group="all", variants=["full", "no_adversarial"], seeds=[0, 1])
    second = loco_eval(*args, group="all", variants=["full", "no_adversarial"], seeds=[0, 1])
    assert len(first) >= 4
    pd.testing.assert_frame_equal(first, second)


def test_loco_needs_two_clusters(config, dataset):
    single = ClusterModel(k_star=1, centers=np.zeros((1, 8)), silhouette_by_k={}, seed=0, sizes=[48])
    with pytest.raises(ValueError):
        loco_eval(config, dataset, {n: np.zeros(len(dataset.splits[n]), dtype=int) for n in SPLITS}, single)


@pytest.mark.slow
def test_ablation_shares_the_full_model(config, dataset, monkeypatch):
    calls = []
    original = experiments.run_pipeline

    def spy(cfg, data, **kwargs):
        calls.append(cfg.train.lambda_dom)
        return original(cfg, data, **kwargs)

    monkeypatch.setattr(experiments, "run_pipeline", spy)
    frame = run_ablation(config, dataset, variants=["full", "no_routing", "no_adversarial"])
    assert frame["variant"].tolist() == ["full", "no_routing", "no_adversarial"]
    assert calls == [config.train.lambda_dom, 0.0]
    assert frame.set_index("variant").loc["no_routing", "roi_usage"] == 1.0

import struct
import zlib

import numpy as np
import pytest

from circuitgcl import autodiff as ad
from circuitgcl._errors import CheckpointError, ContractError, TrainingError
from circuitgcl.graphs import homogenize
from circuitgcl.netlist import (
    LabelSpec,
    bin_ground_caps,
    coupling_dataset,
    ground_cap_dataset,
    in_range_mask,
    normalize_labels,
)
from circuitgcl.scatter import EmbeddingMatrix
from circuitgcl.synth import SynthConfig, synth_generate
from circuitgcl.tasks import (
    EDGE_REGRESSION,
    NODE_CLASSIFICATION,
    MetricsReport,
    TaskConfig,
    classification_metrics,
    load_task_model,
    predict_edge,
    predict_edges,
    predict_node_class,
    predict_node_classes,
    regression_metrics,
    save_task_model,
    task_model_bytes,
    task_model_from_bytes,
    train_task,
)


def rng_for(seed):
    return np.random.default_rng(np.random.PCG64(seed))


def circuit_fixture(seed=3, cells=12):
    cg = synth_generate(SynthConfig(n_cells=cells, seed=seed))
    g = homogenize(cg)
    pairs, farads = coupling_dataset(cg)
    keep = in_range_mask(farads)
    edge_labels = (pairs[keep], normalize_labels(farads[keep]))
    ids, gfar = ground_cap_dataset(cg)
    keep = in_range_mask(gfar)
    node_labels = (ids[keep], bin_ground_caps(normalize_labels(gfar[keep])))
    return cg, g, edge_labels, node_labels


def random_embeddings(g, dim=8, seed=7):
    rng = rng_for(seed)
    return EmbeddingMatrix(ad.Tensor(rng.normal(0.0, 1.0, size=(g.n, dim))))


def quick_cfg(**kw):
    base = dict(epochs=12, learning_rate=0.05, batch_size=64, hidden_dim=8,
                n_layers=2, seed=0)
    base.update(kw)
    return TaskConfig(**base)


# ---------------------------------------------------------------------------
# config validation

class TestTaskConfig:
    def test_defaults_valid(self):
        cfg = TaskConfig()
        assert cfg.task == EDGE_REGRESSION
        assert cfg.hidden_dim == 144
        assert cfg.n_layers == 5

    def test_loss_task_mismatch(self):
        with pytest.raises(ContractError):
            TaskConfig(task=EDGE_REGRESSION, loss_kind="ce")
        with pytest.raises(ContractError):
            TaskConfig(task=NODE_CLASSIFICATION, loss_kind="mse")

    def test_unknown_task(self):
        with pytest.raises(ContractError):
            TaskConfig(task="link_prediction")

    def test_bad_numbers(self):
        with pytest.raises(ContractError):
            TaskConfig(epochs=0)
        with pytest.raises(ContractError):
            TaskConfig(learning_rate=0.0)
        with pytest.raises(ContractError):
            TaskConfig(dropout_rate=1.0)
        with pytest.raises(ContractError):
            TaskConfig(n_classes=1)
        with pytest.raises(ContractError):
            TaskConfig(sigma_noise=0.0)
        with pytest.raises(ContractError):
            TaskConfig(task=NODE_CLASSIFICATION, loss_kind="focal",
                       focal_gamma=-1.0)


# ---------------------------------------------------------------------------
# regression metrics, frozen oracle values

class TestRegressionMetrics:
    def test_hand_example(self):
        r = regression_metrics([0.0, 1.0], [1.0, 0.0])
        assert r.mae == pytest.approx(1.0, abs=1e-15)
        assert r.mse == pytest.approx(1.0, abs=1e-15)
        assert r.r2 == pytest.approx(-3.0, abs=1e-12)
        assert r.mae_log_decades == pytest.approx(6.0, abs=1e-12)

    def test_perfect_prediction(self):
        t = np.linspace(0.0, 1.0, 11)
        r = regression_metrics(t, t)
        assert r.mae == 0.0
        assert r.mse == 0.0
        assert r.r2 == 1.0

    def test_mean_predictor_r2_zero(self):
        rng = rng_for(4)
        t = rng.uniform(0.0, 1.0, size=50)
        p = np.full(50, t.mean())
        r = regression_metrics(p, t)
        assert abs(r.r2) < 1e-12

    def test_degenerate_sst(self):
        r = regression_metrics([0.5, 0.5], [0.5, 0.5])
        assert r.r2 == 1.0
        r = regression_metrics([0.4, 0.6], [0.5, 0.5])
        assert r.r2 == 0.0

    def test_per_bin_layout(self):
        t = np.array([0.05, 0.15, 0.95])
        p = np.array([0.10, 0.10, 0.90])
        r = regression_metrics(p, t)
        assert r.per_bin_count == [2, 0, 0, 0, 1]
        assert r.per_bin_mae[0] == pytest.approx(0.05, abs=1e-12)
        assert r.per_bin_mae[1] is None
        assert r.per_bin_mae[4] == pytest.approx(0.05, abs=1e-12)

    def test_bin_edges_clip(self):
        # 1.0 lands in the top bin, values just under bin edges stay below
        t = np.array([0.0, 0.2, 1.0])
        r = regression_metrics(t, t)
        assert r.per_bin_count == [1, 1, 0, 0, 1]

    def test_too_few_samples(self):
        with pytest.raises(ContractError):
            regression_metrics([0.5], [0.5])

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            regression_metrics([0.5, 0.5], [0.5])

    def test_json_round_trip(self):
        import json
        r = regression_metrics([0.0, 1.0], [1.0, 0.0])
        doc = json.loads(r.to_json())
        assert doc["version"] == 1
        assert doc["task"] == EDGE_REGRESSION
        assert doc["mae"] == pytest.approx(1.0)
        assert len(doc["per_bin_mae"]) == 5
        assert doc["per_bin_mae"][1] is None

    def test_text_table(self):
        r = regression_metrics([0.0, 1.0], [1.0, 0.0])
        text = r.to_text()
        assert "MAE" in text and "R2" in text
        assert "samples: 2" in text
        assert "bin" in text


# ---------------------------------------------------------------------------
# classification metrics, frozen oracle values

class TestClassificationMetrics:
    def test_hand_example_excluding_class_two(self):
        # targets [0,0,1,2] preds [0,1,1,0]; the class-2 sample is dropped
        r = classification_metrics([0, 1, 1, 0], [0, 0, 1, 2])
        assert r.count == 3
        assert r.accuracy == pytest.approx(2.0 / 3.0, abs=1e-12)
        # P_0 = 1/1, P_1 = 1/2, P_3 = P_4 = 0 over classes {0,1,3,4}
        assert r.precision == pytest.approx(0.375, abs=1e-12)
        assert r.recall == pytest.approx(0.375, abs=1e-12)
        assert r.f1 == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert r.excluded_classes == [2]

    def test_no_exclusion_single_class(self):
        r = classification_metrics([1, 1], [1, 1], excluded=frozenset())
        assert r.accuracy == 1.0
        # only class 1 scores, the other four contribute 0
        assert r.precision == pytest.approx(0.2, abs=1e-12)
        assert np.isfinite(r.f1)

    def test_all_samples_excluded(self):
        with pytest.raises(ContractError):
            classification_metrics([0, 1], [2, 2])

    def test_perfect_on_kept(self):
        preds = [0, 1, 3, 4, 0]
        targets = [0, 1, 3, 4, 2]
        r = classification_metrics(preds, targets)
        assert r.accuracy == 1.0
        assert r.precision == 1.0
        assert r.recall == 1.0
        assert r.f1 == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            classification_metrics([0], [0, 1])

    def test_json_fields(self):
        import json
        r = classification_metrics([0, 1, 1, 0], [0, 0, 1, 2])
        doc = json.loads(r.to_json())
        assert doc["task"] == NODE_CLASSIFICATION
        assert doc["excluded_classes"] == [2]
        assert doc["n_classes"] == 5
        assert doc["f1"] == pytest.approx(1.0 / 3.0)

    def test_text_table(self):
        r = classification_metrics([0, 1, 1, 0], [0, 0, 1, 2])
        text = r.to_text()
        assert "Precision" in text and "F1" in text
        assert "excluded target classes: [2]" in text


# ---------------------------------------------------------------------------
# training

class TestTrainTask:
    def test_edge_losses_decrease(self):
        cg, g, edge_labels, _ = circuit_fixture()
        emb = random_embeddings(g)
        for kind, extra in (("mse", {}), ("gai", {"sigma_noise": 0.2}),
                            ("bmc", {"sigma_noise": 0.3})):
            cfg = quick_cfg(loss_kind=kind, **extra)
            model = train_task(g, emb, edge_labels, cfg)
            losses = [h["loss"] for h in model.history]
            assert len(losses) == cfg.epochs
            assert losses[-1] < losses[0], kind

    def test_node_losses_decrease(self):
        cg, g, _, node_labels = circuit_fixture()
        emb = random_embeddings(g)
        for kind in ("ce", "focal", "bsmce"):
            cfg = quick_cfg(task=NODE_CLASSIFICATION, loss_kind=kind)
            model = train_task(g, emb, node_labels, cfg)
            losses = [h["loss"] for h in model.history]
            assert losses[-1] < losses[0], kind

    def test_deterministic(self):
        cg, g, edge_labels, _ = circuit_fixture()
        emb = random_embeddings(g)
        cfg = quick_cfg(epochs=4)
        a = train_task(g, emb, edge_labels, cfg)
        b = train_task(g, emb, edge_labels, cfg)
        assert a.backbone.w_in.data.tobytes() == b.backbone.w_in.data.tobytes()
        assert a.head.w2.data.tobytes() == b.head.w2.data.tobytes()

    def test_seed_changes_result(self):
        cg, g, edge_labels, _ = circuit_fixture()
        emb = random_embeddings(g)
        a = train_task(g, emb, edge_labels, quick_cfg(epochs=3, seed=0))
        b = train_task(g, emb, edge_labels, quick_cfg(epochs=3, seed=1))
        assert a.backbone.w_in.data.tobytes() != b.backbone.w_in.data.tobytes()

    def test_gai_stores_prior(self):
        cg, g, edge_labels, _ = circuit_fixture()
        emb = random_embeddings(g)
        model = train_task(g, emb, edge_labels,
                           quick_cfg(epochs=2, loss_kind="gai",
                                     sigma_noise=0.2, gmm_components=3))
        assert model.gmm_prior is not None
        assert model.gmm_prior.K <= 3

    def test_bsmce_prior_smoothed(self):
        cg, g, _, node_labels = circuit_fixture()
        emb = random_embeddings(g)
        model = train_task(g, emb, node_labels,
                           quick_cfg(task=NODE_CLASSIFICATION,
                                     loss_kind="bsmce", epochs=2))
        prior = np.asarray(model.class_prior)
        assert len(prior) == 5
        assert prior.min() > 0.0
        assert prior.sum() == pytest.approx(1.0, abs=1e-12)

    def test_fine_tune_embeddings(self):
        cg, g, edge_labels, _ = circuit_fixture()
        emb = random_embeddings(g)
        frozen = train_task(g, emb, edge_labels, quick_cfg(epochs=3))
        assert frozen.tuned_embeddings is None
        tuned = train_task(g, emb, edge_labels,
                           quick_cfg(epochs=3, fine_tune_embeddings=True))
        assert tuned.tuned_embeddings is not None
        assert not np.allclose(tuned.tuned_embeddings, emb.data)
        preds = predict_edges(tuned, g, tuned.tuned_embeddings,
                              edge_labels[0][:4])
        assert preds.shape == (4,)

    def test_embedding_count_mismatch(self):
        cg, g, edge_labels, _ = circuit_fixture()
        other = synth_generate(SynthConfig(n_cells=5, seed=9))
        emb = random_embeddings(homogenize(other))
        with pytest.raises(ContractError):
            train_task(g, emb, edge_labels, quick_cfg())

    def test_empty_labels(self):
        cg, g, _, _ = circuit_fixture()
        emb = random_embeddings(g)
        empty = (np.zeros((0, 2), dtype=np.int64), np.zeros(0))
        with pytest.raises(ContractError):
            train_task(g, emb, empty, quick_cfg())

    def test_bad_endpoint_ids(self):
        cg, g, _, _ = circuit_fixture()
        emb = random_embeddings(g)
        labels = (np.array([[0, g.n]]), np.array([0.5]))
        with pytest.raises(ContractError):
            train_task(g, emb, labels, quick_cfg())

    def test_class_label_out_of_range(self):
        cg, g, _, node_labels = circuit_fixture()
        emb = random_embeddings(g)
        ids = node_labels[0][:3]
        labels = (ids, np.array([0, 1, 7]))
        with pytest.raises(ContractError):
            train_task(g, emb, labels,
                       quick_cfg(task=NODE_CLASSIFICATION, loss_kind="ce"))

    def test_class_labels_on_device_node(self):
        cg, g, _, _ = circuit_fixture()
        emb = random_embeddings(g)
        device = int(np.flatnonzero(np.asarray(g.x) == 1)[0])
        labels = (np.array([device]), np.array([0]))
        with pytest.raises(ContractError):
            train_task(g, emb, labels,
                       quick_cfg(task=NODE_CLASSIFICATION, loss_kind="ce"))

    def test_non_integral_class_labels(self):
        cg, g, _, node_labels = circuit_fixture()
        emb = random_embeddings(g)
        labels = (node_labels[0][:2], np.array([0.5, 1.0]))
        with pytest.raises(ContractError):
            train_task(g, emb, labels,
                       quick_cfg(task=NODE_CLASSIFICATION, loss_kind="ce"))

    def test_divergence_reported_with_epoch(self):
        cg, g, edge_labels, _ = circuit_fixture()
        emb = random_embeddings(g)
        cfg = quick_cfg(epochs=6, learning_rate=1e200, activation="prelu")
        with pytest.raises(TrainingError, match="epoch"):
            train_task(g, emb, edge_labels, cfg)


# ---------------------------------------------------------------------------
# prediction

@pytest.fixture(scope="module")
def pred_setup():
    cg, g, edge_labels, node_labels = circuit_fixture()
    emb = random_embeddings(g)
    edge_model = train_task(g, emb, edge_labels, quick_cfg(epochs=3))
    node_model = train_task(g, emb, node_labels,
                            quick_cfg(task=NODE_CLASSIFICATION,
                                      loss_kind="ce", epochs=3))
    return cg, g, emb, edge_model, node_model, edge_labels, node_labels


class TestPrediction:
    def test_edge_range(self, pred_setup):
        _, g, emb, edge_model, _, edge_labels, _ = pred_setup
        preds = predict_edges(edge_model, g, emb, edge_labels[0])
        assert preds.min() >= 0.0
        assert preds.max() <= 1.0

    def test_edge_symmetry_exact(self, pred_setup):
        _, g, emb, edge_model, _, edge_labels, _ = pred_setup
        for u, v in edge_labels[0][:6]:
            assert (predict_edge(edge_model, g, emb, (u, v))
                    == predict_edge(edge_model, g, emb, (v, u)))

    def test_singleton_matches_vectorized(self, pred_setup):
        # same math, but a 1-row matmul may take a different BLAS kernel
        _, g, emb, edge_model, _, edge_labels, _ = pred_setup
        pairs = edge_labels[0][:5]
        batch = predict_edges(edge_model, g, emb, pairs)
        for i, (u, v) in enumerate(pairs):
            single = predict_edge(edge_model, g, emb, (u, v))
            assert single == pytest.approx(batch[i], rel=1e-12, abs=1e-14)

    def test_empty_pairs(self, pred_setup):
        _, g, emb, edge_model, _, _, _ = pred_setup
        assert predict_edges(edge_model, g, emb,
                             np.zeros((0, 2), dtype=np.int64)).shape == (0,)

    def test_bad_ids(self, pred_setup):
        _, g, emb, edge_model, _, _, _ = pred_setup
        with pytest.raises(ContractError):
            predict_edges(edge_model, g, emb, [(0, g.n)])

    def test_wrong_task_rejected(self, pred_setup):
        _, g, emb, edge_model, node_model, edge_labels, node_labels = pred_setup
        with pytest.raises(ContractError):
            predict_edges(node_model, g, emb, edge_labels[0][:1])
        with pytest.raises(ContractError):
            predict_node_class(edge_model, g, emb, int(node_labels[0][0]))

    def test_node_class_output(self, pred_setup):
        _, g, emb, _, node_model, _, node_labels = pred_setup
        cls, logits = predict_node_class(node_model, g, emb,
                                         int(node_labels[0][0]))
        assert 0 <= cls < 5
        assert logits.shape == (5,)
        assert cls == int(np.argmax(logits))

    def test_node_classes_vectorized(self, pred_setup):
        _, g, emb, _, node_model, _, node_labels = pred_setup
        ids = node_labels[0][:8]
        classes, logits = predict_node_classes(node_model, g, emb, ids)
        assert classes.shape == (len(ids),)
        assert logits.shape == (len(ids), 5)
        np.testing.assert_array_equal(classes, np.argmax(logits, axis=1))

    def test_node_class_rejects_device(self, pred_setup):
        _, g, emb, _, node_model, _, _ = pred_setup
        device = int(np.flatnonzero(np.asarray(g.x) == 1)[0])
        with pytest.raises(ContractError):
            predict_node_class(node_model, g, emb, device)

    def test_embedding_dim_mismatch(self, pred_setup):
        _, g, emb, edge_model, _, edge_labels, _ = pred_setup
        wrong = random_embeddings(g, dim=5)
        with pytest.raises(ContractError):
            predict_edges(edge_model, g, wrong, edge_labels[0][:1])

    def test_plain_array_accepted(self, pred_setup):
        _, g, emb, edge_model, _, edge_labels, _ = pred_setup
        a = predict_edges(edge_model, g, emb, edge_labels[0][:3])
        b = predict_edges(edge_model, g, np.asarray(emb.data),
                          edge_labels[0][:3])
        np.testing.assert_array_equal(a, b)

    def test_transfer_to_other_graph(self, pred_setup):
        # a model trained on one circuit scores pairs on another
        _, _, _, edge_model, _, _, _ = pred_setup
        cg2, g2, labels2, _ = circuit_fixture(seed=11, cells=9)
        emb2 = random_embeddings(g2, seed=13)
        preds = predict_edges(edge_model, g2, emb2, labels2[0])
        assert preds.shape == (len(labels2[0]),)
        assert np.isfinite(preds).all()


# ---------------------------------------------------------------------------
# serialization

@pytest.fixture(scope="module")
def ser_setup():
    cg, g, edge_labels, node_labels = circuit_fixture()
    emb = random_embeddings(g)
    edge_model = train_task(g, emb, edge_labels,
                            quick_cfg(epochs=2, activation="prelu"))
    node_model = train_task(g, emb, node_labels,
                            quick_cfg(task=NODE_CLASSIFICATION,
                                      loss_kind="bsmce", epochs=2))
    return g, emb, edge_model, node_model, edge_labels, node_labels


class TestTaskModelSerialization:
    def test_edge_round_trip(self, ser_setup):
        g, emb, edge_model, _, edge_labels, _ = ser_setup
        clone = task_model_from_bytes(task_model_bytes(edge_model))
        a = predict_edges(edge_model, g, emb, edge_labels[0])
        b = predict_edges(clone, g, emb, edge_labels[0])
        np.testing.assert_array_equal(a, b)
        assert clone.loss_kind == edge_model.loss_kind
        assert clone.emb_dim == edge_model.emb_dim

    def test_node_round_trip(self, ser_setup):
        g, emb, _, node_model, _, node_labels = ser_setup
        clone = task_model_from_bytes(task_model_bytes(node_model))
        a = predict_node_classes(node_model, g, emb, node_labels[0])[1]
        b = predict_node_classes(clone, g, emb, node_labels[0])[1]
        np.testing.assert_array_equal(a, b)
        assert clone.task == NODE_CLASSIFICATION
        assert clone.n_classes == 5

    def test_file_round_trip(self, ser_setup, tmp_path):
        g, emb, edge_model, _, edge_labels, _ = ser_setup
        path = tmp_path / "model.cgtm"
        save_task_model(path, edge_model)
        clone = load_task_model(path)
        np.testing.assert_array_equal(
            predict_edges(edge_model, g, emb, edge_labels[0][:4]),
            predict_edges(clone, g, emb, edge_labels[0][:4]))

    def test_tuned_embeddings_round_trip(self):
        cg, g, edge_labels, _ = circuit_fixture(seed=5, cells=8)
        emb = random_embeddings(g)
        model = train_task(g, emb, edge_labels,
                           quick_cfg(epochs=2, fine_tune_embeddings=True))
        clone = task_model_from_bytes(task_model_bytes(model))
        np.testing.assert_array_equal(clone.tuned_embeddings,
                                      model.tuned_embeddings)

    def test_bad_magic(self, ser_setup):
        _, _, edge_model, _, _, _ = ser_setup
        blob = bytearray(task_model_bytes(edge_model))
        blob[0] ^= 0xFF
        with pytest.raises(CheckpointError):
            task_model_from_bytes(bytes(blob))

    def test_corrupt_payload(self, ser_setup):
        _, _, edge_model, _, _, _ = ser_setup
        blob = bytearray(task_model_bytes(edge_model))
        blob[40] ^= 0x01
        with pytest.raises(CheckpointError):
            task_model_from_bytes(bytes(blob))

    def test_truncated(self, ser_setup):
        _, _, edge_model, _, _, _ = ser_setup
        blob = task_model_bytes(edge_model)
        with pytest.raises(CheckpointError):
            task_model_from_bytes(blob[: len(blob) // 2])

    def test_unknown_version(self, ser_setup):
        _, _, edge_model, _, _, _ = ser_setup
        blob = task_model_bytes(edge_model)
        payload = blob[8:-4]
        rebuilt = b"CGTM" + struct.pack("<I", 9) + payload
        rebuilt += struct.pack("<I", zlib.crc32(rebuilt))
        with pytest.raises(CheckpointError, match="9"):
            task_model_from_bytes(rebuilt)

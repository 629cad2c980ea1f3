"""Schedule, preprocessing regimes, training-loop and evaluation contracts."""

import json
import math

import numpy as np
import pytest
import torch

from agm import ganstyle, metrics
from agm.datapipe import SynthConfig, generate_synthetic
from agm.errors import ConfigError, DataError
from agm.harness import (
    Checkpoint,
    TrainConfig,
    evaluate,
    extract_embeddings,
    lr_at,
    modality_gap_statistic,
    preprocess_agm,
    train,
)
from agm.imaging import Modality, load_image
from agm.losses import LossConfig
from helpers import tiny_train_config


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = SynthConfig(
        num_identities=4, images_per_identity_per_modality=3, height=16, width=8, seed=7
    )
    return generate_synthetic(cfg, out)


@pytest.fixture(scope="module")
def gan_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("gan") / "gan.pt"
    cfg = ganstyle.GanConfig(base_channels_g=4, base_channels_d=4, residual_blocks=1, seed=0)
    model = ganstyle.GanModel.create(cfg)
    ganstyle.save_gan(model, out, cfg)
    return out


class TestLrSchedule:
    def test_paper_anchor_values(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == pytest.approx(0.01)
        assert lr_at(5, cfg) == pytest.approx(0.055)
        assert lr_at(15, cfg) == pytest.approx(0.1)

    def test_exhaustive_piecewise_table(self):
        cfg = TrainConfig()
        for epoch in range(80):
            if epoch < 10:
                expected = 0.01 + (0.1 - 0.01) * epoch / 10
            elif epoch < 20:
                expected = 0.1
            elif epoch < 50:
                expected = 0.01
            else:
                expected = 0.001
            assert lr_at(epoch, cfg) == pytest.approx(expected, abs=0.0), epoch

    def test_continuous_at_warmup_boundary(self):
        cfg = TrainConfig()
        assert lr_at(9, cfg) == pytest.approx(0.091)
        assert lr_at(10, cfg) == pytest.approx(0.1)

    def test_out_of_range_rejected(self):
        cfg = TrainConfig()
        for epoch in (-1, 80, 1000):
            with pytest.raises(ConfigError):
                lr_at(epoch, cfg)


class TestTrainConfig:
    def test_pk_consistency_enforced(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=64, pk_p=10, pk_k=4)

    def test_anchor_ordering_enforced(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_epochs=30, peak_until=20)

    def test_desk_profile(self):
        cfg = TrainConfig.desk(seed=5)
        assert cfg.total_epochs == 20
        assert cfg.batch_size == cfg.pk_p * cfg.pk_k
        assert cfg.seed == 5

    def test_dict_round_trip(self):
        cfg = TrainConfig.desk(loss=LossConfig(omega=0.7), seed=9)
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg


class TestPreprocessAgm:
    def test_rgb_ir_is_identity_passthrough(self, dataset):
        assert preprocess_agm(dataset, "rgb-ir") is dataset

    def test_gray_ir_grays_visible_only(self, dataset, tmp_path):
        out = preprocess_agm(dataset, "gray-ir", tmp_path)
        assert len(out) == len(dataset)
        for record in out.records:
            px = load_image(record.path, record.modality, record.identity).pixels
            channels_equal = bool(
                np.array_equal(px[:, :, 0], px[:, :, 1]) and np.array_equal(px[:, :, 1], px[:, :, 2])
            )
            if record.modality == Modality.VISIBLE:
                assert channels_equal
        # infrared records untouched
        ir_old = [r.path for r in dataset.records if r.modality == Modality.INFRARED]
        ir_new = [r.path for r in out.records if r.modality == Modality.INFRARED]
        assert ir_old == ir_new

    def test_agm_mode_outputs_all_channel_equal(self, dataset, gan_ckpt, tmp_path):
        out = preprocess_agm(dataset, "agm", tmp_path, gan_ckpt=gan_ckpt)
        assert len(out) == len(dataset)
        for record in out.records:
            px = load_image(record.path, record.modality, record.identity).pixels
            assert np.array_equal(px[:, :, 0], px[:, :, 1])
            assert np.array_equal(px[:, :, 1], px[:, :, 2])

    def test_counts_and_modality_tags_preserved(self, dataset, gan_ckpt, tmp_path):
        for mode in ("rgb-ir+gn", "gray-ir"):
            out = preprocess_agm(dataset, mode, tmp_path / mode.replace("+", "_"), gan_ckpt=gan_ckpt)
            assert [r.modality for r in out.records] == [r.modality for r in dataset.records]
            assert [r.identity for r in out.records] == [r.identity for r in dataset.records]

    def test_gn_mode_without_checkpoint_rejected(self, dataset, tmp_path):
        with pytest.raises(ConfigError):
            preprocess_agm(dataset, "gray-ir+gn", tmp_path)

    def test_unknown_mode_rejected(self, dataset, tmp_path):
        with pytest.raises(ConfigError):
            preprocess_agm(dataset, "sepia", tmp_path)

    def test_agm_collapses_modality_gap(self, dataset, gan_ckpt, tmp_path):
        baseline = modality_gap_statistic(dataset)
        assert baseline > 1.0
        aligned = preprocess_agm(dataset, "agm", tmp_path, gan_ckpt=gan_ckpt)
        assert modality_gap_statistic(aligned) < 0.1 * baseline


def run_training(dataset, tmp_path=None, **overrides):
    cfg = tiny_train_config(**overrides)
    records = []
    ckpt = train(dataset, cfg, out_dir=tmp_path, log_hook=records.append)
    return cfg, ckpt, records


class TestTrain:
    def test_smoke_one_epoch(self, dataset, tmp_path):
        cfg, ckpt, records = run_training(dataset, tmp_path / "run", total_epochs=1,
                                          warmup_epochs=1, peak_until=1, mid_until=1)
        assert ckpt.epoch == 1
        assert records, "at least one training step expected"
        for rec in records:
            assert math.isfinite(rec["total"])
        logged = [json.loads(line) for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
        assert logged == records
        assert set(records[0]) == {
            "step", "epoch", "l_id_g", "l_id_h", "l_id_joint",
            "l_t_g", "l_t_h", "l_t_joint", "kl_g", "kl_h", "total",
        }
        assert (tmp_path / "run" / "last.pt").exists()

    def test_two_runs_same_seed_identical_logs(self, dataset):
        _, _, a = run_training(dataset, total_epochs=2, warmup_epochs=1, peak_until=1, mid_until=2)
        _, _, b = run_training(dataset, total_epochs=2, warmup_epochs=1, peak_until=1, mid_until=2)
        assert a == b

    def test_different_seed_changes_trajectory(self, dataset):
        _, _, a = run_training(dataset, total_epochs=1, warmup_epochs=1, peak_until=1, mid_until=1, seed=11)
        _, _, b = run_training(dataset, total_epochs=1, warmup_epochs=1, peak_until=1, mid_until=1, seed=12)
        assert a != b

    def test_single_branch_mode(self, dataset):
        _, ckpt, records = run_training(dataset, total_epochs=1, warmup_epochs=1, peak_until=1,
                                        mid_until=1, use_hs=False)
        for rec in records:
            assert rec["l_id_h"] == 0.0 and rec["l_t_joint"] == 0.0
            assert rec["total"] == pytest.approx(rec["l_id_g"] + rec["l_t_g"], abs=1e-6)

    def test_frozen_hs_with_zero_couplings_matches_single_branch(self, dataset):
        shared = dict(total_epochs=2, warmup_epochs=1, peak_until=1, mid_until=2)
        _, _, solo = run_training(dataset, use_hs=False, **shared)
        _, _, duo = run_training(
            dataset,
            use_hs=True,
            freeze_hs=True,
            include_joint_losses=False,
            loss=LossConfig(lambda3=0.0, lambda4=0.0, omega=0.0),
            **shared,
        )
        assert len(solo) == len(duo)
        for a, b in zip(solo, duo):
            assert abs(a["l_t_g"] - b["l_t_g"]) < 1e-6
            assert abs(a["l_id_g"] - b["l_id_g"]) < 1e-6

    def test_sequential_update_mode_smoke(self, dataset):
        _, _, records = run_training(dataset, total_epochs=1, warmup_epochs=1, peak_until=1,
                                     mid_until=1, update_mode="sequential")
        assert all(math.isfinite(r["total"]) for r in records)

    def test_class_count_mismatch_rejected(self, dataset):
        cfg = tiny_train_config()
        single = dataset.select(identities=[0])
        with pytest.raises((ConfigError, DataError)):
            train(single, cfg)


class TestGradientFlow:
    def test_every_parameter_trains_on_real_batches(self, tmp_path):
        # no dead sub-graphs: every parameter of both branches and all
        # three heads accumulates a nonzero gradient within a few batches
        from agm.backbone import images_to_tensor
        from agm.datapipe import SynthConfig, generate_synthetic, pk_sample
        from agm.harness import AgmNet, _augment_policy, _prepare_pair, compute_objective
        from agm.imaging import augment

        fix = SynthConfig(num_identities=8, images_per_identity_per_modality=4,
                          height=72, width=36, seed=1)
        index = generate_synthetic(fix, tmp_path / "d")
        cfg = TrainConfig.desk(seed=5, pk_p=4, pk_k=4, batch_size=16)
        model = AgmNet(cfg, num_classes=8)
        model.train()
        params = [
            (f"{name}.{pn}", p)
            for name, mod in model.modules().items()
            for pn, p in mod.named_parameters()
        ]
        accum = {n: torch.zeros_like(p) for n, p in params}
        for step, batch in enumerate(pk_sample(index, 4, 4, seed=2)):
            g_imgs, h_imgs, labels = [], [], []
            for i, rec in enumerate(batch):
                g, hs = _prepare_pair(index.load(rec), cfg)
                g_imgs.append(augment(g, _augment_policy(cfg, 0, i, "global")))
                h_imgs.append(augment(hs, _augment_policy(cfg, 0, i, "hs")))
                labels.append(index.label_for(rec))
            lab = torch.as_tensor(labels)
            emb = model.forward_batch(images_to_tensor(g_imgs), images_to_tensor(h_imgs), lab)
            bundle = compute_objective(model, emb, lab, cfg)
            grads = torch.autograd.grad(bundle.total, [p for _, p in params], allow_unused=True)
            for (n, _), g in zip(params, grads):
                if g is not None:
                    accum[n] += g.abs()
            if step >= 2:
                break
        dead = [n for n, a in accum.items() if a.max().item() == 0.0]
        assert not dead, f"parameters with no gradient on any batch: {dead}"


class TestCheckpointRoundTrip:
    def test_save_load_evaluate_bitwise(self, dataset, tmp_path):
        _, ckpt, _ = run_training(dataset, total_epochs=1, warmup_epochs=1, peak_until=1, mid_until=1)
        query = dataset.select(modality=Modality.INFRARED)
        gallery = dataset.select(modality=Modality.VISIBLE)
        before = evaluate(ckpt, query, gallery)
        ckpt.save(tmp_path / "ck.pt")
        loaded = Checkpoint.load(tmp_path / "ck.pt")
        after = evaluate(loaded, query, gallery)
        assert before == after
        a = extract_embeddings(ckpt.build_model(), query)
        b = extract_embeddings(loaded.build_model(), query)
        assert torch.equal(a.vectors, b.vectors)

    def test_corrupt_checkpoint_rejected(self, tmp_path):
        torch.save({"kind": "other"}, tmp_path / "bad.pt")
        with pytest.raises(DataError):
            Checkpoint.load(tmp_path / "bad.pt")


class TestEvaluate:
    def test_deterministic(self, dataset):
        _, ckpt, _ = run_training(dataset, total_epochs=1, warmup_epochs=1, peak_until=1, mid_until=1)
        query = dataset.select(modality=Modality.INFRARED)
        gallery = dataset.select(modality=Modality.VISIBLE)
        assert evaluate(ckpt, query, gallery) == evaluate(ckpt, query, gallery)

    def test_metrics_json_written(self, dataset, tmp_path):
        _, ckpt, _ = run_training(dataset, total_epochs=1, warmup_epochs=1, peak_until=1, mid_until=1)
        query = dataset.select(modality=Modality.INFRARED)
        gallery = dataset.select(modality=Modality.VISIBLE)
        payload = evaluate(ckpt, query, gallery, out_path=tmp_path / "m.json")
        on_disk = json.loads((tmp_path / "m.json").read_text())
        assert on_disk == payload
        assert set(payload) == {
            "rank1", "rank5", "rank10", "rank20", "mAP", "mINP", "num_query", "num_gallery",
        }

    def test_self_gallery_with_self_match_excluded(self, dataset):
        _, ckpt, _ = run_training(dataset, total_epochs=1, warmup_epochs=1, peak_until=1, mid_until=1)
        sub = dataset.select(modality=Modality.VISIBLE)
        payload = evaluate(ckpt, sub, sub, exclusion=lambda q, g: q.path == g.path)

        model = ckpt.build_model()
        emb = extract_embeddings(model, sub).vectors.numpy().astype(np.float64)
        labels = np.array([r.identity for r in sub.records])
        hits = 0
        for i in range(len(emb)):
            best, best_d = None, None
            for j in range(len(emb)):
                if j == i:
                    continue
                d = math.sqrt(((emb[i] - emb[j]) ** 2).sum())
                if best_d is None or d < best_d:
                    best, best_d = j, d
            hits += int(labels[best] == labels[i])
        assert payload["rank1"] == pytest.approx(hits / len(emb))

    def test_untrained_model_against_permutation_baseline(self, dataset):
        # An untrained net cannot do worse than chance; it does retain some
        # structural signal (random conv features see the shared geometry
        # that makes the task learnable at all), so only the lower bound is
        # a valid two-sided invariant here.
        cfg = tiny_train_config(seed=123)
        from agm.harness import AgmNet, _snapshot

        model = AgmNet(cfg, num_classes=dataset.num_classes)
        ckpt = Checkpoint(config=cfg, num_classes=dataset.num_classes, epoch=0, state=_snapshot(model))
        query = dataset.select(modality=Modality.INFRARED)
        gallery = dataset.select(modality=Modality.VISIBLE)
        payload = evaluate(ckpt, query, gallery)

        q_emb = extract_embeddings(ckpt.build_model(), query)
        g_emb = extract_embeddings(ckpt.build_model(), gallery)
        ranking = metrics.rank(q_emb, g_emb)
        mean, std = metrics.permutation_baseline(ranking, n_shuffles=1000, seed=0)
        assert payload["mAP"] >= mean - 3 * std
        assert payload["mAP"] <= 1.0

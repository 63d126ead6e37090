import math

import numpy as np
import pytest

from literec import tensor as T
from literec.data import Example, UserSequence, leave_one_out_split, make_batches
from literec.errors import ChecksumError, ContractError, FormatError, TrainingError, VersionError
from literec.item_encoder import ItemEncoderConfig, ItemTokens
from literec.model import LiteRec
from literec.rec_encoder import RecEncoderConfig
from literec.training import (
    CKPT_MAGIC, Checkpoint, TrainConfig, Trainer, compute_loss, early_stop_check, lite_trainer, load_checkpoint,
    restore_trainer, save_checkpoint, train_lite, trainable_parameters, trainer_checkpoint,
)


def small_model(n_items=50, vocab=40, seed=0, d=32):
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, vocab, (n_items, 4))
    item_cfg = ItemEncoderConfig(layers=1, heads=2, model_dim=d, ff_dim=2 * d, max_item_text_len=4, dropout=0.0)
    rec_cfg = RecEncoderConfig(layers=1, heads=2, model_dim=d, ff_dim=2 * d, max_seq_len=6, dropout=0.0)
    return LiteRec(item_cfg, rec_cfg, n_items, vocab, ItemTokens(ids, np.ones_like(ids, bool)), seed=seed)


def small_split(n_users=40, n_items=50, seed=1):
    rng = np.random.default_rng(seed)
    return leave_one_out_split([UserSequence(u, str(u), rng.integers(0, n_items, 12).tolist()) for u in range(n_users)])


def small_config(**kw):
    base = dict(max_seq_len=6, batch_size=16, epochs=3, dropout=0.0, validate=False, seed=3)
    return TrainConfig(**{**base, **kw})


def overfit_64(max_epochs=200, seed=0):
    """Train on 64 fixed sequences until every training target is ranked first.

    Returns the epoch at which Recall@1 on the training targets reached 1.0,
    or None if it never did.
    """
    rng = np.random.default_rng(seed)
    model = small_model(seed=seed)
    examples = [Example(u, tuple(rng.choice(50, 5, replace=False).tolist()), int(rng.integers(50))) for u in range(64)]
    batch = make_batches(examples, 64, 5, model.pad_index)[0]
    cfg = TrainConfig(lr=3e-3, batch_size=64, dropout=0.0, weight_decay=0.0, warmup_fraction=0.0,
                      epochs=max_epochs, validate=False, seed=seed)

    def loss(chunk):
        b = make_batches(chunk, len(chunk), 5, model.pad_index)[0]
        return compute_loss(model(b.inputs, b.mask), b.targets)

    trainer = Trainer(model, cfg, lambda r: examples, loss)
    for epoch in range(1, max_epochs + 1):
        trainer.train_epoch()
        model.eval()
        if np.all(model.score(batch.inputs, batch.mask).argmax(axis=1) == batch.targets):
            return epoch
    return None


def scripted_fit(trace, patience=20):
    """Run the trainer with a validation callback replaying ``trace``."""
    model = small_model()
    split = small_split()
    cfg = small_config(epochs=len(trace), early_stop_patience=patience, validate=True)
    values = iter(trace)
    trainer = lite_trainer(model, split, cfg)
    snapshots = []
    trainer.validate = lambda: (snapshots.append(model.state_dict()), next(values))[1]
    return trainer.fit(), snapshots, model


def params_of(model, group):
    return {n: p.data.copy() for n, p in model.named_parameters() if n.split(".", 1)[0] == group}


class TestConfig:
    @pytest.mark.parametrize("kw", [{"strategy": "both"}, {"early_stop_patience": 0}, {"lr": 0}, {"batch_size": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_profiles(self):
        assert TrainConfig.profile("desk") == TrainConfig()
        paper = TrainConfig.profile("paper")
        assert (paper.lr, paper.batch_size, paper.dropout, paper.weight_decay) == (5e-4, 256, 0.8, 0.1)
        assert TrainConfig.profile("paper", lr=0.1).lr == 0.1
        with pytest.raises(ValueError):
            TrainConfig.profile("huge")


class TestLoss:
    def test_uniform_logits(self):
        loss = compute_loss(T.Tensor(np.zeros((1, 100))), np.array([7]))
        assert loss.item() == pytest.approx(math.log(100), abs=1e-12)

    def test_confident_target(self):
        logits = np.zeros((1, 10))
        logits[0, 2] = 60.0
        assert compute_loss(T.Tensor(logits), np.array([2])).item() < 1e-20

    def test_manual_recomputation(self):
        rng = np.random.default_rng(0)
        logits, targets = rng.standard_normal((5, 13)), rng.integers(0, 13, 5)
        ref = np.mean([-(z[t] - z.max() - np.log(np.exp(z - z.max()).sum())) for z, t in zip(logits, targets)])
        assert compute_loss(T.Tensor(logits), targets).item() == pytest.approx(ref, abs=1e-12)


class TestEarlyStop:
    def test_increasing_continues(self):
        d = early_stop_check([0.1, 0.2, 0.3, 0.4])
        assert not d.stop and d.best_epoch == 4

    def test_stops_after_patience(self):
        d = early_stop_check([0.1, 0.2, 0.5] + [0.4] * 20)
        assert d.stop and d.best_epoch == 3 and d.best_value == 0.5
        assert not early_stop_check([0.1, 0.2, 0.5] + [0.4] * 19).stop

    def test_equal_value_is_not_improvement(self):
        assert early_stop_check([0.5] + [0.5] * 20).stop

    def test_late_improvement_resets(self):
        trace = [0.1, 0.3] + [0.2] * 19 + [0.35]
        d = early_stop_check(trace)
        assert not d.stop and d.best_epoch == 22

    def test_empty(self):
        with pytest.raises(ContractError):
            early_stop_check([])

    def test_trainer_stops_twenty_after_best(self):
        trace = [0.1, 0.2, 0.15, 0.3, 0.25] + [0.29] * 40
        result, snapshots, model = scripted_fit(trace)
        assert result.stopped_early and result.best_epoch == 4
        assert len(result.epochs) == 24 == result.best_epoch + 20
        # best weights are restored
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, snapshots[3][name])


class TestTrainEpoch:
    def test_sampling_epoch_covers_each_user_once(self):
        split = small_split(n_users=40)
        trainer = lite_trainer(small_model(), split, small_config(), validate=False)
        stats = trainer.train_epoch()
        assert stats.examples == 40 and stats.batches == 3 and stats.throughput > 0

    def test_all_strategy_epoch(self):
        split = small_split(n_users=4)
        trainer = lite_trainer(small_model(), split, small_config(strategy="all"), validate=False)
        assert trainer.train_epoch().examples == 4 * 9

    def test_loss_decreases(self):
        _, trainer = train_lite(small_model(), small_split(), small_config(epochs=8, lr=3e-3))
        losses = trainer.result.losses
        assert losses[-1] < losses[0]

    def test_deterministic(self):
        a = train_lite(small_model(), small_split(), small_config())[1].result.losses
        b = train_lite(small_model(), small_split(), small_config())[1].result.losses
        assert a == b

    def test_non_finite_loss_aborts(self):
        model = small_model()
        trainer = Trainer(model, small_config(), lambda r: [Example(0, (1,), 2)],
                          lambda chunk: T.Tensor(np.array(np.nan)))
        with pytest.raises(TrainingError, match="batch 0"):
            trainer.train_epoch()

    def test_empty_data(self):
        trainer = Trainer(small_model(), small_config(), lambda r: [], lambda c: None)
        with pytest.raises(ContractError):
            trainer.train_epoch()


class TestFreeze:
    def run(self, **flags):
        model = small_model()
        before = {g: params_of(model, g) for g in ("item_encoder", "rec_encoder", "head")}
        train_lite(model, small_split(), small_config(epochs=1, **flags))
        after = {g: params_of(model, g) for g in before}
        return {g: any(not np.array_equal(before[g][n], after[g][n]) for n in before[g]) for g in before}

    def test_frozen_head_unchanged(self):
        changed = self.run(freeze_projection_head=True)
        assert not changed["head"] and changed["rec_encoder"] and changed["item_encoder"]

    def test_frozen_rec_encoder_unchanged(self):
        changed = self.run(freeze_rec_encoder=True)
        assert not changed["rec_encoder"] and changed["head"]

    def test_both_frozen_only_item_encoder_moves(self):
        assert self.run(freeze_rec_encoder=True, freeze_projection_head=True) == {
            "item_encoder": True, "rec_encoder": False, "head": False}

    def test_trainable_groups(self):
        names = trainable_parameters(small_model(), small_config(freeze_projection_head=True))
        assert not any(n.startswith("head.") for n in names)

    def test_phase_two_trains_item_table(self):
        model = small_model()
        train_lite(model, small_split(), small_config(epochs=1, fine_tune_cached_embeddings=True, phase2_epochs=1))
        assert model.item_table is not None
        enc_before = params_of(model, "item_encoder")
        table_before = model.item_table.data.copy()
        lite_trainer(model, small_split(), small_config(epochs=1), validate=False).train_epoch()
        assert not np.array_equal(model.item_table.data, table_before)
        assert all(np.array_equal(v, params_of(model, "item_encoder")[n]) for n, v in enc_before.items())


class TestOverfit:
    def test_memorizes_64_sequences(self):
        epoch = overfit_64()
        assert epoch is not None and epoch <= 200


class TestCheckpoint:
    def test_round_trip_bit_equal(self, tmp_path):
        _, trainer = train_lite(small_model(), small_split(), small_config(epochs=1))
        ckpt = trainer_checkpoint(trainer, {"variant": "lite"})
        save_checkpoint(tmp_path / "m.ckpt", ckpt)
        again = load_checkpoint(tmp_path / "m.ckpt")
        assert again.params.keys() == ckpt.params.keys()
        assert all(np.array_equal(again.params[n], ckpt.params[n]) for n in ckpt.params)
        assert all(np.array_equal(again.optimizer.m[n], ckpt.optimizer.m[n]) for n in ckpt.optimizer.m)
        assert again.epoch == 1 and again.meta == {"variant": "lite"}
        assert not (tmp_path / "m.ckpt.incomplete").exists()

    def test_resume_is_bit_identical(self, tmp_path):
        split, cfg = small_split(), small_config(epochs=3)
        straight = lite_trainer(small_model(), split, cfg, validate=False)
        straight.train_epoch()
        save_checkpoint(tmp_path / "m.ckpt", trainer_checkpoint(straight))
        straight.train_epoch()

        fresh = small_model()
        for p in fresh.parameters():
            p.data = p.data + 1.0  # anything the restore must overwrite
        resumed = lite_trainer(fresh, split, cfg, validate=False)
        restore_trainer(resumed, load_checkpoint(tmp_path / "m.ckpt"))
        resumed.train_epoch()
        a, b = straight.model.state_dict(), resumed.model.state_dict()
        assert all(np.array_equal(a[n], b[n]) for n in a)

    @pytest.mark.parametrize("mutate, error", [
        (lambda b: b[:-10], ChecksumError),
        (lambda b: b[:30], ChecksumError),
        (lambda b: b"NOTACKPT" + b[8:], FormatError),
        (lambda b: b[:8] + (7).to_bytes(4, "little") + b[12:], VersionError),
        (lambda b: b[:-1] + bytes([b[-1] ^ 1]), ChecksumError),
    ])
    def test_corrupt(self, tmp_path, mutate, error):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, Checkpoint({"w": np.ones((2, 3), np.float32)}))
        raw = path.read_bytes()
        assert raw[:8] == CKPT_MAGIC
        path.write_bytes(mutate(raw))
        with pytest.raises(error):
            load_checkpoint(path)

    def test_mixed_dtypes(self, tmp_path):
        table = {"f": np.arange(3, dtype=np.float32), "d": np.eye(2), "i": np.arange(4, dtype=np.int64).reshape(2, 2)}
        save_checkpoint(tmp_path / "m.ckpt", Checkpoint(table))
        again = load_checkpoint(tmp_path / "m.ckpt").params
        for name, value in table.items():
            assert again[name].dtype == value.dtype and np.array_equal(again[name], value)

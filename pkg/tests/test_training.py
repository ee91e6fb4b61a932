"""Training loops, self-critical updates, and checkpoint round trips."""

import json

import numpy as np
import pytest

from modcap.config import ModelConfig, TrainConfig
from modcap.corpus import CorpusSpec, FeatureSynthesizer, generate_corpus
from modcap.decoder import BOS_ID, EOS_ID, PAD_ID, CaptionModel
from modcap.errors import DataError, FormatError
from modcap.metrics import IdfTable
from modcap.tensor import Adam, Rng
from modcap.training import (
    TRAIN_STREAM_TAG,
    Batch,
    decode_split,
    evaluate_split,
    load_checkpoint,
    make_batches,
    restore_training,
    run_rl_epoch,
    run_xe_epoch,
    save_checkpoint,
    self_critical_loss,
    teacher_forced,
    teacher_forced_metrics,
    train,
)

SPEC = CorpusSpec(n_scenes=24, seed=5)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SPEC)


@pytest.fixture(scope="module")
def synth():
    return FeatureSynthesizer(SPEC)


def model_cfg(corpus, **over):
    base = dict(vocab_size=len(corpus.vocab), d_r=64, d_v=16, d_c=16, d_a=8,
                heads=4, m_units=2, strategy="soft")
    base.update(over)
    return ModelConfig(**base)


def fresh_model(corpus, seed=3, **over):
    return CaptionModel(model_cfg(corpus, **over), Rng(seed).derive(1))


class TestBatching:
    def test_uniform_region_count_per_batch(self, corpus, synth):
        scenes = {s.scene_id: s for s in corpus.scenes}
        batches = make_batches(corpus.examples, scenes, synth, 8, Rng(0))
        for b in batches:
            counts = {len(scenes[sid].regions) for sid in b.scene_ids}
            assert len(counts) == 1
            assert b.r_obj.shape == (b.size, counts.pop(), SPEC.d_r)

    def test_covers_every_example_once(self, corpus, synth):
        scenes = {s.scene_id: s for s in corpus.scenes}
        batches = make_batches(corpus.examples, scenes, synth, 8, Rng(0))
        seen = [(sid, tuple(b.targets[i][b.mask[i] > 0]))
                for b in batches for i, sid in enumerate(b.scene_ids)]
        assert len(seen) == len(corpus.examples)

    def test_alignment(self, corpus, synth):
        scenes = {s.scene_id: s for s in corpus.scenes}
        (batch,) = make_batches(corpus.examples[:1], scenes, synth, 1)
        e = corpus.examples[0]
        n = len(e.token_ids) - 1
        assert batch.inputs[0, 0] == BOS_ID
        assert list(batch.targets[0, :n]) == e.token_ids[1:]
        assert batch.targets[0, n - 1] == EOS_ID
        assert list(batch.labels[0, :n]) == e.labels
        assert batch.mask[0].sum() == n

    def test_shuffle_is_seeded(self, corpus, synth):
        scenes = {s.scene_id: s for s in corpus.scenes}
        ids = lambda bs: [b.scene_ids for b in bs]
        a = make_batches(corpus.examples, scenes, synth, 8, Rng(4))
        b = make_batches(corpus.examples, scenes, synth, 8, Rng(4))
        c = make_batches(corpus.examples, scenes, synth, 8, Rng(5))
        assert ids(a) == ids(b)
        assert ids(a) != ids(c)

    def test_no_rng_is_stable(self, corpus, synth):
        scenes = {s.scene_id: s for s in corpus.scenes}
        a = make_batches(corpus.examples, scenes, synth, 8)
        b = make_batches(corpus.examples, scenes, synth, 8)
        assert [x.scene_ids for x in a] == [x.scene_ids for x in b]


class TestTeacherForced:
    def batch_of(self, corpus, synth, examples):
        scenes = {s.scene_id: s for s in corpus.scenes}
        return make_batches(examples, scenes, synth, len(examples))

    def test_loss_and_counts(self, corpus, synth):
        model = fresh_model(corpus)
        (batch,) = self.batch_of(corpus, synth, corpus.examples[:4])
        stats = teacher_forced(model, batch, lam_ling=1.0)
        assert np.isfinite(stats.loss.item()) and stats.loss.item() > 0
        assert stats.n_tokens == batch.mask.sum()
        assert 0 <= stats.n_correct <= stats.n_tokens
        assert 0 <= stats.n_agree <= stats.n_tokens
        assert stats.ling_mean is not None

    def test_objective_composition(self, corpus, synth):
        model = fresh_model(corpus)
        (batch,) = self.batch_of(corpus, synth, corpus.examples[:4])
        lam = 0.7
        stats = teacher_forced(model, batch, lam_ling=lam)
        want = stats.xe_sum.item() / stats.n_tokens + lam * stats.ling_mean.item()
        assert stats.loss.item() == pytest.approx(want, rel=1e-6)

    def test_gradients_reach_everything(self, corpus, synth):
        model = fresh_model(corpus)
        (batch,) = self.batch_of(corpus, synth, corpus.examples[:4])
        stats = teacher_forced(model, batch, lam_ling=1.0)
        stats.loss.backward()
        for name, p in model.named_parameters().items():
            assert p.grad is not None, name

    def test_single_module_has_no_agreement(self, corpus, synth):
        model = fresh_model(corpus, modules=("object",), m_units=1)
        (batch,) = self.batch_of(corpus, synth, corpus.examples[:4])
        stats = teacher_forced(model, batch, lam_ling=1.0)
        assert stats.n_agree is None
        assert stats.ling_mean is None

    def test_batch_additivity(self, corpus, synth):
        # two captions of the same scene: batched loss equals the sum of
        # the individual ones
        model = fresh_model(corpus)
        pair = corpus.examples[0:2]
        (batch,) = self.batch_of(corpus, synth, pair)
        both = teacher_forced(model, batch)
        singles = [teacher_forced(model, b)
                   for b in self.batch_of(corpus, synth, [pair[0]])
                   + self.batch_of(corpus, synth, [pair[1]])]
        want = singles[0].xe_sum.item() + singles[1].xe_sum.item()
        assert both.xe_sum.item() == pytest.approx(want, rel=1e-5)

    def test_metrics_shape(self, corpus, synth):
        model = fresh_model(corpus)
        got = teacher_forced_metrics(model, corpus, synth, "val")
        assert set(got) == {"xe_per_token", "token_acc", "ctrl_agree", "n_tokens"}
        assert 0.0 <= got["token_acc"] <= 1.0
        assert 0.0 <= got["ctrl_agree"] <= 1.0
        again = teacher_forced_metrics(model, corpus, synth, "val")
        assert got == again


class TestXeEpoch:
    def test_loss_decreases(self, corpus, synth):
        model = fresh_model(corpus, m_units=1)
        cfg = TrainConfig(xe_epochs=3, rl_epochs=0, batch_size=8, lr=3e-3, seed=5)
        opt = Adam()
        rng = Rng(cfg.seed).derive(TRAIN_STREAM_TAG)
        first = run_xe_epoch(model, corpus, synth, cfg, opt, rng, 0)
        last = None
        for epoch in (1, 2):
            last = run_xe_epoch(model, corpus, synth, cfg, opt, rng, epoch)
        assert last["loss"] < first["loss"]
        assert last["token_acc"] > first["token_acc"]
        assert first["lr"] == cfg.lr

    def test_decay_schedule_applies(self, corpus, synth):
        model = fresh_model(corpus, m_units=1)
        cfg = TrainConfig(xe_epochs=8, rl_epochs=0, batch_size=16,
                          lr=1e-3, lr_decay=0.5, decay_every=2, seed=5)
        opt = Adam()
        rng = Rng(0)
        stats = run_xe_epoch(model, corpus, synth, cfg, opt, rng, 5)
        assert stats["lr"] == pytest.approx(1e-3 * 0.5 ** 2)


class TestSelfCritical:
    def test_zero_advantage_means_zero_gradient(self, corpus, synth):
        model = fresh_model(corpus)
        scene = corpus.scenes_in("train")[0]
        enc = model.encode(*synth.features(scene))
        # references that share no word with the vocabulary: both the
        # sampled and the greedy caption score zero, advantage is exactly 0
        refs = [["qq", "ww", "ee", "rr"]]
        idf = IdfTable({0: refs, 1: [["zz", "xx", "cc", "vv"]]})
        loss, info = self_critical_loss(model, enc, refs, idf,
                                        corpus.vocab.tokens, Rng(9), max_len=8)
        assert info["advantage"] == 0.0
        assert loss.item() == 0.0
        loss.backward()
        for name, p in model.named_parameters().items():
            assert p.grad is None or not np.any(p.grad), name

    def test_nonzero_advantage_updates(self, corpus, synth):
        model = fresh_model(corpus)
        scene = corpus.scenes_in("train")[0]
        refs = corpus.references("train")[scene.scene_id]
        idf = IdfTable(corpus.references("train"))
        enc = model.encode(*synth.features(scene))
        found = False
        rng = Rng(3)
        for _ in range(10):
            loss, info = self_critical_loss(model, enc, refs, idf,
                                            corpus.vocab.tokens, rng, max_len=8)
            if info["advantage"] != 0.0:
                loss.backward()
                grads = [p.grad for p in model.named_parameters().values()
                         if p.grad is not None and np.any(p.grad)]
                assert grads
                found = True
                break
        assert found, "sampling never diverged from greedy"

    def test_rl_epoch_runs_and_updates(self, corpus, synth):
        model = fresh_model(corpus)
        cfg = TrainConfig(xe_epochs=0, rl_epochs=1, batch_size=4, lr=1e-3,
                          seed=5, max_len=10)
        before = {k: v.data.copy() for k, v in model.named_parameters().items()}
        idf = IdfTable(corpus.references("train"))
        stats = run_rl_epoch(model, corpus, synth, cfg, Adam(),
                             Rng(5).derive(TRAIN_STREAM_TAG), 0, idf, max_steps=8)
        assert stats["steps"] == 8
        assert stats["phase"] == "rl"
        after = model.named_parameters()
        changed = any(not np.array_equal(before[k], after[k].data) for k in before)
        assert changed

    def test_rl_epoch_without_supervision(self, corpus, synth):
        model = fresh_model(corpus)
        cfg = TrainConfig(xe_epochs=0, rl_epochs=1, batch_size=4, lr=1e-3,
                          seed=5, linguistic=False, max_len=10)
        idf = IdfTable(corpus.references("train"))
        stats = run_rl_epoch(model, corpus, synth, cfg, Adam(),
                             Rng(5).derive(TRAIN_STREAM_TAG), 0, idf, max_steps=4)
        assert stats["steps"] == 4


class TestDecodeSplit:
    def test_greedy_and_beam(self, corpus, synth):
        model = fresh_model(corpus)
        for mode in ("greedy", "beam"):
            preds = decode_split(model, corpus, synth, "val", mode=mode,
                                 beam_width=2, max_len=8)
            assert set(preds) == {s.scene_id for s in corpus.scenes_in("val")}
            for words in preds.values():
                assert all(w in corpus.vocab.index for w in words)

    def test_bad_mode(self, corpus, synth):
        model = fresh_model(corpus)
        with pytest.raises(ValueError):
            decode_split(model, corpus, synth, "val", mode="viterbi")

    def test_evaluate_split_report(self, corpus, synth):
        model = fresh_model(corpus)
        report = evaluate_split(model, corpus, synth, "val", mode="greedy",
                                max_len=8)
        for key in ("bleu1", "bleu2", "bleu3", "bleu4", "cider_d",
                    "pos_recall", "idf_checksum", "split"):
            assert key in report
        assert report["split"] == "val"
        assert 0.0 <= report["cider_d"] <= 10.0


class TestTrainSchedule:
    def test_history_covers_both_phases(self, corpus, synth):
        model = fresh_model(corpus, m_units=1)
        cfg = TrainConfig(xe_epochs=1, rl_epochs=1, batch_size=8, lr=1e-3,
                          seed=5, max_len=10)
        state = train(model, corpus, synth, cfg, log_fn=lambda *_: None)
        assert [h["phase"] for h in state.history] == ["xe", "rl"]
        assert state.epoch == 2
        assert all("val_token_acc" in h for h in state.history)

    def test_same_seed_same_weights(self, corpus, synth):
        cfg = TrainConfig(xe_epochs=1, rl_epochs=0, batch_size=8, lr=1e-3, seed=5)
        runs = []
        for _ in range(2):
            model = fresh_model(corpus, m_units=1)
            state = train(model, corpus, synth, cfg, log_fn=lambda *_: None)
            runs.append({k: v.data.copy()
                         for k, v in model.named_parameters().items()})
        for k in runs[0]:
            np.testing.assert_array_equal(runs[0][k], runs[1][k])


class TestCheckpoints:
    def small_cfg(self):
        return TrainConfig(xe_epochs=1, rl_epochs=1, batch_size=8, lr=1e-3,
                           seed=5, max_len=10)

    def test_round_trip_tensors(self, corpus, synth, tmp_path):
        model = fresh_model(corpus)
        cfg = self.small_cfg()
        opt = Adam()
        rng = Rng(cfg.seed).derive(TRAIN_STREAM_TAG)
        run_xe_epoch(model, corpus, synth, cfg, opt, rng, 0)
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, model=model, train_cfg=cfg, vocab=corpus.vocab,
                        opt=opt, rng=rng, epoch=1, history=[{"epoch": 0}])
        tensors, meta = load_checkpoint(path)
        params = model.named_parameters()
        for name, p in params.items():
            np.testing.assert_array_equal(tensors[name], p.data)
            np.testing.assert_array_equal(tensors[f"adam.m.{name}"],
                                          opt.state[name].m)
        assert meta["epoch"] == 1
        assert meta["rng"] == rng.get_state()
        assert meta["vocab"]["tokens"] == corpus.vocab.tokens

    def test_save_load_save_is_byte_identical(self, corpus, synth, tmp_path):
        model = fresh_model(corpus)
        cfg = self.small_cfg()
        opt = Adam()
        rng = Rng(cfg.seed).derive(TRAIN_STREAM_TAG)
        run_xe_epoch(model, corpus, synth, cfg, opt, rng, 0)
        first = str(tmp_path / "a.bin")
        save_checkpoint(first, model=model, train_cfg=cfg, vocab=corpus.vocab,
                        opt=opt, rng=rng, epoch=1, history=[])
        restored = restore_training(first)
        second = str(tmp_path / "b.bin")
        save_checkpoint(second, model=restored.model, train_cfg=restored.train_cfg,
                        vocab=restored.vocab, opt=restored.opt, rng=restored.rng,
                        epoch=restored.epoch, history=restored.history)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert ((tmp_path / "a.bin.meta.json").read_bytes()
                == (tmp_path / "b.bin.meta.json").read_bytes())

    def test_restored_model_behaves_identically(self, corpus, synth, tmp_path):
        model = fresh_model(corpus)
        cfg = self.small_cfg()
        opt = Adam()
        rng = Rng(cfg.seed).derive(TRAIN_STREAM_TAG)
        run_xe_epoch(model, corpus, synth, cfg, opt, rng, 0)
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, model=model, train_cfg=cfg, vocab=corpus.vocab,
                        opt=opt, rng=rng, epoch=1, history=[])
        restored = restore_training(path)
        want = teacher_forced_metrics(model, corpus, synth, "val")
        got = teacher_forced_metrics(restored.model, corpus, synth, "val")
        assert want == got

    def test_resume_equals_uninterrupted(self, corpus, synth, tmp_path):
        cfg = self.small_cfg()

        straight = fresh_model(corpus, seed=3)
        state_a = train(straight, corpus, synth, cfg, log_fn=lambda *_: None)

        broken = fresh_model(corpus, seed=3)
        path = str(tmp_path / "resume.bin")
        train(broken, corpus, synth, cfg, checkpoint_path=path, max_epochs=1,
              log_fn=lambda *_: None)
        restored = restore_training(path)
        assert restored.epoch == 1
        state_b = train(restored.model, corpus, synth, restored.train_cfg,
                        opt=restored.opt, rng=restored.rng,
                        start_epoch=restored.epoch, history=restored.history,
                        log_fn=lambda *_: None)

        a_params = state_a.model.named_parameters()
        b_params = state_b.model.named_parameters()
        for name in a_params:
            np.testing.assert_array_equal(a_params[name].data,
                                          b_params[name].data, err_msg=name)
        assert state_a.history == state_b.history
        assert state_a.rng.get_state() == state_b.rng.get_state()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(str(path))

    def test_truncated_file(self, corpus, synth, tmp_path):
        model = fresh_model(corpus)
        cfg = self.small_cfg()
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, model=model, train_cfg=cfg, vocab=corpus.vocab,
                        opt=Adam(), rng=Rng(0), epoch=0, history=[])
        blob = (tmp_path / "model.bin").read_bytes()
        (tmp_path / "model.bin").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_missing_metadata(self, corpus, synth, tmp_path):
        model = fresh_model(corpus)
        cfg = self.small_cfg()
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, model=model, train_cfg=cfg, vocab=corpus.vocab,
                        opt=Adam(), rng=Rng(0), epoch=0, history=[])
        (tmp_path / "model.bin.meta.json").unlink()
        with pytest.raises(DataError, match="metadata"):
            load_checkpoint(path)

    def test_config_mismatch_rejected(self, corpus, synth, tmp_path):
        model = fresh_model(corpus)
        cfg = self.small_cfg()
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, model=model, train_cfg=cfg, vocab=corpus.vocab,
                        opt=Adam(), rng=Rng(0), epoch=0, history=[])
        meta_file = tmp_path / "model.bin.meta.json"
        meta = json.loads(meta_file.read_text())
        meta["model"]["d_v"] = 24
        meta["model"]["d_c"] = 24
        meta_file.write_text(json.dumps(meta))
        with pytest.raises(DataError):
            restore_training(path)

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(str(tmp_path / "absent.bin"))

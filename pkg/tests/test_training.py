import csv

import numpy as np
import pytest

from urewrite import numerics as nx
from urewrite.checkpoint import read_checkpoint
from urewrite.corpus import build_vocab
from urewrite.decoding import greedy_decode, ids_to_tokens
from urewrite.errors import DataError, NumericError
from urewrite.model import RewriterModel, encode_batch
from urewrite.numerics import Tensor
from urewrite.training import Adam, TrainConfig, adam_step, clip_grad_norm, evaluate_loss, train

from conftest import tiny_config


def _param(v):
    return {"x": Tensor(np.array(v, dtype=float), requires_grad=True, name="x")}


def test_adam_zero_gradient_leaves_params():
    p = _param([1.0, -2.0])
    opt = Adam(p, lr=0.1)
    adam_step(p, {"x": np.zeros(2)}, opt, 0.1)
    np.testing.assert_array_equal(p["x"].data, [1.0, -2.0])
    assert opt.step_count == 1


def test_adam_first_step_is_lr():
    p = _param([0.0])
    opt = Adam(p)
    adam_step(p, {"x": np.ones(1)}, opt, 0.1)
    assert p["x"].data[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_minimizes_square():
    p = _param([1.0])
    opt = Adam(p)
    for _ in range(100):
        adam_step(p, {"x": 2 * p["x"].data}, opt, 0.1)
    assert abs(p["x"].data[0]) < 0.1


def test_adam_nan_names_parameter():
    p = _param([1.0])
    with pytest.raises(NumericError, match="x"):
        adam_step(p, {"x": np.array([np.nan])}, Adam(p), 0.1)


def test_clip_grad_norm():
    ps = [Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)]
    ps[0].grad[:] = [3.0, 0.0]
    ps[1].grad[:] = [4.0]
    assert clip_grad_norm(ps, 1.0) == pytest.approx(5.0)
    assert np.sqrt(sum((p.grad ** 2).sum() for p in ps)) == pytest.approx(1.0)


def test_padding_invariance_of_loss_and_gradients(small_corpus, small_vocab):
    cfg = tiny_config(small_vocab)
    m = RewriterModel(cfg, seed=1)
    samples = small_corpus[:5]

    def loss_and_grads(batch):
        m.zero_grad()
        with nx.Tape() as tape:
            loss = m.nll_loss(batch)
        nx.backward(loss, tape)
        return loss.item(), {k: p.grad.copy() for k, p in m.params.items()}

    b = encode_batch(samples, small_vocab, cfg)
    full, g_full = loss_and_grads(b)
    total, n_tok = 0.0, 0
    g_sum = {k: 0.0 for k in m.params}
    for s in samples:
        bi = encode_batch([s], small_vocab, cfg)
        li, gi = loss_and_grads(bi)
        ni = int(bi.tgt_mask.sum())
        total += li * ni
        n_tok += ni
        for k in g_sum:
            g_sum[k] = g_sum[k] + gi[k] * ni
    assert full == pytest.approx(total / n_tok, abs=1e-9)
    for k in g_sum:
        np.testing.assert_allclose(g_full[k], g_sum[k] / n_tok, atol=1e-9)


def test_overfit_single_positive_sample(small_corpus):
    s = next(x for x in small_corpus if x.is_positive)
    vocab = build_vocab([s])
    cfg = tiny_config(vocab, d_model=16, n_heads=2, d_ff=32)
    m = RewriterModel(cfg, seed=0)
    res = train(m, vocab, [s] * 1, [s], TrainConfig(learning_rate=1e-2, batch_size=1, max_epochs=50,
                                                    early_stop_patience=50))
    assert res.steps == 50
    assert evaluate_loss(m, vocab, [s]) < 0.05
    h = greedy_decode(m, vocab, s)
    assert ids_to_tokens(h.tokens[:-1], vocab, []) == s.reference


def test_zero_lr_epoch_loss_equals_untrained(small_corpus, small_vocab):
    cfg = tiny_config(small_vocab)
    m = RewriterModel(cfg, seed=2)
    before = evaluate_loss(m, small_vocab, small_corpus[:40])
    res = train(m, small_vocab, small_corpus[:40], small_corpus[40:50],
                TrainConfig(learning_rate=0.0, batch_size=8, max_epochs=1))
    assert res.rows[0][1] == pytest.approx(before, abs=1e-12)


def _run(tmp_path, name, corpus, vocab, epochs=3, resume=False):
    cfg = tiny_config(vocab, dropout_rate=0.1)
    m = RewriterModel(cfg, seed=0)
    out = tmp_path / name
    res = train(m, vocab, corpus[:60], corpus[60:80],
                TrainConfig(learning_rate=3e-3, batch_size=16, max_epochs=epochs, seed=5),
                out_dir=str(out), resume=resume)
    return m, res, out


def _log_without_seconds(path):
    with open(path) as fh:
        return [row[:3] for row in csv.reader(fh)]


def test_training_log_reproducible(tmp_path, small_corpus, small_vocab):
    _, _, a = _run(tmp_path, "a", small_corpus, small_vocab)
    _, _, b = _run(tmp_path, "b", small_corpus, small_vocab)
    assert _log_without_seconds(a / "train_log.csv") == _log_without_seconds(b / "train_log.csv")
    assert _log_without_seconds(a / "train_log.csv")[0] == ["epoch", "train_loss", "valid_loss"]
    assert (a / "best.npz").read_bytes() == (b / "best.npz").read_bytes()


def test_best_checkpoint_has_lowest_valid_loss(tmp_path, small_corpus, small_vocab):
    m, res, out = _run(tmp_path, "r", small_corpus, small_vocab, epochs=4)
    valid = [r[2] for r in res.rows]
    meta, _ = read_checkpoint(out / "best.npz")
    assert meta["valid_loss"] == min(valid)
    assert (out / "best").read_text().startswith("best.npz")
    assert evaluate_loss(m, small_vocab, small_corpus[60:80], 16) == pytest.approx(min(valid), abs=1e-9)


def test_resume_continues(tmp_path, small_corpus, small_vocab):
    _, r1, out = _run(tmp_path, "r", small_corpus, small_vocab, epochs=2)
    step1 = read_checkpoint(out / "last.npz")[0]["adam_step"]
    _, r2, _ = _run(tmp_path, "r", small_corpus, small_vocab, epochs=4, resume=True)
    meta = read_checkpoint(out / "last.npz")[0]
    assert [r[0] for r in r2.rows] == [3, 4]
    assert meta["adam_step"] > step1 and meta["epoch"] == 4
    # an uninterrupted run gives the same losses
    _, full, _ = _run(tmp_path, "full", small_corpus, small_vocab, epochs=4)
    np.testing.assert_allclose([r[1:3] for r in full.rows[2:]], [r[1:3] for r in r2.rows], atol=1e-12)
    assert len(_log_without_seconds(out / "train_log.csv")) == 5


def test_empty_split_is_error(small_corpus, small_vocab):
    m = RewriterModel(tiny_config(small_vocab))
    with pytest.raises(DataError):
        train(m, small_vocab, [], small_corpus[:2], TrainConfig())
    with pytest.raises(DataError):
        train(m, small_vocab, small_corpus[:2], [], TrainConfig())


def test_non_finite_loss_aborts_with_batch(small_corpus, small_vocab):
    m = RewriterModel(tiny_config(small_vocab, head="gen"))
    m.params["out.b"].data[0] = np.nan
    with pytest.raises(NumericError, match="batch 0"):
        train(m, small_vocab, small_corpus[:4], small_corpus[4:6], TrainConfig(batch_size=2))


def test_early_stopping_patience(small_corpus, small_vocab):
    m = RewriterModel(tiny_config(small_vocab), seed=0)
    res = train(m, small_vocab, small_corpus[:20], small_corpus[20:30],
                TrainConfig(learning_rate=0.0, batch_size=10, max_epochs=20, early_stop_patience=2))
    # lr=0: epoch 1 is best, two flat epochs exhaust the patience
    assert [r[0] for r in res.rows] == [1, 2, 3]

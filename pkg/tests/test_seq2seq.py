import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from actseq import numerics as nx
from actseq import seq2seq as s2s
from actseq.core import collapse
from actseq.errors import ConfigError, ShapeError
from actseq.seq2seq import (EpsilonSchedule, Seq2Seq, Seq2SeqConfig, WindowSpec, cut_window,
                            decode_step, encode, ensemble_decode, greedy_decode, infer_sequences,
                            initial_state, load_seq2seq, make_windows, save_seq2seq, seq2seq_loss,
                            stitch, target_tokens, train_seq2seq, windowed_infer)
from actseq.training import TrainConfig


def tiny(encoder="conv", **kw):
    base = dict(input_dim=2, num_classes=3, encoder=encoder, encoder_hidden=4, encoder_layers=2,
                decoder_hidden=8, heads=2, max_decode_len=6, dropout=0.0,
                window=WindowSpec(12, 4, 2))
    base.update(kw)
    return Seq2SeqConfig(**base)


def val(t):
    return t.detach().item()


def zero_params(model):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


def set_head(model, logits):
    """Make every step output ``softmax(logits)`` regardless of input."""
    with torch.no_grad():
        model.w_out.zero_()
        model.b_out.copy_(torch.as_tensor(logits, dtype=nx.DTYPE))


@pytest.fixture
def window():
    return np.random.default_rng(0).normal(size=(12, 2))


# --------------------------------------------------------------- config

def test_config_defaults_and_validation():
    raw = Seq2SeqConfig(16, 5)
    assert raw.aux_weight == 1.0 and raw.embed_dim == 32
    assert (raw.window.length, raw.window.stride, raw.window.margin) == (60, 20, 10)
    assert Seq2SeqConfig(5, 5, input_kind="probs").aux_weight == 0.0
    with pytest.raises(ConfigError):
        Seq2SeqConfig(2, 3, max_decode_len=0)
    with pytest.raises(ConfigError):
        Seq2SeqConfig(2, 3, encoder_hidden=5, heads=2)
    with pytest.raises(ConfigError):
        WindowSpec(10, 4, 5)
    with pytest.raises(ConfigError):
        WindowSpec(10, 11, 0)
    cfg = tiny()
    assert Seq2SeqConfig.from_dict(cfg.to_dict()) == cfg


def test_epsilon_schedule_linear_non_decreasing():
    sch = EpsilonSchedule(0.0, 0.5, 11)
    vals = [sch.value(e) for e in range(11)]
    assert vals[0] == 0.0 and vals[-1] == 0.5 and vals[5] == pytest.approx(0.25)
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ConfigError):
        EpsilonSchedule(0.6, 0.5)


def test_token_mapping():
    assert target_tokens([2, 0], 3) == [2, 0, 4]
    assert s2s.token_to_output(4, 3) == 3 and s2s.output_to_token(3, 3) == 4
    with pytest.raises(ShapeError):
        s2s.token_to_output(3, 3)  # start-of-sequence is never a target
    with pytest.raises(ShapeError):
        target_tokens([3], 3)


# --------------------------------------------------------------- encoder

@pytest.mark.parametrize("encoder", ["conv", "recurrent"])
def test_encode_fixed_size_and_deterministic(encoder):
    model = Seq2Seq(tiny(encoder), seed=1)
    rng = np.random.default_rng(1)
    h1, st1, _ = encode(rng.normal(size=(12, 2)), model)
    h2, st2, _ = encode(rng.normal(size=(30, 2)), model)
    assert h1.shape == h2.shape == (1, model.config.encoder_dim)
    assert st1.shape[1] == 12 and st2.shape[1] == 30
    x = rng.normal(size=(12, 2))
    assert torch.equal(encode(x, model)[0], encode(x, model)[0])
    with pytest.raises(ShapeError):
        encode(np.zeros((12, 3)), model)


@pytest.mark.parametrize("encoder", ["conv", "recurrent"])
def test_zero_parameter_encoder_gives_zero_h(encoder, window):
    model = Seq2Seq(tiny(encoder), seed=0)
    zero_params(model)
    h, _, _ = encode(window, model)
    assert torch.equal(h, torch.zeros_like(h))


# --------------------------------------------------------------- decoder

def test_decode_step_on_simplex(window):
    model = Seq2Seq(tiny(), seed=2)
    h, states, mask = encode(window, model)
    s = initial_state(model, h)
    for tok in (3, 0, 4):
        s, p, w = decode_step(s, h, [tok], states, model, mask)
        p, w = p.detach(), w.detach()
        assert p.shape == (1, 4)
        assert abs(float(p.sum()) - 1.0) < 1e-9 and torch.all(p >= 0)
        assert abs(float(w.sum()) - 1.0) < 1e-9
    with pytest.raises(ShapeError):
        decode_step(s, h, [5], states, model, mask)


def test_first_step_reads_start_token(window):
    model = Seq2Seq(tiny(), seed=4)
    trace = greedy_decode(window, model)
    h, states, mask = encode(window, model)
    _, p, _ = decode_step(initial_state(model, h), h, [model.config.start_token], states, model, mask)
    np.testing.assert_array_equal(trace.probs[0], p[0].detach().numpy())


def test_always_end_head_gives_empty_sequence(window):
    model = Seq2Seq(tiny(), seed=0)
    set_head(model, [0, 0, 0, 50.0])
    trace = greedy_decode(window, model)
    assert trace.tokens == [4] and list(trace.sequence) == [] and not trace.truncated


def test_never_ending_head_truncates(window):
    model = Seq2Seq(tiny(), seed=0)
    set_head(model, [0, 50.0, 0, 0])
    trace = greedy_decode(window, model, max_len=3)
    assert trace.tokens == [1, 1, 1] and trace.truncated and len(trace.probs) == 3


def test_argmax_ties_go_to_lowest_index(window):
    model = Seq2Seq(tiny(), seed=0)
    set_head(model, [1.0, 1.0, 1.0, 1.0])
    assert greedy_decode(window, model, max_len=2).tokens == [0, 0]


# ------------------------------------------------------------------ loss

def manual_teacher_forced_nll(model, x, target):
    h, states, mask = encode(x, model)
    s = initial_state(model, h)
    prev, total = model.config.start_token, 0.0
    for y in target:
        s, p, _ = decode_step(s, h, [prev], states, model, mask)
        total -= float(torch.log(p.detach()[0, s2s.token_to_output(y, model.config.num_classes)]))
        prev = y
    return total


def test_teacher_forced_loss_matches_manual_sum(window):
    model = Seq2Seq(tiny(aux_weight=0.0), seed=5)
    target = [2, 0, 1, 4]
    loss = seq2seq_loss(window, target, model, epsilon=0.0)
    assert val(loss) == pytest.approx(manual_teacher_forced_nll(model, window, target), abs=1e-10)


def test_aux_loss_adds_weighted_frame_ce(window):
    model = Seq2Seq(tiny(aux_weight=0.5), seed=5)
    fl = np.array([0] * 6 + [1] * 4 + [-100] * 2)
    base = val(seq2seq_loss(window, [0, 1, 4], model))
    with_aux = val(seq2seq_loss(window, [0, 1, 4], model, frame_labels=fl[None]))
    _, states, _ = encode(window, model)
    ce = nx.cross_entropy(s2s.aux_logits(model, states)[0], torch.as_tensor(fl))
    assert with_aux == pytest.approx(base + 0.5 * val(ce), abs=1e-10)


def test_perfect_model_has_zero_loss(window):
    model = Seq2Seq(tiny(aux_weight=0.0), seed=0)
    set_head(model, [0, 0, 0, 1000.0])
    assert val(seq2seq_loss(window, [4], model)) == 0.0


def test_loss_errors(window):
    model = Seq2Seq(tiny(), seed=0)
    with pytest.raises(ShapeError):
        seq2seq_loss(window, [], model)
    with pytest.raises(ShapeError):
        seq2seq_loss(window, [0, 1], model)  # no end token
    with pytest.raises(ConfigError):
        seq2seq_loss(window, [0, 4], model, epsilon=0.5)


def test_scheduled_sampling_is_seeded(window):
    model = Seq2Seq(tiny(aux_weight=0.0), seed=6)
    target = [0, 1, 2, 0, 1, 4]
    a = seq2seq_loss(window, target, model, 0.7, nx.Rng(3))
    b = seq2seq_loss(window, target, model, 0.7, nx.Rng(3))
    assert val(a) == val(b)
    tf = seq2seq_loss(window, target, model, 0.0)
    assert val(tf) == val(seq2seq_loss(window, target, model, 0.0))


@pytest.mark.parametrize("encoder,attention", [("conv", True), ("recurrent", True),
                                               ("conv", False)])
def test_seq2seq_loss_gradient_check(encoder, attention):
    cfg = Seq2SeqConfig(input_dim=2, num_classes=3, encoder=encoder, encoder_hidden=4,
                        encoder_layers=2, decoder_hidden=8, attention=attention, heads=2,
                        dropout=0.0, aux_weight=0.3, window=WindowSpec(12, 4, 2))
    model = Seq2Seq(cfg, seed=8)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 12, 2))
    mask = torch.ones(2, 12, dtype=torch.bool)
    mask[1, 9:] = False
    targets = [[0, 2, 1, 4], [1, 4]]
    fl = np.array([[0] * 4 + [2] * 4 + [1] * 4, [1] * 9 + [-100] * 3])
    err = nx.gradient_check(lambda: seq2seq_loss(x, targets, model, 0.0, frame_labels=fl,
                                                 mask=mask), list(model.parameters()))
    assert err < 1e-4


# -------------------------------------------------------------- stitching

def test_stitch_examples():
    assert list(stitch([[0, 1], [1, 2]])) == [0, 1, 2]
    assert list(stitch([[0, 1], [2]])) == [0, 1, 2]
    assert list(stitch([[0, 1], [], [1, 2]])) == [0, 1, 2]
    assert list(stitch([[], []])) == []
    assert list(stitch([[0, 0, 1]])) == [0, 1]


@given(st.lists(st.integers(0, 3), min_size=1, max_size=60), st.data())
def test_stitching_window_collapses_equals_whole_collapse(labels, data):
    cuts = sorted(set(data.draw(st.lists(st.integers(1, max(len(labels) - 1, 1)), max_size=8))))
    edges = [0] + [c for c in cuts if c < len(labels)] + [len(labels)]
    pieces = [collapse(labels[a:b]) for a, b in zip(edges, edges[1:])]
    assert stitch(pieces) == collapse(labels)


def test_cut_window_zero_pads():
    frames = np.arange(10, dtype=float).reshape(5, 2)
    spec = WindowSpec(5, 1, 1)
    w, m = cut_window(frames, 0, spec)
    assert m.tolist() == [False, True, True, True, True]
    assert w[0].tolist() == [0, 0] and w[1].tolist() == [0, 1]
    w, m = cut_window(frames, 3, spec)
    assert m.tolist() == [True, True, True, False, False]
    assert w[:3, 0].tolist() == [4, 6, 8] and w[3:].sum() == 0


def test_make_windows_targets():
    labels = np.array([0] * 5 + [1] * 5 + [2] * 5)
    wins = make_windows(np.zeros((15, 2)), labels, WindowSpec(7, 3, 1))
    # label spans of 5 frames start every 3 frames
    assert [w[2] for w in wins] == [[0], [0, 1], [1, 2], [1, 2], [2]]
    assert wins[0][3].tolist() == [-100, 0, 0, 0, 0, 0, 1]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 80), st.integers(0, 2**16))
def test_windowed_infer_is_canonical(T, seed):
    model = Seq2Seq(tiny(), seed=seed)
    x = np.random.default_rng(seed).normal(size=(T, 2))
    seq = windowed_infer(x, model)
    assert all(a != b for a, b in zip(seq, seq[1:]))


def test_batched_inference_matches_per_sequence():
    model = Seq2Seq(tiny(), seed=9)
    rng = np.random.default_rng(9)
    xs = [rng.normal(size=(n, 2)) for n in (5, 23, 40)]
    together = infer_sequences(xs, model, batch_size=4)
    assert together == [windowed_infer(x, model) for x in xs]


# --------------------------------------------------------------- ensembles

def test_ensemble_of_one_and_identical_models(window):
    model = Seq2Seq(tiny(), seed=10)
    g = greedy_decode(window, model)
    e1 = ensemble_decode(window, [model])
    assert e1.tokens == g.tokens
    for a, b in zip(e1.probs, g.probs):
        np.testing.assert_array_equal(a, b)
    twin = Seq2Seq(tiny(), seed=10)
    ek = ensemble_decode(window, [model, twin, model])
    assert ek.tokens == g.tokens
    for a, b in zip(ek.probs, g.probs):
        np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ConfigError):
        ensemble_decode(window, [])


def test_ensemble_averages_fixed_tables(window, monkeypatch):
    # c = 2; output entries are (a, b, end); start token 2, end token 3
    cfg = tiny(num_classes=2)
    A, B = Seq2Seq(cfg, seed=0), Seq2Seq(cfg, seed=1)
    tables = {
        id(A): {2: [0.9, 0.05, 0.05], 0: [0.1, 0.2, 0.7], 1: [0.0, 0.0, 1.0]},
        id(B): {2: [0.0, 0.6, 0.4], 0: [0.1, 0.8, 0.1], 1: [0.0, 0.0, 1.0]},
    }
    fed = {id(A): [], id(B): []}

    def fake_step(model, s_prev, h, prev_token, states, mask):
        prev = int(torch.as_tensor(prev_token).reshape(-1)[0])
        fed[id(model)].append(prev)
        p = torch.tensor([tables[id(model)][prev]], dtype=nx.DTYPE)
        return s_prev, torch.log(p.clamp_min(1e-300)), None

    monkeypatch.setattr(s2s, "_step", fake_step)
    trace = ensemble_decode(window, [A, B])
    # step 1 mean (0.45, 0.325, 0.225) -> a; step 2 mean (0.1, 0.5, 0.4) -> b; step 3 -> end
    assert trace.tokens == [0, 1, 3]
    np.testing.assert_allclose(trace.probs[0], [0.45, 0.325, 0.225], atol=1e-12)
    np.testing.assert_allclose(trace.probs[1], [0.1, 0.5, 0.4], atol=1e-12)
    assert fed[id(A)] == fed[id(B)] == [2, 0, 1]
    # B alone would have started with b
    assert greedy_decode(window, B).tokens[0] == 1


# ---------------------------------------------------------------- training

def one_window_task():
    labels = np.array([0] * 4 + [2] * 3 + [1] * 5)
    x = np.eye(3)[labels][:, :2] * 2.0 + np.random.default_rng(3).normal(size=(12, 2)) * 0.1
    return x, labels


def test_overfit_one_window_reproduces_sequence():
    x, labels = one_window_task()
    cfg = tiny(window=WindowSpec(12, 12, 0), dropout=0.0, epsilon_end=0.0, decoder_hidden=16)
    tc = TrainConfig(epochs=200, lr=2e-2, batch_size=1, eval_every=200)
    model, log = train_seq2seq([(x, labels)], None, cfg, tc, seed=1)
    trace = greedy_decode(x, model)
    assert trace.tokens == [0, 2, 1, cfg.end_token]
    assert log.entries[-1]["val_aer"] == 0.0


def test_teacher_forced_loss_decreases_across_snapshots():
    x, labels = one_window_task()
    cfg = tiny(window=WindowSpec(12, 12, 0), dropout=0.0, aux_weight=0.0)
    model, log = train_seq2seq([(x, labels)], None, cfg,
                               TrainConfig(epochs=150, lr=2e-3, batch_size=1, eval_every=25),
                               seed=2, snapshot_every=25)
    assert len(log.snapshots) == 6
    losses = []
    for _, params in log.snapshots:
        model.load_params(params)
        losses.append(val(seq2seq_loss(x, target_tokens(collapse(labels), 3), model)))
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:])), losses


def test_training_deterministic_and_selection(tmp_path):
    rng = np.random.default_rng(4)
    data = []
    for _ in range(4):
        labels = np.repeat(rng.permutation(3), rng.integers(4, 9, size=3))
        data.append((np.eye(3)[labels][:, :2] + 0.1 * rng.normal(size=(labels.size, 2)), labels))
    cfg = tiny()
    tc = TrainConfig(epochs=3, lr=5e-3, batch_size=4)
    m1, l1 = train_seq2seq(data[:3], data[3:], cfg, tc, seed=3)
    m2, l2 = train_seq2seq(data[:3], data[3:], cfg, tc, seed=3)
    assert l1.to_dict() == l2.to_dict()
    assert l1.entries[l1.best_epoch]["val_aer"] <= l1.entries[-1]["val_aer"]
    save_seq2seq(tmp_path / "m.json", m1)
    m3 = load_seq2seq(tmp_path / "m.json")
    assert infer_sequences([d[0] for d in data], m1) == infer_sequences([d[0] for d in data], m3)
    with pytest.raises(ConfigError):
        train_seq2seq([], None, cfg, tc)

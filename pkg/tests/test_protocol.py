import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vfldp import dp, protocol
from vfldp.errors import ConfigError, ProtocolFault
from vfldp.protocol import (
    DataOwner, EmbeddingMsg, GradientMsg, Host, OwnerPrivacy, TrainConfig, VflSession,
    bottom_model, decode_message, encode_message, host_concat, host_round, monolithic_model, top_model,
)
from vfldp.tensor import BCE, MSE, backward, forward, head_loss, sgd_step


def toy_problem(n=40, blocks=(3, 2), seed=0, outputs=1):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, sum(blocks)))
    y = (x.sum(axis=1, keepdims=True) > 0).astype(float)
    if outputs == 2:
        y = np.hstack([y, 1 - y])
    edges = np.cumsum((0,) + tuple(blocks))
    cols = [np.arange(a, b) for a, b in zip(edges[:-1], edges[1:])]
    return x, y, cols


def plain_owner(i, x, model, lr=0.1, noise_point=dp.NONE, clip=None, sigma=0.0):
    clip = clip or dp.ClipSpec.never()
    return DataOwner(i, x, x[:2], model, lr, OwnerPrivacy(noise_point, dp.ClipController(clip), sigma, 5))


class TestWire:
    @settings(max_examples=50)
    @given(rows=st.integers(1, 20), cols=st.integers(1, 40), rnd=st.integers(0, 2**32 - 1),
           party=st.integers(0, 10), seed=st.integers(0, 1000))
    def test_round_trip(self, rows, cols, rnd, party, seed):
        payload = np.random.default_rng(seed).normal(size=(rows, cols))
        for msg in (EmbeddingMsg(rnd, party, payload, rows), GradientMsg(rnd, party, payload)):
            back = decode_message(encode_message(msg))
            assert type(back) is type(msg)
            assert back.round == rnd and back.party == party
            data = back.embedding if isinstance(back, EmbeddingMsg) else back.grad_slice
            assert data.tobytes() == payload.tobytes()

    def test_header_layout(self):
        frame = encode_message(EmbeddingMsg(3, 1, np.ones((2, 4)), 2))
        assert frame[8:12] == b"VFLM"
        assert int.from_bytes(frame[:8], "little") == len(frame) - 8
        assert len(frame) == 8 + 30 + 64

    @pytest.mark.parametrize("mangle", [
        lambda f: f[:20],
        lambda f: f[:-8],
        lambda f: f[:8] + b"XXXX" + f[12:],
    ])
    def test_corrupt_frames(self, mangle):
        frame = encode_message(GradientMsg(0, 0, np.zeros((2, 2))))
        with pytest.raises(ProtocolFault):
            decode_message(mangle(frame))


class TestHostConcat:
    def emb(self, party, n_owners=3, rnd=0, rows=4):
        return EmbeddingMsg(rnd, party, np.full((rows, 32), float(party)), rows)

    @pytest.mark.parametrize("n", [3, 4, 5])
    def test_party_order_and_width(self, n):
        msgs = [self.emb(i) for i in reversed(range(n))]
        out = host_concat(msgs, n)
        assert out.shape == (4, 32 * n)
        for i in range(n):
            assert np.all(out[:, 32 * i:32 * (i + 1)] == i)

    def test_missing(self):
        with pytest.raises(ProtocolFault, match="missing"):
            host_concat([self.emb(0), self.emb(2)], 3)

    def test_duplicate(self):
        with pytest.raises(ProtocolFault, match="duplicate"):
            host_concat([self.emb(0), self.emb(0), self.emb(1)], 3)

    def test_mixed_rounds(self):
        with pytest.raises(ProtocolFault):
            host_concat([self.emb(0), self.emb(1, rnd=1)], 2)

    def test_batch_disagreement(self):
        with pytest.raises(ProtocolFault):
            host_concat([self.emb(0), self.emb(1, rows=5)], 2)

    def test_fault_names_round_and_party(self):
        with pytest.raises(ProtocolFault) as info:
            host_concat([self.emb(1, rnd=7), self.emb(1, rnd=7)], 2)
        assert info.value.round == 7 and info.value.party == 1


def test_adult_embedding_shape():
    m = bottom_model(3, np.random.default_rng(0))
    owner = plain_owner(0, np.ones((200, 3)), m)
    msg = owner.forward(0, np.arange(100))
    assert msg.embedding.shape == (100, 32)
    assert msg.sample_count == 100


def test_owner_forward_is_deterministic():
    x = np.random.default_rng(1).normal(size=(10, 3))
    a = plain_owner(0, x, bottom_model(3, np.random.default_rng(3))).forward(0, [1, 2, 3])
    b = plain_owner(0, x, bottom_model(3, np.random.default_rng(3))).forward(0, [1, 2, 3])
    assert a.embedding.tobytes() == b.embedding.tobytes()


def test_owner_rejects_unknown_rows():
    owner = plain_owner(0, np.ones((5, 3)), bottom_model(3, np.random.default_rng(0)))
    with pytest.raises(ProtocolFault):
        owner.forward(0, [4, 5])


def test_stale_gradient_rejected():
    owner = plain_owner(0, np.ones((5, 3)), bottom_model(3, np.random.default_rng(0)))
    owner.forward(2, [0, 1])
    with pytest.raises(ProtocolFault, match="stale"):
        owner.backward_update(GradientMsg(1, 0, np.zeros((2, 32))))
    owner.backward_update(GradientMsg(2, 0, np.zeros((2, 32))))
    with pytest.raises(ProtocolFault, match="stale"):
        owner.backward_update(GradientMsg(2, 0, np.zeros((2, 32))))


def test_host_rejects_early_top_forward():
    host = Host(2, top_model(2, 1, np.random.default_rng(0)), np.zeros((4, 1)), np.zeros((2, 1)), BCE, 0.1)
    host.begin_round(0, [0, 1])
    host.receive(EmbeddingMsg(0, 0, np.zeros((2, 32)), 2))
    with pytest.raises(ProtocolFault):
        host.complete_round()
    with pytest.raises(ProtocolFault):
        host.begin_round(1, [0, 1])


def test_split_gradients_equal_monolith():
    """Owner and top gradients through the protocol match the monolithic network to 1e-10."""
    x, y, cols = toy_problem(n=12, blocks=(3, 2))
    bottoms = [bottom_model(len(c), np.random.default_rng(10 + i), cut_width=4, hidden=6) for i, c in enumerate(cols)]
    top = top_model(2, 1, np.random.default_rng(20), cut_width=4, hidden=5)
    mono = monolithic_model(bottoms, top, cols, x.shape[1])

    logits, tape = forward(mono, x)
    _, g_out, _ = head_loss(BCE, logits, y)
    mono_grads, _ = backward(mono, tape, g_out)

    embeds, tapes = [], []
    for b, c in zip(bottoms, cols):
        e, t = forward(b, x[:, c])
        embeds.append(EmbeddingMsg(0, len(embeds), e, len(x)))
        tapes.append(t)
    concat = host_concat(embeds, 2, cut_width=4)
    top_copy = top.copy()
    t_logits, t_tape = forward(top_copy, concat)
    _, t_g, _ = head_loss(BCE, t_logits, y)
    top_grads, d_concat = backward(top_copy, t_tape, t_g)

    for k in range(2):
        np.testing.assert_allclose(top_grads.weights[k], mono_grads.weights[2 + k], rtol=0, atol=1e-10)
    for i, (b, c) in enumerate(zip(bottoms, cols)):
        g, _ = backward(b, tapes[i], d_concat[:, 4 * i:4 * (i + 1)])
        # the owner's first layer sits at rows cols[i], column band i of the masked layer
        band0 = slice(6 * i, 6 * (i + 1))
        band1 = slice(4 * i, 4 * (i + 1))
        np.testing.assert_allclose(g.weights[0], mono_grads.weights[0][c][:, band0], rtol=0, atol=1e-10)
        np.testing.assert_allclose(g.biases[0], mono_grads.biases[0][band0], rtol=0, atol=1e-10)
        np.testing.assert_allclose(g.weights[1], mono_grads.weights[1][band0, band1], rtol=0, atol=1e-10)
        np.testing.assert_allclose(g.biases[1], mono_grads.biases[1][band1], rtol=0, atol=1e-10)


def test_host_round_slices_match_full_gradient():
    r = np.random.default_rng(4)
    top = top_model(3, 1, r)
    concat = r.normal(size=(5, 96))
    ref = top.copy()
    logits, tape = forward(ref, concat)
    _, g, _ = head_loss(BCE, logits, np.ones((5, 1)))
    _, d = backward(ref, tape, g)
    _, msgs = host_round(top, concat, np.ones(5), BCE, 0.1)
    np.testing.assert_array_equal(np.hstack([m.grad_slice for m in msgs]), d)
    assert [m.party for m in msgs] == [0, 1, 2]


def session(cfg, n=40, blocks=(3, 2, 2), task="binary"):
    x, y, cols = toy_problem(n=n, blocks=blocks)
    return VflSession([x[:, c] for c in cols], [x[:8, c] for c in cols], y, y[:8], task, BCE, cfg)


def test_information_flow_host_never_holds_features():
    s = session(TrainConfig(epochs=1, batch_size=10, lr=0.1))
    list(s.train())
    feature_blocks = [o._train_x for o in s.owners]
    for name, value in vars(s.host).items():
        if isinstance(value, np.ndarray):
            assert not any(value.shape == f.shape and np.array_equal(value, f) for f in feature_blocks), name
    # everything that crossed the wire was an embedding or gradient slice
    assert {entry[1] for entry in s.transport.log} == {"EmbeddingMsg", "GradientMsg"}


def test_round_atomicity():
    s = session(TrainConfig(epochs=2, batch_size=10, lr=0.1))
    list(s.train())
    n = s.n_owners
    per_round = 2 * n
    assert len(s.events) == s.round * per_round
    for r in range(s.round):
        chunk = s.events[r * per_round:(r + 1) * per_round]
        assert all(e[1] == r for e in chunk)
        assert [e[0] for e in chunk] == ["embedding"] * n + ["update"] * n


def test_threaded_matches_sequential():
    base = dict(epochs=3, batch_size=8, lr=0.1, noise_point=dp.GRADIENTS, epsilon=5.0,
                clip=dp.ClipSpec(window=3))
    seq = [m.train_loss for m in session(TrainConfig(scheduler="sequential", **base)).train()]
    thr = [m.train_loss for m in session(TrainConfig(scheduler="threaded", **base)).train()]
    assert seq == thr


@pytest.mark.parametrize("point", [dp.WEIGHTS, dp.GRADIENTS])
def test_never_binding_clip_and_zero_sigma_is_plain_sgd(point):
    x, y, cols = toy_problem(n=10, blocks=(3,))
    a = bottom_model(3, np.random.default_rng(1))
    b = a.copy()
    noisy = plain_owner(0, x, a, lr=0.05, noise_point=point, clip=dp.ClipSpec.never(), sigma=0.0)
    plain = plain_owner(0, x, b, lr=0.05)
    g = np.random.default_rng(2).normal(size=(4, 32))
    for owner in (noisy, plain):
        owner.forward(0, [0, 1, 2, 3])
        owner.backward_update(GradientMsg(0, 0, g))
    np.testing.assert_allclose(a.flat(), b.flat(), rtol=0, atol=1e-15)


def test_noise_none_session_matches_manual_sgd():
    cfg = TrainConfig(epochs=1, batch_size=40, lr=0.1)
    s = session(cfg)
    owners_before = [o.model.copy() for o in s.owners]
    top_before = s.host.top.copy()
    cols = [np.arange(0, 3), np.arange(3, 5), np.arange(5, 7)]
    x, y, _ = toy_problem(n=40, blocks=(3, 2, 2))
    mono = monolithic_model(owners_before, top_before, cols, 7)
    rows = protocol.epoch_batches(40, 40, cfg.seed, 0)[0]
    logits, tape = forward(mono, x[rows])
    _, g, _ = head_loss(BCE, logits, y[rows])
    grads, _ = backward(mono, tape, g)
    sgd_step(mono, grads, 0.1)
    list(s.train())
    np.testing.assert_allclose(s.host.top.layers[1].weights, mono.layers[3].weights, atol=1e-12)
    np.testing.assert_allclose(s.owners[1].model.layers[0].weights, mono.layers[0].weights[3:5, 48:96], atol=1e-12)


def test_warmup_then_private_phases():
    s = session(TrainConfig(epochs=2, batch_size=10, lr=0.1, noise_point=dp.WEIGHTS, epsilon=3.0,
                            clip=dp.ClipSpec(window=5)))
    list(s.train())
    for o in s.owners:
        assert o.phases == ["warmup"] * 5 + ["private"] * 3
        assert o.noised_updates == 3
    assert s.accountant.step_count == 3
    assert s.spent_epsilon == pytest.approx(3.0, abs=1e-9)


def test_embedding_noise_point():
    s = session(TrainConfig(epochs=2, batch_size=10, lr=0.1, noise_point=dp.EMBEDDINGS, epsilon=3.0,
                            clip=dp.ClipSpec(window=2)))
    out = list(s.train())
    assert all(np.isfinite(m.train_loss) for m in out)
    assert s.owners[0].noised_updates == 6


def test_warmup_longer_than_training():
    with pytest.raises(ConfigError, match="warm-up"):
        session(TrainConfig(epochs=1, batch_size=10, noise_point=dp.WEIGHTS, epsilon=1.0))


def test_rounds_per_epoch():
    assert protocol.rounds_per_epoch(26049, 100) == 261
    batches = protocol.epoch_batches(26049, 100, 0, 0)
    assert len(batches) == 261 and batches[-1].size == 49
    assert sorted(np.concatenate(batches)) == list(range(26049))


def test_privacy_budget_parameters():
    cfg = TrainConfig(epochs=100, batch_size=100, noise_point=dp.WEIGHTS, epsilon=1.0)
    budget, warmup = protocol.privacy_budget(cfg, 26049)
    assert warmup == 50
    assert budget.iterations == 26100 - 50
    assert budget.sample_prob == pytest.approx(100 / 26049)

"""Split-network training between n data owners and one label-holding host.

Each round of training follows the same synchronous pattern:

1. the host announces the batch row ids;
2. every owner runs its bottom model on its own feature block and sends an
   :class:`EmbeddingMsg` to the host;
3. once all n embeddings have arrived the host concatenates them in party
   order, runs the top model, computes the loss, updates the top model and
   sends each owner the matching column slice of dLoss/dEmbedding;
4. owners backpropagate the slice through their bottom model, clip and
   perturb according to the privacy settings, and apply an SGD step.

Owners are parties ``0..n-1`` and the host is party ``n``. Messages travel as
bytes through :class:`Transport`, so the host only ever sees what is on the
wire.

Wire frame (all little-endian)::

    u64   frame length in bytes, excluding this field
    4s    magic b"VFLM"
    u8    format version (1)
    u8    kind: 1 = embedding, 2 = gradient slice
    u32   round
    u32   party
    u32   rows
    u32   cols
    u64   sample count (0 for gradient slices)
    f64[rows * cols]   payload, row-major
"""
import math
import queue
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import dp as dpe
from . import rng
from .errors import ConfigError, ProtocolFault
from .metrics import compute_metrics
from .tensor import (
    IDENTITY, RELU, Layer, MlpModel, backward, forward, head_loss,
    l2_regularizer, link, sgd_step,
)

CUT_WIDTH = 32
BOTTOM_HIDDEN = 48
TOP_HIDDEN = 196

MAGIC = b"VFLM"
WIRE_VERSION = 1
KIND_EMBEDDING = 1
KIND_GRADIENT = 2
_LEN = struct.Struct("<Q")
_HEADER = struct.Struct("<4sBBIIIIQ")

# tensor ids inside a noise seed path
TENSOR_WEIGHTS = 0
TENSOR_GRADIENTS = 1
TENSOR_EMBEDDINGS = 2

COLLECTING = "collecting"
TOP_FORWARD_DONE = "top_forward_done"
GRADS_SENT = "grads_sent"


@dataclass(frozen=True)
class EmbeddingMsg:
    round: int
    party: int
    embedding: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class GradientMsg:
    round: int
    party: int
    grad_slice: np.ndarray


def encode_message(msg):
    if isinstance(msg, EmbeddingMsg):
        kind, payload, count = KIND_EMBEDDING, msg.embedding, msg.sample_count
    elif isinstance(msg, GradientMsg):
        kind, payload, count = KIND_GRADIENT, msg.grad_slice, 0
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    payload = np.ascontiguousarray(payload, dtype="<f8")
    rows, cols = payload.shape
    body = _HEADER.pack(MAGIC, WIRE_VERSION, kind, msg.round, msg.party, rows, cols, count) + payload.tobytes()
    return _LEN.pack(len(body)) + body


def decode_message(frame):
    frame = bytes(frame)
    if len(frame) < _LEN.size + _HEADER.size:
        raise ProtocolFault("truncated message frame")
    (length,) = _LEN.unpack_from(frame, 0)
    if length != len(frame) - _LEN.size:
        raise ProtocolFault(f"frame length prefix {length} != body size {len(frame) - _LEN.size}")
    magic, version, kind, rnd, party, rows, cols, count = _HEADER.unpack_from(frame, _LEN.size)
    if magic != MAGIC or version != WIRE_VERSION:
        raise ProtocolFault("bad message magic or version")
    start = _LEN.size + _HEADER.size
    if len(frame) - start != rows * cols * 8:
        raise ProtocolFault("payload size does not match declared shape", rnd, party)
    data = np.frombuffer(frame, dtype="<f8", offset=start).astype(np.float64).reshape(rows, cols)
    if kind == KIND_EMBEDDING:
        return EmbeddingMsg(rnd, party, data, count)
    if kind == KIND_GRADIENT:
        return GradientMsg(rnd, party, data)
    raise ProtocolFault(f"unknown message kind {kind}", rnd, party)


class Transport:
    """Bounded in-process queues, one per directed (src, dst) party pair."""

    def __init__(self, n_owners, capacity=2, timeout=30.0):
        self.n_owners = n_owners
        self.host = n_owners
        self.timeout = timeout
        self._queues = {}
        for i in range(n_owners):
            self._queues[(i, self.host)] = queue.Queue(maxsize=capacity)
            self._queues[(self.host, i)] = queue.Queue(maxsize=capacity)
        self.log = []
        self._lock = threading.Lock()

    def _queue(self, src, dst):
        try:
            return self._queues[(src, dst)]
        except KeyError:
            raise ProtocolFault(f"no channel from {src} to {dst}") from None

    def send(self, src, dst, msg):
        frame = encode_message(msg)
        with self._lock:
            self.log.append(("send", type(msg).__name__, msg.round, src, dst))
        try:
            self._queue(src, dst).put(frame, timeout=self.timeout)
        except queue.Full:
            raise ProtocolFault(f"channel {src}->{dst} is full", msg.round, src) from None

    def recv(self, src, dst):
        try:
            frame = self._queue(src, dst).get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolFault(f"timed out waiting on channel {src}->{dst}", party=src) from None
        return decode_message(frame)


def bottom_model(input_dim, rng_, cut_width=CUT_WIDTH, hidden=BOTTOM_HIDDEN):
    return MlpModel.initialize(input_dim, [hidden, cut_width], [RELU, IDENTITY], rng_)


def top_model(n_owners, n_outputs, rng_, cut_width=CUT_WIDTH, hidden=TOP_HIDDEN):
    return MlpModel.initialize(cut_width * n_owners, [hidden, n_outputs], [RELU, IDENTITY], rng_)


@dataclass
class OwnerPrivacy:
    """Per-owner clip and noise settings.

    ``sigma`` is the noise multiplier; the absolute standard deviation is
    ``sigma * d`` with ``d`` the sensitivity of the perturbed quantity.
    """

    noise_point: str
    clip: dpe.ClipController
    sigma: float = 0.0
    run_seed: int = 0


class DataOwner:
    """Holds one vertical feature block and trains the bottom model on it."""

    def __init__(self, party, train_x, test_x, model, lr, privacy, lam=0.0):
        self.party = party
        self._train_x = np.asarray(train_x, dtype=np.float64)
        self._test_x = np.asarray(test_x, dtype=np.float64)
        if model.input_dim != self._train_x.shape[1]:
            raise ConfigError(f"owner {party}: model input {model.input_dim} != block width {self._train_x.shape[1]}")
        self.model = model
        self.lr = lr
        self.lam = lam
        self.privacy = privacy
        self.round = None
        self._tape = None
        self.phases = []  # per completed round: "warmup", "private" or "plain"
        self.noised_updates = 0

    @property
    def n_train(self):
        return self._train_x.shape[0]

    def forward(self, round_, rows):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0 or rows.min() < 0 or rows.max() >= self.n_train:
            raise ProtocolFault("batch references unknown row ids", round_, self.party)
        emb, self._tape = forward(self.model, self._train_x[rows])
        self.round = round_
        priv = self.privacy
        if priv.noise_point == dpe.EMBEDDINGS:
            norm = float(np.max(np.linalg.norm(emb, axis=1)))
            if not priv.clip.active:
                priv.clip.observe(norm)
            else:
                s = priv.clip.limit
                emb = np.vstack([dpe.clip(row, s) for row in emb])
                draw = dpe.NoiseDraw(priv.sigma, (priv.run_seed, self.party, round_, TENSOR_EMBEDDINGS))
                emb = dpe.add_gaussian_noise(emb, priv.sigma, dpe.sensitivity_bound(s), draw)
                self.noised_updates += 1
        return EmbeddingMsg(round_, self.party, emb, int(rows.size))

    def embed_test(self):
        out, _ = forward(self.model, self._test_x)
        return out

    def backward_update(self, msg):
        if msg.party != self.party:
            raise ProtocolFault("gradient slice addressed to another party", msg.round, self.party)
        if self.round is None or msg.round != self.round or self._tape is None:
            raise ProtocolFault(f"stale gradient slice (owner is at round {self.round})", msg.round, self.party)
        grads, _ = backward(self.model, self._tape, msg.grad_slice)
        self._tape = None
        if self.lam > 0:
            grads = grads + l2_regularizer(self.model, self.lam)[1]
        priv = self.privacy
        if priv.noise_point == dpe.EMBEDDINGS:
            sgd_step(self.model, grads, self.lr)
            self.phases.append("private" if priv.clip.active else "warmup")
            return self
        flat = grads.flat()
        if not priv.clip.active:
            priv.clip.observe(math.sqrt(_kernels.sq_norm(flat)))
            sgd_step(self.model, grads, self.lr)
            self.phases.append("warmup")
            return self
        s = priv.clip.limit
        g = dpe.clip(flat, s)
        path = (priv.run_seed, self.party, msg.round)
        if priv.noise_point == dpe.GRADIENTS and priv.sigma > 0:
            g = dpe.add_gaussian_noise(
                g, priv.sigma, dpe.sensitivity_bound(s), dpe.NoiseDraw(priv.sigma, path + (TENSOR_GRADIENTS,))
            )
        if priv.noise_point == dpe.WEIGHTS and priv.sigma > 0:
            # the released quantity is the weight delta, whose norm is at most lr * s
            delta = dpe.add_gaussian_noise(
                -self.lr * g, priv.sigma, dpe.sensitivity_bound(self.lr * s),
                dpe.NoiseDraw(priv.sigma, path + (TENSOR_WEIGHTS,)),
            )
            sgd_step(self.model, grads.with_flat(-delta), 1.0)
        else:
            sgd_step(self.model, grads.with_flat(g), self.lr)
        noised = priv.noise_point in (dpe.WEIGHTS, dpe.GRADIENTS) and priv.sigma > 0
        self.noised_updates += int(noised)
        self.phases.append("private" if noised else "plain")
        return self


@dataclass
class RoundState:
    round: int
    received: dict = field(default_factory=dict)
    phase: str = COLLECTING


def host_concat(msgs, n_owners, cut_width=CUT_WIDTH):
    """Concatenate one embedding per owner, columns in ascending party order."""
    by_party = {}
    rnd = None
    for m in msgs:
        if m.party in by_party:
            raise ProtocolFault("duplicate embedding", m.round, m.party)
        if not 0 <= m.party < n_owners:
            raise ProtocolFault("embedding from unknown party", m.round, m.party)
        if rnd is None:
            rnd = m.round
        elif m.round != rnd:
            raise ProtocolFault("embeddings from different rounds", m.round, m.party)
        if m.embedding.shape[1] != cut_width:
            raise ProtocolFault(f"embedding width {m.embedding.shape[1]} != cut width {cut_width}", m.round, m.party)
        by_party[m.party] = m
    missing = [i for i in range(n_owners) if i not in by_party]
    if missing:
        raise ProtocolFault(f"missing embeddings from parties {missing}", rnd)
    rows = {m.embedding.shape[0] for m in by_party.values()}
    if len(rows) != 1:
        raise ProtocolFault("embeddings disagree on batch size", rnd)
    return np.hstack([by_party[i].embedding for i in range(n_owners)])


def host_round(top, concat, labels, loss_kind, lr, round_=0, n_owners=None, cut_width=CUT_WIDTH):
    """Top-model step on one batch.

    Returns ``(loss, grad_msgs)``; ``top`` is updated in place.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape[0] != concat.shape[0]:
        raise ProtocolFault(f"{labels.shape[0]} labels for {concat.shape[0]} embedded rows", round_)
    n_owners = n_owners or concat.shape[1] // cut_width
    logits, tape = forward(top, concat)
    loss, g_out, _ = head_loss(loss_kind, logits, labels)
    grads, d_concat = backward(top, tape, g_out)
    sgd_step(top, grads, lr)
    msgs = [
        GradientMsg(round_, i, d_concat[:, i * cut_width:(i + 1) * cut_width].copy())
        for i in range(n_owners)
    ]
    return loss, msgs


class Host:
    """Label holder. Sees embeddings, labels and its own top model only."""

    def __init__(self, n_owners, top, train_labels, test_labels, loss_kind, lr, cut_width=CUT_WIDTH):
        self.n_owners = n_owners
        self.top = top
        self.train_labels = np.asarray(train_labels, dtype=np.float64)
        self.test_labels = np.asarray(test_labels, dtype=np.float64)
        self.loss_kind = loss_kind
        self.lr = lr
        self.cut_width = cut_width
        self.state = None
        self._rows = None

    def begin_round(self, round_, rows):
        if self.state is not None and self.state.phase != GRADS_SENT:
            raise ProtocolFault(f"round {self.state.round} still open", round_)
        self.state = RoundState(round_)
        self._rows = np.asarray(rows, dtype=np.int64)

    def receive(self, msg):
        st = self.state
        if st is None or msg.round != st.round:
            raise ProtocolFault("embedding for a round that is not open", msg.round, msg.party)
        if st.phase != COLLECTING:
            raise ProtocolFault("embedding after the top forward pass", msg.round, msg.party)
        if msg.party in st.received:
            raise ProtocolFault("duplicate embedding", msg.round, msg.party)
        if msg.embedding.shape[0] != self._rows.size:
            raise ProtocolFault("embedding rows do not match the batch", msg.round, msg.party)
        st.received[msg.party] = msg

    def complete_round(self):
        st = self.state
        if len(st.received) != self.n_owners:
            raise ProtocolFault("top forward before all embeddings arrived", st.round)
        concat = host_concat(st.received.values(), self.n_owners, self.cut_width)
        st.phase = TOP_FORWARD_DONE
        loss, msgs = host_round(
            self.top, concat, self.train_labels[self._rows], self.loss_kind, self.lr,
            st.round, self.n_owners, self.cut_width,
        )
        st.phase = GRADS_SENT
        return loss, msgs

    def evaluate(self, test_embeddings):
        concat = host_concat(test_embeddings, self.n_owners, self.cut_width)
        logits, _ = forward(self.top, concat)
        loss, _, preds = head_loss(self.loss_kind, logits, self.test_labels)
        return loss, preds


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 0.0002
    lam: float = 0.0
    seed: int = 0
    noise_seed: int = None
    noise_point: str = dpe.NONE
    clip: dpe.ClipSpec = None
    epsilon: float = None
    delta: float = 0.001
    c2: float = 1.0
    dp_iterations: int = None  # defaults to the number of private rounds
    scheduler: str = "sequential"
    cut_width: int = CUT_WIDTH

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.lam < 0:
            raise ConfigError("lr and lam must be non-negative")
        if self.noise_point not in dpe.NOISE_POINTS:
            raise ConfigError(f"noise_point must be one of {dpe.NOISE_POINTS}")
        if self.scheduler not in ("sequential", "threaded"):
            raise ConfigError("scheduler must be 'sequential' or 'threaded'")
        if self.noise_seed is None:
            self.noise_seed = self.seed
        if self.clip is None:
            self.clip = dpe.ClipSpec.never() if self.noise_point == dpe.NONE else dpe.ClipSpec()
        if self.noise_point != dpe.NONE and self.epsilon is None:
            raise ConfigError("a noised run needs an epsilon")

    @property
    def private(self):
        return self.noise_point != dpe.NONE


def rounds_per_epoch(n_train, batch_size):
    return math.ceil(n_train / batch_size)


def epoch_batches(n_train, batch_size, seed, epoch):
    order = rng.generator("shuffle", seed, epoch).permutation(n_train)
    return [order[i:i + batch_size] for i in range(0, n_train, batch_size)]


def privacy_budget(cfg, n_train):
    """``(DpConfig, warmup_rounds)`` for a private run, ``(None, 0)`` otherwise."""
    if not cfg.private:
        return None, 0
    total = cfg.epochs * rounds_per_epoch(n_train, cfg.batch_size)
    warmup = cfg.clip.warmup_iterations
    if warmup >= total:
        raise ConfigError(
            f"clip warm-up of {warmup} rounds leaves no private rounds out of {total}"
        )
    iterations = cfg.dp_iterations if cfg.dp_iterations is not None else total - warmup
    budget = dpe.DpConfig(
        epsilon=cfg.epsilon,
        delta=cfg.delta,
        iterations=iterations,
        sample_prob=min(1.0, cfg.batch_size / n_train),
        c2=cfg.c2,
        noise_point=cfg.noise_point,
    )
    return budget, warmup


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_loss: float
    metrics: dict
    spent_epsilon: float


class VflSession:
    """Wires owners, host, transport and accountant for one training run."""

    def __init__(self, owner_train, owner_test, train_labels, test_labels, task, loss_kind, cfg):
        self.cfg = cfg
        self.task = task
        self.n_owners = len(owner_train)
        if self.n_owners < 1:
            raise ConfigError("need at least one data owner")
        self.n_train = train_labels.shape[0]
        self.budget, self.warmup = privacy_budget(cfg, self.n_train)
        sigma = dpe.calibrate_sigma(self.budget) if self.budget else 0.0
        self.sigma = sigma
        self.accountant = dpe.PrivacyAccountant(self.budget) if self.budget else None
        self.owners = []
        for i, (xtr, xte) in enumerate(zip(owner_train, owner_test)):
            model = bottom_model(xtr.shape[1], rng.generator("init", cfg.seed, i), cfg.cut_width)
            privacy = OwnerPrivacy(cfg.noise_point, dpe.ClipController(cfg.clip), sigma, cfg.noise_seed)
            self.owners.append(DataOwner(i, xtr, xte, model, cfg.lr, privacy, cfg.lam))
        top = top_model(self.n_owners, train_labels.shape[1], rng.generator("init", cfg.seed, "host"), cfg.cut_width)
        self.host = Host(self.n_owners, top, train_labels, test_labels, loss_kind, cfg.lr, cfg.cut_width)
        self.transport = Transport(self.n_owners)
        self.events = []
        self.round = 0
        self._pool = ThreadPoolExecutor(self.n_owners) if cfg.scheduler == "threaded" else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _each_owner(self, fn):
        if self._pool is None:
            return [fn(o) for o in self.owners]
        return list(self._pool.map(fn, self.owners))

    def run_round(self, rows):
        r = self.round
        host_id = self.n_owners
        if self.accountant is not None and r >= self.warmup:
            # raises BudgetExhausted before any part of the round executes
            self.accountant.spend(self.budget.step_epsilon, self.budget.step_delta)
        self.host.begin_round(r, rows)

        def up(owner):
            msg = owner.forward(r, rows)
            self.transport.send(owner.party, host_id, msg)

        self._each_owner(up)
        for i in range(self.n_owners):
            msg = self.transport.recv(i, host_id)
            if msg.party != i:
                raise ProtocolFault("message arrived on the wrong channel", r, msg.party)
            self.host.receive(msg)
            self.events.append(("embedding", r, i))
        loss, grad_msgs = self.host.complete_round()
        for msg in grad_msgs:
            self.transport.send(host_id, msg.party, msg)

        def down(owner):
            owner.backward_update(self.transport.recv(host_id, owner.party))

        self._each_owner(down)
        for i in range(self.n_owners):
            self.events.append(("update", r, i))
        self.round += 1
        return loss

    def evaluate(self):
        embeds = [EmbeddingMsg(-1, o.party, o.embed_test(), 0) for o in self.owners]
        loss, preds = self.host.evaluate(embeds)
        return loss, compute_metrics(self.task, preds, self.host.test_labels)

    @property
    def spent_epsilon(self):
        return self.accountant.spent_epsilon if self.accountant else 0.0

    def train(self):
        """Yield one :class:`EpochMetrics` per epoch.

        Raises :class:`BudgetExhausted` (after the completed epochs have been
        yielded) when the accountant refuses a spend.
        """
        try:
            for epoch in range(self.cfg.epochs):
                total = 0.0
                for rows in epoch_batches(self.n_train, self.cfg.batch_size, self.cfg.seed, epoch):
                    total += self.run_round(rows) * rows.size
                test_loss, metrics = self.evaluate()
                yield EpochMetrics(epoch + 1, total / self.n_train, test_loss, metrics, self.spent_epsilon)
        finally:
            self.close()


def train(owner_train, owner_test, train_labels, test_labels, task, loss_kind, cfg):
    """Convenience wrapper: build a :class:`VflSession` and stream its epochs."""
    session = VflSession(owner_train, owner_test, train_labels, test_labels, task, loss_kind, cfg)
    yield from session.train()


def monolithic_model(bottoms, top, owner_columns, n_features):
    """Single network equivalent to the split one.

    The first two layers become block-diagonal masked layers so the owners'
    feature blocks stay disconnected from each other; the weights of bottom
    ``i`` occupy rows ``owner_columns[i]`` and its own column band.
    """
    layers = []
    for k in range(2):
        in_dims = [b.layers[k].fan_in for b in bottoms]
        out_dims = [b.layers[k].fan_out for b in bottoms]
        n_in = n_features if k == 0 else sum(in_dims)
        w = np.zeros((n_in, sum(out_dims)))
        mask = np.zeros_like(w)
        bias = np.concatenate([b.layers[k].bias for b in bottoms])
        col = 0
        row = 0
        for i, b in enumerate(bottoms):
            rows = np.asarray(owner_columns[i]) if k == 0 else np.arange(row, row + in_dims[i])
            cols = np.arange(col, col + out_dims[i])
            w[np.ix_(rows, cols)] = b.layers[k].weights
            mask[np.ix_(rows, cols)] = 1.0
            col += out_dims[i]
            row += in_dims[i]
        layers.append(Layer(w, bias, bottoms[0].layers[k].activation, mask))
    layers.extend(l.copy() for l in top.layers)
    return MlpModel(layers, n_features)


def centralized_train(features_train, features_test, train_labels, test_labels, owner_columns,
                      task, loss_kind, cfg):
    """Train the monolithic equivalent network on the full feature matrix.

    Initialization, batch order and learning rate match :class:`VflSession`
    for the same config, so per-epoch losses agree with a noise-free split run.
    """
    n_owners = len(owner_columns)
    bottoms = [
        bottom_model(len(cols), rng.generator("init", cfg.seed, i), cfg.cut_width)
        for i, cols in enumerate(owner_columns)
    ]
    top = top_model(n_owners, train_labels.shape[1], rng.generator("init", cfg.seed, "host"), cfg.cut_width)
    model = monolithic_model(bottoms, top, owner_columns, features_train.shape[1])
    n_train = train_labels.shape[0]
    for epoch in range(cfg.epochs):
        total = 0.0
        for rows in epoch_batches(n_train, cfg.batch_size, cfg.seed, epoch):
            logits, tape = forward(model, features_train[rows])
            loss, g_out, _ = head_loss(loss_kind, logits, train_labels[rows])
            grads, _ = backward(model, tape, g_out)
            if cfg.lam > 0:
                grads = grads + l2_regularizer(model, cfg.lam, layers=(0, 1))[1]
            sgd_step(model, grads, cfg.lr)
            total += loss * rows.size
        logits, _ = forward(model, features_test)
        test_loss, _, preds = head_loss(loss_kind, logits, test_labels)
        yield EpochMetrics(epoch + 1, total / n_train, test_loss, compute_metrics(task, preds, test_labels), 0.0)


def predictions(session):
    """Link-space test predictions of a trained session."""
    embeds = [EmbeddingMsg(-1, o.party, o.embed_test(), 0) for o in session.owners]
    concat = host_concat(embeds, session.n_owners, session.cfg.cut_width)
    logits, _ = forward(session.host.top, concat)
    return link(session.host.loss_kind, logits)

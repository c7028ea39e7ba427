"""Online training: Adam, the streaming loop and the copy-task loop.

Both loops run `batch_size` independent sequences in lockstep. Each lane
owns its hidden state, its estimator state and its random stream; the only
shared object is the parameter vector, updated once per step with the
arithmetic mean of the per-lane gradients. Resetting a lane zeroes its
hidden state and its estimator state together, so no stale gradient
information survives a reset.

Windowed estimators (tbptt) contribute gradients only when a lane's window
flushes (every `horizon` observed steps, and at any reset or sequence end);
on flush steps the update still divides by the full batch size.
"""

from dataclasses import dataclass

import numpy as np

from kfrtrl.cells import forward, jacobians, output_logits
from kfrtrl.estimators import make_estimator
from kfrtrl.linalg import spawn_rngs
from kfrtrl.losses import xent_loss_and_grad
from kfrtrl.tasks import gen_copy_sample

__all__ = [
    "Adam", "ExperimentRecord", "TrainConfig", "evaluate_bpc", "one_hot",
    "train_copy", "train_stream", "xent_loss_and_grad",
]


@dataclass
class TrainConfig:
    estimator: str = "kf-rtrl"
    learning_rate: float = 10 ** -2.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    reset_prob: float = 0.0
    seed: int = 0
    max_steps: int = 1000
    horizon: int = 25
    avg_count: int = 1

    def __post_init__(self):
        if not 0.0 <= self.reset_prob <= 1.0:
            raise ValueError("reset_prob must be in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")


@dataclass
class ExperimentRecord:
    step: int
    estimator: str
    metric: str
    value: float
    seed: int


class Adam:
    """Bias-corrected Adam over a list of parameter arrays (in-place)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def update(self, params, grads, lr):
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    "non-finite gradient encountered at Adam step "
                    f"{self.t + 1}; aborting instead of training on it")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def one_hot(index, size):
    x = np.zeros(size)
    x[index] = 1.0
    return x


def _build_lane_parts(config, cell):
    b = config.batch_size
    rngs = spawn_rngs(config.seed, b)
    ests = [make_estimator(config.estimator, cell, horizon=config.horizon,
                           avg_count=config.avg_count) for _ in range(b)]
    states = [cell.zero_state() for _ in range(b)]
    return rngs, ests, states


def _lane_step(cell, est, state, rng, x_sym, target, masked=True):
    """One lane-step: forward, loss, estimator advance, gradient pieces.

    Returns (new_state, loss_bits, rec_grad or None, out_grad or None).
    Windowed estimators get the raw target pushed into their window and
    return no per-step gradient.
    """
    tr = forward(cell, state, one_hot(x_sym, cell.m))
    if masked:
        logits = output_logits(cell, tr.h_next)
        loss, dlogits = xent_loss_and_grad(logits, target)
    else:
        loss, dlogits = 0.0, None
    if est.windowed:
        est.observe(tr, target if masked else None)
        return tr.state_next, loss, None, None
    jac = jacobians(cell, tr)
    est.observe(tr, jac, rng)
    if dlogits is None:
        return tr.state_next, loss, None, None
    dldstate = cell.embed_state_grad(dlogits @ cell.w_out.T)
    rec = est.rec_gradient(dldstate)
    out = np.outer(tr.h_next, dlogits)
    return tr.state_next, loss, rec, out


def evaluate_bpc(cell, corpus, limit=None):
    """Mean bits/char of the current parameters over a corpus prefix
    (forward only, from a zero state)."""
    enc = corpus.encoded
    steps = len(enc) - 1 if limit is None else min(limit, len(enc) - 1)
    state = cell.zero_state()
    total = 0.0
    for i in range(steps):
        tr = forward(cell, state, one_hot(int(enc[i]), cell.m))
        loss, _ = xent_loss_and_grad(output_logits(cell, tr.h_next),
                                     int(enc[i + 1]))
        total += loss
        state = tr.state_next
    return total / steps


def train_stream(config, cell, streams, valid_corpus=None, valid_every=1000,
                 valid_limit=2000):
    """Online training over per-lane (input, target) symbol streams.

    Emits one train_bpc record per step (mean over the batch) and, when a
    validation corpus is given, a valid_bpc record every valid_every steps.
    Ends normally when any stream is exhausted or max_steps is reached.
    """
    if len(streams) != config.batch_size:
        raise ValueError("need exactly one stream per batch lane")
    b = config.batch_size
    rngs, ests, states = _build_lane_parts(config, cell)
    adam = Adam(config.beta1, config.beta2, config.eps)
    name = ests[0].name
    windowed = ests[0].windowed
    since_flush = [0] * b
    records = []
    for step in range(config.max_steps):
        items = []
        for stream in streams:
            item = next(stream, None)
            if item is None:
                return records
            items.append(item)
        rec_sum = np.zeros(cell.num_recurrent_params)
        out_sum = np.zeros_like(cell.w_out)
        any_grad = False
        losses = []
        resets = []
        for i in range(b):
            x_sym, y = items[i]
            states[i], loss, rec, out = _lane_step(
                cell, ests[i], states[i], rngs[i], x_sym, y)
            losses.append(loss)
            if rec is not None:
                rec_sum += rec
                out_sum += out
                any_grad = True
            resets.append(config.reset_prob > 0.0
                          and rngs[i].uniform() < config.reset_prob)
        if windowed:
            for i in range(b):
                since_flush[i] += 1
                if ((since_flush[i] >= config.horizon or resets[i])
                        and len(ests[i].window) > 0):
                    rec, out = ests[i].flush(cell)
                    rec_sum += rec
                    out_sum += out
                    since_flush[i] = 0
                    any_grad = True
        if any_grad:
            adam.update([cell.w, cell.w_out],
                        [rec_sum.reshape(cell.w.shape) / b, out_sum / b],
                        config.learning_rate)
        for i in range(b):
            if resets[i]:
                states[i] = cell.zero_state()
                ests[i].reset()
                since_flush[i] = 0
        records.append(ExperimentRecord(step, name, "train_bpc",
                                        float(np.mean(losses)), config.seed))
        if valid_corpus is not None and (step + 1) % valid_every == 0:
            records.append(ExperimentRecord(
                step, name, "valid_bpc",
                evaluate_bpc(cell, valid_corpus, valid_limit), config.seed))
    return records


class _CopyLane:
    __slots__ = ("sample", "pos", "loss_sum", "t_level", "since_flush")

    def __init__(self):
        self.sample = None
        self.pos = 0
        self.loss_sum = 0.0
        self.t_level = 0
        self.since_flush = 0


@dataclass
class CopySequenceRecord:
    step: int
    T: int
    bits_per_char: float
    estimator: str
    seed: int


def train_copy(config, cell, curriculum, max_sequences):
    """Curriculum copy-task training.

    Lanes stream one sample after another; hidden state and estimator state
    reset at every sequence boundary. The loss is masked to the
    reconstruction phase and each finished sequence reports bits/char over
    its L+1 masked positions, which also drives the curriculum. Returns
    (per-sequence records, curriculum).
    """
    b = config.batch_size
    rngs, ests, states = _build_lane_parts(config, cell)
    adam = Adam(config.beta1, config.beta2, config.eps)
    name = ests[0].name
    windowed = ests[0].windowed
    lanes = [_CopyLane() for _ in range(b)]
    records = []
    completed = 0
    for step in range(config.max_steps):
        if completed >= max_sequences:
            break
        rec_sum = np.zeros(cell.num_recurrent_params)
        out_sum = np.zeros_like(cell.w_out)
        any_grad = False
        finished = []
        for i in range(b):
            lane = lanes[i]
            if lane.sample is None:
                lane.sample = gen_copy_sample(curriculum.T, rngs[i])
                lane.t_level = curriculum.T
                lane.pos = 0
                lane.loss_sum = 0.0
                lane.since_flush = 0
                states[i] = cell.zero_state()
                ests[i].reset()
            sample = lane.sample
            masked = bool(sample.mask[lane.pos])
            states[i], loss, rec, out = _lane_step(
                cell, ests[i], states[i], rngs[i],
                int(sample.inputs[lane.pos]), int(sample.targets[lane.pos]),
                masked=masked)
            lane.loss_sum += loss
            lane.pos += 1
            lane.since_flush += 1
            if rec is not None:
                rec_sum += rec
                out_sum += out
                any_grad = True
            seq_end = lane.pos == len(sample.inputs)
            if windowed and ((lane.since_flush >= config.horizon or seq_end)
                             and len(ests[i].window) > 0):
                w_rec, w_out = ests[i].flush(cell)
                rec_sum += w_rec
                out_sum += w_out
                lane.since_flush = 0
                any_grad = True
            if seq_end:
                bpc = lane.loss_sum / (sample.length + 1)
                finished.append((lane.t_level, bpc))
                lane.sample = None
        if any_grad:
            adam.update([cell.w, cell.w_out],
                        [rec_sum.reshape(cell.w.shape) / b, out_sum / b],
                        config.learning_rate)
        for t_level, bpc in finished:
            if completed >= max_sequences:
                break
            records.append(CopySequenceRecord(step, t_level, bpc, name,
                                              config.seed))
            curriculum.update(bpc)
            completed += 1
    return records, curriculum

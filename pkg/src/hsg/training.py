"""Loss functions and the two training regimes.

Maximum-likelihood training minimizes L_ll plus a weighted sum of per-step
hidden-state losses against teacher traces computed from the gold captions.
REINFORCE training samples a caption, uses the greedy caption's reward as a
variance-reduction baseline, and optionally adds word-level intermediate
rewards: each emission's coefficient gets the suffix sum of the hidden-state
losses, and the fully differentiable state-loss pathway is added on top.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor, Tape, ContractError, backward, log_softmax, no_grad, pick,
    squared_l2,
)
from .metrics import bleu4, cider, rouge_l
from .student import (
    StateTransformNet, beam_search, greedy_decode, sample_decode,
    teacher_forced,
)
from .teacher import TrainingDiverged

__all__ = [
    "RewardTrace", "loss_ll", "state_loss_trace", "joint_mle_loss",
    "scst_gradients", "hsg_gradients", "pretrain_state_net", "train_student",
    "make_reward_fn", "evaluate_split", "clip_gradients", "sgd_update",
    "zero_gradients", "collect_gradients",
]


def loss_ll(logits_seq, gold_ids):
    """Negative sum of the log softmax at the gold ids."""
    if len(logits_seq) != len(gold_ids):
        raise ContractError(
            f"loss_ll: {len(logits_seq)} logits for {len(gold_ids)} gold ids")
    total = None
    for logits, gold in zip(logits_seq, gold_ids):
        term = pick(log_softmax(logits), gold)
        total = term if total is None else total + term
    return -total


def state_loss_trace(student_trace, teacher_trace, match_cell=False):
    """Per-step squared L2 between student and teacher hidden states.

    Both traces are lists (over t) of per-layer (h, c) pairs.  The teacher
    side must be constant tensors; gradients flow only into the student
    states.  Layer losses are summed.
    """
    if len(student_trace) != len(teacher_trace):
        raise ContractError(
            f"state_loss_trace: trace lengths {len(student_trace)} and "
            f"{len(teacher_trace)} differ")
    losses = []
    for s_state, t_state in zip(student_trace, teacher_trace):
        if len(s_state) != len(t_state):
            raise ContractError(
                f"state_loss_trace: layer counts {len(s_state)} and "
                f"{len(t_state)} differ")
        loss = None
        for (sh, sc), (th, tc) in zip(s_state, t_state):
            term = squared_l2(sh, Tensor(th.data))
            if match_cell:
                term = term + squared_l2(sc, Tensor(tc.data))
            loss = term if loss is None else loss + term
        losses.append(loss)
    return losses


def joint_mle_loss(ll, state_losses, lam):
    """L_ll + lam * sum of state losses; lam = 0 returns L_ll unchanged."""
    if lam < 0:
        raise ContractError(f"joint_mle_loss: negative weight {lam}")
    if lam == 0 or not state_losses:
        return ll
    total = state_losses[0]
    for term in state_losses[1:]:
        total = total + term
    return ll + total * lam


@dataclass
class RewardTrace:
    """Bookkeeping of one policy-gradient step."""
    reward: float
    baseline: float
    advantage: float
    state_losses: list = field(default_factory=list)
    coefficients: list = field(default_factory=list)


def _policy_backward(tape, log_probs, coefficients, extra=None):
    """Backpropagate sum_m coeff_m * log p_m (+ extra differentiable term)."""
    surrogate = None
    for lp, coeff in zip(log_probs, coefficients):
        term = lp * coeff
        surrogate = term if surrogate is None else surrogate + term
    if extra is not None:
        surrogate = surrogate + extra
    backward(tape, surrogate)
    return surrogate


def scst_gradients(tape, rollout, greedy, refs, reward_fn):
    """Self-critical policy gradients: every emission weighted by -advantage."""
    r = reward_fn(rollout.tokens, refs)
    b = reward_fn(greedy.tokens, refs)
    adv = r - b
    coeffs = [-adv] * len(rollout.log_probs)
    _policy_backward(tape, rollout.log_probs, coeffs)
    return RewardTrace(r, b, adv, [], coeffs)


def _check_teacher_match(teacher, rollout):
    dims = teacher.decoder.layer_dims
    state0 = rollout.states[0]
    if len(state0) != len(dims) or any(
            h.data.shape != (d,) for (h, _c), d in zip(state0, dims)):
        raise ContractError(
            "hsg_gradients: teacher and student decoder architectures differ")


def hsg_gradients(tape, rollout, greedy, refs, reward_fn, teacher, lam,
                  features=None, match_cell=False, discount=1.0):
    """Policy gradients with hidden-state guidance.

    The sampled caption is fed to the frozen teacher autoencoder (as the sole
    encoder input) and teacher-forced through the teacher decoder to produce
    the target trace.  Emission m is weighted by
    lam * suffix_sum(state losses from m-1) - advantage, with the losses held
    constant inside the score term; the differentiable pathway
    lam * sum_t L_t is added separately.  With lam = 0 this reduces exactly
    to scst_gradients.
    """
    _check_teacher_match(teacher, rollout)
    r = reward_fn(rollout.tokens, refs)
    b = reward_fn(greedy.tokens, refs)
    adv = r - b
    if lam == 0:
        coeffs = [-adv] * len(rollout.log_probs)
        _policy_backward(tape, rollout.log_probs, coeffs)
        return RewardTrace(r, b, adv, [], coeffs)

    teacher_trace = teacher.trace_for_tokens(rollout.tokens, features)
    losses = state_loss_trace(rollout.trace, teacher_trace, match_cell=match_cell)
    vals = [loss.item() for loss in losses]
    suffix = [0.0] * (len(vals) + 1)
    for t in range(len(vals) - 1, -1, -1):
        suffix[t] = vals[t] + discount * suffix[t + 1]
    coeffs = [lam * suffix[m] - adv for m in range(len(rollout.log_probs))]

    diff_term = losses[0]
    for term in losses[1:]:
        diff_term = diff_term + term
    _policy_backward(tape, rollout.log_probs, coeffs, extra=diff_term * lam)
    return RewardTrace(r, b, adv, vals, coeffs)


def make_reward_fn(metric, vocab, doc_freq, smooth_bleu=True):
    """Sentence reward over word sequences; candidate ids are decoded first."""
    if metric == "cider":
        def fn(tokens, refs):
            return cider(vocab.decode(tokens), refs, doc_freq)
    elif metric == "bleu4":
        def fn(tokens, refs):
            return bleu4(vocab.decode(tokens), refs, smooth=smooth_bleu)
    elif metric == "rouge_l":
        def fn(tokens, refs):
            return rouge_l(vocab.decode(tokens), refs)
    else:
        raise ContractError(f"unknown reward metric {metric!r}")
    return fn


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.reshape(-1), p.grad.reshape(-1)))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def sgd_update(params, lr):
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


def zero_gradients(params):
    for p in params:
        p.grad = None


def collect_gradients(named_params):
    """Snapshot name -> gradient array (zeros when untouched)."""
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for name, p in named_params.items()}


def pretrain_state_net(records, teacher, vocab, cfg, log=print):
    """Fit the state transformation network to the teacher's initial states.

    The target for a scene is the teacher's pooled initial hidden state from
    its gold captions (the t = 0 state loss); only h is fitted, c stays zero.
    """
    rng = np.random.default_rng([cfg.seed, 431])
    net = StateTransformNet(records[0].features.shape[1],
                            teacher.decoder.layer_dims, rng)
    params = list(net.named_parameters().values())

    targets = []
    for rec in records:
        content = [vocab.encode(cap)[1:-1] for cap in rec.captions]
        with no_grad():
            init = teacher.encode_pooled(content, Tensor(rec.features))
        targets.append([h.data.copy() for h, _c in init])

    order = rng.permutation(len(records))
    final_loss = 0.0
    for step in range(cfg.statenet_steps):
        idx = int(order[step % len(records)])
        if step > 0 and step % len(records) == 0:
            order = rng.permutation(len(records))
        rec = records[idx]
        with Tape() as tape:
            vbar = Tensor(rec.features.mean(axis=0))
            hs = net(vbar)
            loss = None
            for h, target in zip(hs, targets[idx]):
                term = squared_l2(h, Tensor(target))
                loss = term if loss is None else loss + term
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"state net loss became {loss.item()}")
            backward(tape, loss)
        clip_gradients(params, cfg.grad_clip)
        sgd_update(params, cfg.statenet_lr)
        zero_gradients(params)
        final_loss = loss.item()

    mean_loss = 0.0
    with no_grad():
        for rec, target in zip(records, targets):
            hs = net(Tensor(rec.features.mean(axis=0)))
            mean_loss += sum(
                float(np.sum((h.data - t) ** 2)) for h, t in zip(hs, target))
    mean_loss /= len(records)
    log(f"state net: final step loss {final_loss:.6f}, mean loss {mean_loss:.6f}")
    return net


class StudentModel:
    """Deployed caption model: decoder plus state transformation network."""

    def __init__(self, decoder, statenet):
        self.decoder = decoder
        self.statenet = statenet

    def named_parameters(self):
        params = dict(self.decoder.named_parameters("decoder"))
        params.update(self.statenet.named_parameters("statenet"))
        return params

    def initial_state(self, ctx):
        return self.statenet.initial_state(ctx.vbar)


def build_student(teacher, statenet, seed):
    """Fresh student initialized with the teacher decoder's parameters.

    The state transformation network is copied too, so training the student
    never mutates the pretrained network handed in.
    """
    rng = np.random.default_rng([seed, 733])
    dec = teacher.decoder
    cls = type(dec)
    student_dec = cls(dec.vocab_size, dec.embedding.embed_dim, dec.hidden_dim,
                      dec.feature_dim, dec.eos_id, rng)
    src = dec.named_parameters("decoder")
    for name, p in student_dec.named_parameters("decoder").items():
        p.data[...] = src[name].data
    net_copy = None
    if statenet is not None:
        net_copy = StateTransformNet(statenet.feature_dim, statenet.layer_dims,
                                     rng)
        src_net = statenet.named_parameters("statenet")
        for name, p in net_copy.named_parameters("statenet").items():
            p.data[...] = src_net[name].data
    return StudentModel(student_dec, net_copy)


def evaluate_split(student, records, vocab, doc_freq, beam_width, t_max):
    """Beam-decode a split and average the sentence-level metrics."""
    sums = {"bleu4": 0.0, "rouge_l": 0.0, "cider": 0.0}
    with no_grad():
        for rec in records:
            ctx = student.decoder.begin(rec.features)
            init = student.initial_state(ctx)
            best = beam_search(student.decoder, ctx, init, t_max,
                               width=beam_width, bos_id=vocab.BOS)
            words = vocab.decode(best.tokens)
            sums["bleu4"] += bleu4(words, rec.captions)
            sums["rouge_l"] += rouge_l(words, rec.captions)
            sums["cider"] += cider(words, rec.captions, doc_freq)
    return {k: v / len(records) for k, v in sums.items()}


def _mean_state_loss(student, teacher, records, t_max, vocab, match_cell=False):
    """Mean per-step hidden-state loss of greedy rollouts on a split."""
    total = 0.0
    with no_grad():
        for rec in records:
            ctx = student.decoder.begin(rec.features)
            init = student.initial_state(ctx)
            rollout = greedy_decode(student.decoder, ctx, init, t_max,
                                    bos_id=vocab.BOS)
            teacher_trace = teacher.trace_for_tokens(rollout.tokens, rec.features)
            losses = state_loss_trace(rollout.trace, teacher_trace,
                                      match_cell=match_cell)
            total += sum(loss.item() for loss in losses) / len(losses)
    return total / len(records)


def _gold_teacher_traces(teacher, rec, content_lists):
    """Teacher traces for each gold caption, decoded from the pooled init."""
    with no_grad():
        ctx = teacher.decoder.begin(rec.features)
        init = teacher.encode_pooled(content_lists, ctx.feats)
        traces = []
        for ids in content_lists:
            _, states = teacher_forced(teacher.decoder, ctx, init,
                                       ids + [teacher.decoder.eos_id],
                                       bos_id=teacher.bos_id)
            traces.append(states[:-1])
    return traces


def train_student(train_records, val_records, teacher, statenet, vocab,
                  doc_freq, cfg, log=print):
    """Train the student under one of the four modes.

    scst modes run cfg.mle_warmup_epochs of plain maximum likelihood before
    the REINFORCE epochs.  Every epoch beam-decodes the validation split and
    appends a history line; the parameters with the best validation CIDEr
    are restored at the end.
    """
    if teacher is None:
        raise ContractError("train_student: a pretrained teacher is required")
    if cfg.mode not in ("mle", "mle_hsg", "scst", "scst_hsg"):
        raise ContractError(f"train_student: unknown mode {cfg.mode!r}")

    student = build_student(teacher, statenet, cfg.seed)
    params_named = student.named_parameters()
    params = list(params_named.values())
    rng = np.random.default_rng([cfg.seed, 101])
    reward_fn = make_reward_fn(cfg.reward_metric, vocab, doc_freq)
    lam = cfg.state_loss_weight if cfg.mode.endswith("hsg") else 0.0

    if cfg.mode.startswith("mle"):
        phases = [("mle", cfg.epochs, lam)]
    else:
        phases = [("mle", cfg.mle_warmup_epochs, 0.0), ("rl", cfg.epochs, lam)]

    content_cache = {
        rec.scene_id: [vocab.encode(cap)[1:-1] for cap in rec.captions]
        for rec in train_records}
    trace_cache = {}
    if cfg.mode == "mle_hsg" and lam > 0:
        for rec in train_records:
            trace_cache[rec.scene_id] = _gold_teacher_traces(
                teacher, rec, content_cache[rec.scene_id])

    history = []
    best = (-1.0, None)
    epoch = 0
    for phase, n_epochs, phase_lam in phases:
        for _ in range(n_epochs):
            order = rng.permutation(len(train_records))
            for idx in order:
                rec = train_records[int(idx)]
                if phase == "mle":
                    _mle_step(student, teacher, rec, content_cache[rec.scene_id],
                              trace_cache.get(rec.scene_id), phase_lam, vocab,
                              params, cfg)
                else:
                    _rl_step(student, teacher, rec, reward_fn, phase_lam, vocab,
                             params, cfg, rng)
            metrics = evaluate_split(student, val_records, vocab, doc_freq,
                                     cfg.beam_width, cfg.t_max)
            msl = _mean_state_loss(student, teacher, val_records, cfg.t_max,
                                   vocab, cfg.match_cell_states)
            line = {"epoch": epoch, "split": "val",
                    "bleu4": metrics["bleu4"], "rouge_l": metrics["rouge_l"],
                    "cider": metrics["cider"], "mean_state_loss": msl}
            history.append(line)
            log(f"epoch {epoch} ({phase}): val cider {line['cider']:.4f} "
                f"bleu4 {line['bleu4']:.4f} state_loss {msl:.4f}")
            if line["cider"] > best[0]:
                best = (line["cider"],
                        {n: p.data.copy() for n, p in params_named.items()})
            epoch += 1

    if best[1] is not None:
        for name, data in best[1].items():
            params_named[name].data[...] = data
    return student, history


def _mle_step(student, teacher, rec, content_lists, teacher_traces, lam, vocab,
              params, cfg):
    with Tape() as tape:
        ctx = student.decoder.begin(rec.features)
        init = student.initial_state(ctx)
        loss = None
        for i, ids in enumerate(content_lists):
            targets = ids + [vocab.EOS]
            logits, states = teacher_forced(student.decoder, ctx, init,
                                            targets, bos_id=vocab.BOS)
            ll = loss_ll(logits, targets)
            if lam > 0:
                losses = state_loss_trace(states[:-1], teacher_traces[i],
                                          match_cell=cfg.match_cell_states)
                term = joint_mle_loss(ll, losses, lam)
            else:
                term = ll
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(content_lists))
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"student loss became {loss.item()}")
        backward(tape, loss)
    clip_gradients(params, cfg.grad_clip)
    sgd_update(params, cfg.lr)
    zero_gradients(params)


def _rl_step(student, teacher, rec, reward_fn, lam, vocab, params, cfg, rng):
    with Tape() as tape:
        ctx = student.decoder.begin(rec.features)
        init = student.initial_state(ctx)
        rollout = sample_decode(student.decoder, ctx, init, cfg.t_max, rng,
                                bos_id=vocab.BOS)
        greedy = greedy_decode(student.decoder, ctx, init, cfg.t_max,
                               bos_id=vocab.BOS)
        if lam > 0:
            hsg_gradients(tape, rollout, greedy, rec.captions, reward_fn,
                          teacher, lam, features=rec.features,
                          match_cell=cfg.match_cell_states,
                          discount=cfg.discount)
        else:
            scst_gradients(tape, rollout, greedy, rec.captions, reward_fn)
    clip_gradients(params, cfg.grad_clip)
    sgd_update(params, cfg.rl_lr)
    zero_gradients(params)

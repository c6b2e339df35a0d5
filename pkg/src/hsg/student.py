"""Caption decoders (single-LSTM and two-layer attention), decoding strategies
and the state transformation network.

The same decoder classes serve both the autoencoding teacher and the deployed
student; only the initial hidden states differ.  Decoder states are lists of
(h, c) pairs, one per LSTM layer.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, ContractError, DimensionError, concat,
                       log_softmax, matmul, no_grad, pick, tanh)
from .layers import AttentionHead, Embedding, Linear, LstmCell

__all__ = [
    "FcDecoder", "UpDownDecoder", "StateTransformNet", "RolloutResult",
    "BeamHypothesis", "DecoderContext", "decode_step", "teacher_forced",
    "greedy_decode", "sample_decode", "replay_decode", "beam_search",
    "sample_categorical",
]


@dataclass
class DecoderContext:
    """Per-scene constants: object features, their mean, projected features."""
    feats: Tensor
    vbar: Tensor
    projected: Tensor = None


class FcDecoder:
    """Single-layer LSTM decoder fed concat(word embedding, mean feature)."""

    family = "fc"

    def __init__(self, vocab_size, embed_dim, hidden_dim, feature_dim, eos_id, rng,
                 embedding=None):
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.feature_dim = feature_dim
        self.eos_id = eos_id
        self.embedding = embedding or Embedding(vocab_size, embed_dim, rng)
        self.lstm = LstmCell(self.embedding.embed_dim + feature_dim, hidden_dim, rng)
        self.out = Linear(hidden_dim, vocab_size, rng)

    @property
    def layer_dims(self):
        return [self.hidden_dim]

    def begin(self, features):
        feats = Tensor(np.asarray(features, dtype=np.float64))
        return DecoderContext(feats=feats, vbar=Tensor(feats.data.mean(axis=0)))

    def step(self, ctx, state, token_id):
        (h, c), = state
        e = self.embedding.lookup(token_id)
        x = concat([e, ctx.vbar])
        h2, c2 = self.lstm.step(x, h, c)
        return self.out(h2), [(h2, c2)]

    def named_parameters(self, prefix="decoder"):
        params = {}
        params.update(self.embedding.named_parameters(prefix + ".embedding"))
        params.update(self.lstm.named_parameters(prefix + ".lstm"))
        params.update(self.out.named_parameters(prefix + ".out"))
        return params


class UpDownDecoder:
    """Two-layer decoder: an attention LSTM picks objects, a language LSTM
    consumes the attended feature and emits word logits."""

    family = "updown"

    def __init__(self, vocab_size, embed_dim, hidden_dim, feature_dim, eos_id, rng,
                 embedding=None):
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.feature_dim = feature_dim
        self.eos_id = eos_id
        self.embedding = embedding or Embedding(vocab_size, embed_dim, rng)
        self.att_lstm = LstmCell(
            hidden_dim + feature_dim + self.embedding.embed_dim, hidden_dim, rng)
        self.attention = AttentionHead(feature_dim, hidden_dim, rng)
        self.lang_lstm = LstmCell(feature_dim + hidden_dim, hidden_dim, rng)
        self.out = Linear(hidden_dim, vocab_size, rng)

    @property
    def layer_dims(self):
        return [self.hidden_dim, self.hidden_dim]

    def begin(self, features):
        feats = Tensor(np.asarray(features, dtype=np.float64))
        vbar = Tensor(feats.data.mean(axis=0))
        return DecoderContext(feats=feats, vbar=vbar,
                              projected=self.attention.project(feats))

    def step(self, ctx, state, token_id):
        (h1, c1), (h2, c2) = state
        e = self.embedding.lookup(token_id)
        x1 = concat([h2, ctx.vbar, e])
        h1n, c1n = self.att_lstm.step(x1, h1, c1)
        alpha = self.attention.weights(h1n, ctx.projected)
        attended = matmul(alpha, ctx.feats)
        x2 = concat([attended, h1n])
        h2n, c2n = self.lang_lstm.step(x2, h2, c2)
        return self.out(h2n), [(h1n, c1n), (h2n, c2n)]

    def named_parameters(self, prefix="decoder"):
        params = {}
        params.update(self.embedding.named_parameters(prefix + ".embedding"))
        params.update(self.att_lstm.named_parameters(prefix + ".att_lstm"))
        params.update(self.attention.named_parameters(prefix + ".attention"))
        params.update(self.lang_lstm.named_parameters(prefix + ".lang_lstm"))
        params.update(self.out.named_parameters(prefix + ".out"))
        return params


def decode_step(decoder, ctx, state, prev_token):
    """One autoregressive step: (logits over vocab, next state)."""
    if not 0 <= prev_token < decoder.vocab_size:
        raise ContractError(
            f"decode_step: token id {prev_token} out of range [0, {decoder.vocab_size})")
    if len(state) != len(decoder.layer_dims):
        raise ContractError(
            f"decode_step: state has {len(state)} layers, decoder expects "
            f"{len(decoder.layer_dims)}")
    return decoder.step(ctx, state, prev_token)


class StateTransformNet:
    """Two fully-connected layers with tanh in between, mapping the mean
    visual feature to an initial hidden state per decoder layer.  Cell
    states start at zero."""

    def __init__(self, feature_dim, layer_dims, rng):
        self.feature_dim = feature_dim
        self.layer_dims = list(layer_dims)
        self.blocks = [(Linear(feature_dim, h, rng), Linear(h, h, rng))
                       for h in self.layer_dims]

    def __call__(self, vbar):
        if vbar.data.shape != (self.feature_dim,):
            raise DimensionError(
                f"state transform: input shape {vbar.data.shape} does not match "
                f"({self.feature_dim},)")
        return [l2(tanh(l1(vbar))) for l1, l2 in self.blocks]

    def initial_state(self, vbar):
        return [(h, Tensor(np.zeros(h.data.shape)))
                for h in self(vbar)]

    def named_parameters(self, prefix="statenet"):
        params = {}
        for i, (l1, l2) in enumerate(self.blocks):
            params.update(l1.named_parameters(f"{prefix}.layer{i}.fc1"))
            params.update(l2.named_parameters(f"{prefix}.layer{i}.fc2"))
        return params


@dataclass
class RolloutResult:
    """A decoded caption plus everything needed for policy gradients.

    tokens holds the content words (no eos); log_probs holds one entry per
    emission, including the final eos emission when the rollout ended by
    eos.  states holds every decoder state that was computed; trace trims it
    to [s_0 .. s_T] with T = len(tokens), the states that the hidden-state
    losses compare.
    """
    tokens: list
    log_probs: list
    states: list
    ended: bool
    sampled: bool = False

    @property
    def trace(self):
        return self.states[:len(self.tokens) + 1]

    def total_log_prob(self):
        return sum(lp.item() for lp in self.log_probs)


def sample_categorical(probs, rng):
    """Draw an index from a probability vector with a single uniform draw."""
    cum = np.cumsum(probs)
    u = rng.random() * cum[-1]
    return int(np.searchsorted(cum, u, side="right").clip(0, len(probs) - 1))


def _bos_id(decoder):
    # bos shares the reserved layout of Vocabulary; decoders on raw toy
    # vocabularies fall back to the eos id as the start token.
    return 1 if decoder.vocab_size > 1 else 0


def greedy_decode(decoder, ctx, init_state, t_max, bos_id=None):
    """Argmax decoding; ties go to the lowest token id.  Runs untaped."""
    if t_max < 1:
        raise ContractError("greedy_decode: t_max must be >= 1")
    bos = _bos_id(decoder) if bos_id is None else bos_id
    with no_grad():
        state = init_state
        states = [state]
        tokens, log_probs = [], []
        ended = False
        prev = bos
        for _ in range(t_max):
            logits, state = decode_step(decoder, ctx, state, prev)
            lp = log_softmax(logits)
            tok = int(np.argmax(lp.data))
            states.append(state)
            log_probs.append(pick(lp, tok))
            if tok == decoder.eos_id:
                ended = True
                break
            tokens.append(tok)
            prev = tok
    return RolloutResult(tokens, log_probs, states, ended, sampled=False)


def sample_decode(decoder, ctx, init_state, t_max, rng, bos_id=None):
    """Multinomial decoding from the per-step softmax; records exact
    log-probabilities of the realized tokens on the active tape."""
    if t_max < 1:
        raise ContractError("sample_decode: t_max must be >= 1")
    bos = _bos_id(decoder) if bos_id is None else bos_id
    state = init_state
    states = [state]
    tokens, log_probs = [], []
    ended = False
    prev = bos
    for _ in range(t_max):
        logits, state = decode_step(decoder, ctx, state, prev)
        lp = log_softmax(logits)
        tok = sample_categorical(np.exp(lp.data), rng)
        states.append(state)
        log_probs.append(pick(lp, tok))
        if tok == decoder.eos_id:
            ended = True
            break
        tokens.append(tok)
        prev = tok
    return RolloutResult(tokens, log_probs, states, ended, sampled=True)


def replay_decode(decoder, ctx, init_state, tokens, ended, bos_id=None):
    """Teacher-forced replay of a known rollout; same graph as sampling."""
    bos = _bos_id(decoder) if bos_id is None else bos_id
    state = init_state
    states = [state]
    log_probs = []
    emissions = list(tokens) + ([decoder.eos_id] if ended else [])
    prev = bos
    for tok in emissions:
        logits, state = decode_step(decoder, ctx, state, prev)
        lp = log_softmax(logits)
        states.append(state)
        log_probs.append(pick(lp, tok))
        prev = tok
    return RolloutResult(list(tokens), log_probs, states, ended, sampled=False)


def teacher_forced(decoder, ctx, init_state, targets, bos_id=None):
    """Run the decoder over gold targets; returns (logits per step, states).

    The k-th logits score the k-th target; states has len(targets)+1 entries
    starting from the initial state.
    """
    bos = _bos_id(decoder) if bos_id is None else bos_id
    state = init_state
    states = [state]
    logits_seq = []
    prev = bos
    for tok in targets:
        logits, state = decode_step(decoder, ctx, state, prev)
        logits_seq.append(logits)
        states.append(state)
        prev = tok
    return logits_seq, states


@dataclass
class BeamHypothesis:
    tokens: tuple
    score: float
    ended: bool
    emissions: tuple = field(default=(), repr=False)


def beam_search(decoder, ctx, init_state, t_max, width=5, bos_id=None,
                return_pool=False):
    """Length-unnormalized log-prob beam search.

    Completed hypotheses (eos) retire into a pool and the best pool entry
    wins.  Candidate ranking breaks score ties lexicographically on the
    token sequence, so width 1 reproduces greedy decoding exactly.
    """
    if width < 1:
        raise ContractError("beam_search: width must be >= 1")
    bos = _bos_id(decoder) if bos_id is None else bos_id
    pool = []
    with no_grad():
        alive = [((), 0.0, init_state, bos)]
        for _ in range(t_max):
            candidates = []
            for emitted, score, state, prev in alive:
                logits, nstate = decode_step(decoder, ctx, state, prev)
                lp = log_softmax(logits).data
                for tok in range(decoder.vocab_size):
                    candidates.append(
                        (emitted + (tok,), score + float(lp[tok]), nstate))
            candidates.sort(key=lambda cand: (-cand[1], cand[0]))
            alive = []
            for emitted, score, state in candidates[:width]:
                if emitted[-1] == decoder.eos_id:
                    pool.append(BeamHypothesis(emitted[:-1], score, True, emitted))
                else:
                    alive.append((emitted, score, state, emitted[-1]))
            if not alive:
                break
        for emitted, score, _state, _prev in alive:
            pool.append(BeamHypothesis(emitted, score, False, emitted))
    pool.sort(key=lambda h: (-h.score, h.emissions))
    if return_pool:
        return pool
    return pool[0]
